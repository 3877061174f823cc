//! Bivariate Gaussian-mixture hyper model, factorized over indices.
//!
//! Each hyper index j carries its own K-component mixture over the pair
//! (z1[j], z2[j]). Covariances are parameterized by lower-triangular factors
//! L with softplus-floored diagonals, so Sigma = L·L^T is positive definite
//! by construction (diagonal >= 1e-8, no projection step ever needed).
//!
//! Bin probabilities integrate the density over the unit square around an
//! integer pair. The rectangle probability of one component reduces to a 1-d
//! integral of phi(t)·[CDF(b(t)) - CDF(a(t))] in coordinates standardized by
//! the first marginal; adaptive quadrature evaluates it to 1e-10 absolute.
//! Backward never differentiates through the quadrature: the derivatives of a
//! rectangle probability w.r.t. means and covariance entries are themselves
//! closed-form (edge integrals and corner densities), which keeps gradients
//! exact up to CDF rounding.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::quad;
use super::{bin_prob, normal_cdf, normal_pdf, LN_2, PROB_FLOOR};
use crate::diffcore::{ParamId, ParamSet, Tape, Tensor, Var};
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;
/// Quadrature tolerance for rectangle probabilities.
pub const RECT_TOL: f64 = 1e-10;
/// Standardized integration range; the discarded tail mass is < 1e-18.
const STD_RANGE: f64 = 9.0;
/// Floor added to softplus-mapped Cholesky diagonals and univariate scales.
const DIAG_FLOOR: f64 = 1e-4;

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Raw value whose floored softplus equals `target` (> the floor).
fn inv_softplus_floor(target: f64) -> f64 {
    let x = target - DIAG_FLOOR;
    assert!(x > 0.0, "target {target} below the diagonal floor");
    // ln(e^x - 1), stable for small and large x.
    x + (-(-x).exp()).ln_1p()
}

/// One materialized bivariate mixture component.
#[derive(Debug, Clone, Copy)]
pub struct Component {
    /// Softmax-normalized mixture weight.
    pub weight: f64,
    pub mean: [f64; 2],
    /// (s11, s12, s22) of the symmetric covariance.
    pub cov: [f64; 3],
}

/// One materialized univariate mixture component.
#[derive(Debug, Clone, Copy)]
pub struct UniComponent {
    pub weight: f64,
    pub mean: f64,
    pub sigma: f64,
}

/// Cached factor values for the chain rule back to raw parameters.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Chain {
    l11: f64,
    l21: f64,
    l22: f64,
    sig11: f64,
    sig22: f64,
}

/// Trainable joint hyper prior: per index j, K logits, K 2-d means, K
/// triangular covariance factors. `l21 = None` pins every off-diagonal to
/// zero (the uncoupled variant used by the independent-prior ablation's
/// diagonal identities and tests).
#[derive(Debug, Clone)]
pub struct JointHyperPrior {
    pub n_indices: usize,
    pub k: usize,
    pub logits: ParamId,
    pub means: ParamId,
    pub l11: ParamId,
    pub l21: Option<ParamId>,
    pub l22: ParamId,
}

impl JointHyperPrior {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        n_indices: usize,
        k: usize,
        coupled: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_indices == 0 || k == 0 {
            return Err(Error::InvalidArgument("empty prior".into()));
        }
        let mean_dist = Normal::new(0.0, 1.0).unwrap();
        let l21_dist = Normal::new(0.0, 0.05).unwrap();
        let unit_raw = inv_softplus_floor(1.0);
        let logits = params.add(&format!("{name}.logits"), Tensor::zeros(&[n_indices, k]))?;
        let means = params.add(
            &format!("{name}.means"),
            Tensor::from_fn(&[n_indices, k, 2], |_| mean_dist.sample(rng)),
        )?;
        let l11 = params.add(
            &format!("{name}.l11"),
            Tensor::filled(&[n_indices, k], unit_raw),
        )?;
        let l21 = if coupled {
            Some(params.add(
                &format!("{name}.l21"),
                Tensor::from_fn(&[n_indices, k], |_| l21_dist.sample(rng)),
            )?)
        } else {
            None
        };
        let l22 = params.add(
            &format!("{name}.l22"),
            Tensor::filled(&[n_indices, k], unit_raw),
        )?;
        Ok(Self {
            n_indices,
            k,
            logits,
            means,
            l11,
            l21,
            l22,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.logits, self.means, self.l11];
        if let Some(l21) = self.l21 {
            ids.push(l21);
        }
        ids.push(self.l22);
        ids
    }

    /// Overwrites component (j, k) with exact values: mixture logit, mean,
    /// and triangular factor (l11, l21, l22) giving Sigma = L·L^T. The
    /// diagonal entries must exceed the 1e-4 factor floor.
    pub fn set_component(
        &self,
        params: &mut ParamSet,
        j: usize,
        k: usize,
        logit: f64,
        mean: [f64; 2],
        l: [f64; 3],
    ) {
        let kk = self.k;
        params.value_mut(self.logits).data_mut()[j * kk + k] = logit;
        params.value_mut(self.means).data_mut()[(j * kk + k) * 2] = mean[0];
        params.value_mut(self.means).data_mut()[(j * kk + k) * 2 + 1] = mean[1];
        params.value_mut(self.l11).data_mut()[j * kk + k] = inv_softplus_floor(l[0]);
        match self.l21 {
            Some(id) => params.value_mut(id).data_mut()[j * kk + k] = l[1],
            None => assert_eq!(l[1], 0.0, "uncoupled prior cannot hold l21 = {}", l[1]),
        }
        params.value_mut(self.l22).data_mut()[j * kk + k] = inv_softplus_floor(l[2]);
    }

    pub fn materialize(&self, params: &ParamSet) -> PriorTable {
        let (n, k) = (self.n_indices, self.k);
        let logits = params.value(self.logits).data();
        let means = params.value(self.means).data();
        let l11r = params.value(self.l11).data();
        let l22r = params.value(self.l22).data();
        let mut comps = Vec::with_capacity(n);
        let mut chain = Vec::with_capacity(n);
        for j in 0..n {
            let row = &logits[j * k..(j + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
            let zsum: f64 = exps.iter().sum();
            let mut cj = Vec::with_capacity(k);
            let mut hj = Vec::with_capacity(k);
            for t in 0..k {
                let idx = j * k + t;
                let l11 = softplus(l11r[idx]) + DIAG_FLOOR;
                let l21 = match self.l21 {
                    Some(id) => params.value(id).data()[idx],
                    None => 0.0,
                };
                let l22 = softplus(l22r[idx]) + DIAG_FLOOR;
                cj.push(Component {
                    weight: exps[t] / zsum,
                    mean: [means[idx * 2], means[idx * 2 + 1]],
                    cov: [l11 * l11, l11 * l21, l21 * l21 + l22 * l22],
                });
                hj.push(Chain {
                    l11,
                    l21,
                    l22,
                    sig11: sigmoid(l11r[idx]),
                    sig22: sigmoid(l22r[idx]),
                });
            }
            comps.push(cj);
            chain.push(hj);
        }
        PriorTable { comps, chain }
    }
}

/// Trainable univariate mixture prior for one user (the independent-model
/// baseline): per index, K logits, K means, K softplus-floored scales.
#[derive(Debug, Clone)]
pub struct MarginalPrior {
    pub n_indices: usize,
    pub k: usize,
    pub logits: ParamId,
    pub means: ParamId,
    pub scales: ParamId,
}

impl MarginalPrior {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        n_indices: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_indices == 0 || k == 0 {
            return Err(Error::InvalidArgument("empty prior".into()));
        }
        let mean_dist = Normal::new(0.0, 1.0).unwrap();
        Ok(Self {
            n_indices,
            k,
            logits: params.add(&format!("{name}.logits"), Tensor::zeros(&[n_indices, k]))?,
            means: params.add(
                &format!("{name}.means"),
                Tensor::from_fn(&[n_indices, k], |_| mean_dist.sample(rng)),
            )?,
            scales: params.add(
                &format!("{name}.scales"),
                Tensor::filled(&[n_indices, k], inv_softplus_floor(1.0)),
            )?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.logits, self.means, self.scales]
    }

    pub fn set_component(
        &self,
        params: &mut ParamSet,
        j: usize,
        k: usize,
        logit: f64,
        mean: f64,
        sigma: f64,
    ) {
        let idx = j * self.k + k;
        params.value_mut(self.logits).data_mut()[idx] = logit;
        params.value_mut(self.means).data_mut()[idx] = mean;
        params.value_mut(self.scales).data_mut()[idx] = inv_softplus_floor(sigma);
    }

    pub fn materialize(&self, params: &ParamSet) -> Vec<Vec<UniComponent>> {
        let (n, k) = (self.n_indices, self.k);
        let logits = params.value(self.logits).data();
        let means = params.value(self.means).data();
        let scales = params.value(self.scales).data();
        (0..n)
            .map(|j| {
                let row = &logits[j * k..(j + 1) * k];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
                let zsum: f64 = exps.iter().sum();
                (0..k)
                    .map(|t| UniComponent {
                        weight: exps[t] / zsum,
                        mean: means[j * k + t],
                        sigma: softplus(scales[j * k + t]) + DIAG_FLOOR,
                    })
                    .collect()
            })
            .collect()
    }
}

/// Materialized joint prior: per index, the mixture components plus the
/// cached chain factors backward needs.
pub struct PriorTable {
    pub comps: Vec<Vec<Component>>,
    pub(crate) chain: Vec<Vec<Chain>>,
}

impl PriorTable {
    /// Forward-only table over explicit components: rates, probabilities,
    /// and MMSE estimates work; backward through [`joint_rate_bits_op`]
    /// needs a table materialized from a [`JointHyperPrior`] instead.
    pub fn from_components(comps: Vec<Vec<Component>>) -> Self {
        Self {
            comps,
            chain: Vec::new(),
        }
    }

    pub fn n_indices(&self) -> usize {
        self.comps.len()
    }

    /// Univariate marginals of one side (`user` is 1 or 2).
    pub fn marginals(&self, user: usize) -> Vec<Vec<UniComponent>> {
        let u = user - 1;
        self.comps
            .iter()
            .map(|cj| {
                cj.iter()
                    .map(|c| UniComponent {
                        weight: c.weight,
                        mean: c.mean[u],
                        sigma: c.cov[2 * u].sqrt(),
                    })
                    .collect()
            })
            .collect()
    }
}

// ---- plain (forward-only) math ----

fn comp_density(c: &Component, z1: f64, z2: f64) -> f64 {
    let [s11, s12, s22] = c.cov;
    let det = s11 * s22 - s12 * s12;
    let d1 = z1 - c.mean[0];
    let d2 = z2 - c.mean[1];
    let q = (s22 * d1 * d1 - 2.0 * s12 * d1 * d2 + s11 * d2 * d2) / det;
    (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * det.sqrt())
}

/// Mixture density at a continuous point.
pub fn mixture_density(comps: &[Component], z1: f64, z2: f64) -> f64 {
    comps
        .iter()
        .map(|c| c.weight * comp_density(c, z1, z2))
        .sum()
}

/// Probability a single component assigns to the rectangle
/// [a1,b1]×[a2,b2], by adaptive quadrature of the conditional decomposition
/// integral phi(t)·[CDF(beta(t)) - CDF(alpha(t))] in standardized t.
pub fn rect_prob(c: &Component, a1: f64, b1: f64, a2: f64, b2: f64, tol: f64) -> f64 {
    let [s11, s12, s22] = c.cov;
    let (m1, m2) = (c.mean[0], c.mean[1]);
    let s1 = s11.sqrt();
    let lo = ((a1 - m1) / s1).max(-STD_RANGE);
    let hi = ((b1 - m1) / s1).min(STD_RANGE);
    if lo >= hi {
        return 0.0;
    }
    // Conditional of the second coordinate given t: mean m2 + (s12/s1)·t,
    // scale sqrt(s22 - s12^2/s11) (positive: it equals l11^2·l22^2/s22 > 0).
    let slope = s12 / s1;
    let sc = (s22 - s12 * s12 / s11).max(1e-32).sqrt();
    let f = move |t: f64| {
        let mc = m2 + slope * t;
        normal_pdf(t) * (normal_cdf((b2 - mc) / sc) - normal_cdf((a2 - mc) / sc))
    };
    quad::integrate(&f, lo, hi, tol)
}

/// Mixture probability of the unit bin around the integer pair (zb1, zb2).
pub fn mixture_bin_prob(comps: &[Component], zb1: f64, zb2: f64, tol: f64) -> f64 {
    comps
        .iter()
        .map(|c| {
            c.weight * rect_prob(c, zb1 - 0.5, zb1 + 0.5, zb2 - 0.5, zb2 + 0.5, tol)
        })
        .sum()
}

/// Univariate mixture probability of the unit bin around `zb` (closed form).
pub fn uni_bin_prob(comps: &[UniComponent], zb: f64) -> f64 {
    comps
        .iter()
        .map(|c| c.weight * bin_prob(zb, c.mean, c.sigma))
        .sum()
}

/// Per-index joint code lengths -log2 p(z1[j], z2[j]) with the probability
/// floor applied.
pub fn joint_rate_bits(table: &PriorTable, z1: &[f64], z2: &[f64]) -> Vec<f64> {
    table
        .comps
        .iter()
        .zip(z1.iter().zip(z2))
        .map(|(cj, (&a, &b))| -mixture_bin_prob(cj, a, b, RECT_TOL).max(PROB_FLOOR).log2())
        .collect()
}

/// Per-index code lengths under independent per-user univariate models.
pub fn independent_rate_bits(
    m1: &[Vec<UniComponent>],
    m2: &[Vec<UniComponent>],
    z1: &[f64],
    z2: &[f64],
) -> Vec<f64> {
    m1.iter()
        .zip(m2)
        .zip(z1.iter().zip(z2))
        .map(|((c1, c2), (&a, &b))| {
            -uni_bin_prob(c1, a).max(PROB_FLOOR).log2() - uni_bin_prob(c2, b).max(PROB_FLOOR).log2()
        })
        .collect()
}

/// Conditional mean of the second coordinate given the first, per component
/// responsibilities under the first marginal.
pub fn mmse_estimate_scalar(comps: &[Component], z1: f64) -> f64 {
    let logw: Vec<f64> = comps
        .iter()
        .map(|c| {
            let s11 = c.cov[0];
            let d = z1 - c.mean[0];
            c.weight.ln() - 0.5 * d * d / s11 - 0.5 * (s11.ln() + LN_2PI)
        })
        .collect();
    let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|&l| (l - top).exp()).collect();
    let wsum: f64 = w.iter().sum();
    comps
        .iter()
        .zip(&w)
        .map(|(c, wi)| {
            (wi / wsum) * (c.mean[1] + c.cov[1] / c.cov[0] * (z1 - c.mean[0]))
        })
        .sum()
}

/// Elementwise MMSE estimate of the other user's hyper values.
pub fn mmse_estimate(z1: &Tensor, table: &PriorTable) -> Result<Tensor> {
    if z1.len() != table.n_indices() {
        return Err(Error::ShapeMismatch(format!(
            "{} values for a prior over {} indices",
            z1.len(),
            table.n_indices()
        )));
    }
    let mut out = Tensor::zeros(z1.shape());
    for (j, (o, &v)) in out.data_mut().iter_mut().zip(z1.data()).enumerate() {
        *o = mmse_estimate_scalar(&table.comps[j], v);
    }
    Ok(out)
}

/// The opposite direction: estimate the first user's hyper values from the
/// second's, by conditioning each component with its coordinates swapped.
pub fn mmse_estimate_rev(z2: &Tensor, table: &PriorTable) -> Result<Tensor> {
    if z2.len() != table.n_indices() {
        return Err(Error::ShapeMismatch(format!(
            "{} values for a prior over {} indices",
            z2.len(),
            table.n_indices()
        )));
    }
    let mut out = Tensor::zeros(z2.shape());
    for (j, (o, &v)) in out.data_mut().iter_mut().zip(z2.data()).enumerate() {
        let swapped: Vec<Component> = table.comps[j]
            .iter()
            .map(|c| Component {
                weight: c.weight,
                mean: [c.mean[1], c.mean[0]],
                cov: [c.cov[2], c.cov[1], c.cov[0]],
            })
            .collect();
        *o = mmse_estimate_scalar(&swapped, v);
    }
    Ok(out)
}

// ---- closed-form partial derivatives ----

/// Derivatives of one component's unit-bin probability at (zb1, zb2) w.r.t.
/// mean and covariance entries. Mean shifts come from the two edge integrals
/// G_i (closed form via the conditional decomposition); diagonal covariance
/// entries from the edge-integral derivatives G_i'; the off-diagonal from the
/// density at the four corners. dP/dz1 = -dP/dm1 and likewise for z2.
#[derive(Debug, Clone, Copy, Default)]
struct RectPartials {
    dm1: f64,
    dm2: f64,
    ds11: f64,
    ds12: f64,
    ds22: f64,
}

fn rect_prob_partials(c: &Component, zb1: f64, zb2: f64) -> RectPartials {
    let [s11, s12, s22] = c.cov;
    let (m1, m2) = (c.mean[0], c.mean[1]);
    let (a1, b1) = (zb1 - 0.5, zb1 + 0.5);
    let (a2, b2) = (zb2 - 0.5, zb2 + 0.5);
    let (s1, s2) = (s11.sqrt(), s22.sqrt());

    // Edge along coordinate 1: G1(x) = phi_1(x)·[CDF(beta2) - CDF(alpha2)]
    // and its x-derivative; conditional scale sc1 = sqrt(s22 - s12^2/s11).
    let sc1 = (s22 - s12 * s12 / s11).max(1e-32).sqrt();
    let edge1 = |x: f64| {
        let t = (x - m1) / s1;
        let phi1 = normal_pdf(t) / s1;
        let mc = m2 + s12 / s11 * (x - m1);
        let beta = (b2 - mc) / sc1;
        let alpha = (a2 - mc) / sc1;
        let delta = normal_cdf(beta) - normal_cdf(alpha);
        let g = phi1 * delta;
        let gp = phi1
            * (-(x - m1) / s11 * delta
                - s12 / (s11 * sc1) * (normal_pdf(beta) - normal_pdf(alpha)));
        (g, gp)
    };
    let sc2 = (s11 - s12 * s12 / s22).max(1e-32).sqrt();
    let edge2 = |y: f64| {
        let t = (y - m2) / s2;
        let phi2 = normal_pdf(t) / s2;
        let mc = m1 + s12 / s22 * (y - m2);
        let beta = (b1 - mc) / sc2;
        let alpha = (a1 - mc) / sc2;
        let delta = normal_cdf(beta) - normal_cdf(alpha);
        let g = phi2 * delta;
        let gp = phi2
            * (-(y - m2) / s22 * delta
                - s12 / (s22 * sc2) * (normal_pdf(beta) - normal_pdf(alpha)));
        (g, gp)
    };

    let (g1b, g1pb) = edge1(b1);
    let (g1a, g1pa) = edge1(a1);
    let (g2b, g2pb) = edge2(b2);
    let (g2a, g2pa) = edge2(a2);

    RectPartials {
        dm1: -(g1b - g1a),
        dm2: -(g2b - g2a),
        ds11: 0.5 * (g1pb - g1pa),
        ds22: 0.5 * (g2pb - g2pa),
        ds12: comp_density(c, b1, b2) - comp_density(c, b1, a2) - comp_density(c, a1, b2)
            + comp_density(c, a1, a2),
    }
}

/// Derivatives of one component's density at a continuous point.
#[derive(Debug, Clone, Copy, Default)]
struct DensityPartials {
    value: f64,
    dm1: f64,
    dm2: f64,
    ds11: f64,
    ds12: f64,
    ds22: f64,
}

fn density_partials(c: &Component, z1: f64, z2: f64) -> DensityPartials {
    let [s11, s12, s22] = c.cov;
    let det = s11 * s22 - s12 * s12;
    let (q11, q12, q22) = (s22 / det, -s12 / det, s11 / det);
    let d1 = z1 - c.mean[0];
    let d2 = z2 - c.mean[1];
    let u1 = q11 * d1 + q12 * d2;
    let u2 = q12 * d1 + q22 * d2;
    let phi = comp_density(c, z1, z2);
    DensityPartials {
        value: phi,
        dm1: phi * u1,
        dm2: phi * u2,
        ds11: 0.5 * phi * (u1 * u1 - q11),
        ds12: phi * (u1 * u2 - q12),
        ds22: 0.5 * phi * (u2 * u2 - q22),
    }
}

// ---- tape operations ----

struct MixGradSlices<'a> {
    logits: &'a mut [f64],
    means: &'a mut [f64],
    l11: &'a mut [f64],
    l21: Option<&'a mut [f64]>,
    l22: &'a mut [f64],
    z1: &'a mut f64,
    z2: &'a mut f64,
}

/// Chains component-level partials of a mixture value P = sum_k pi_k·P_k into
/// raw-parameter gradients for one index, scaled by the upstream `gp`.
#[allow(clippy::too_many_arguments)]
fn accumulate_mixture_grads(
    comps: &[Component],
    chain: &[Chain],
    per_comp: &[f64],
    partials: &[RectPartials],
    p_mix: f64,
    gp: f64,
    mut out: MixGradSlices<'_>,
) {
    for (t, c) in comps.iter().enumerate() {
        out.logits[t] += gp * c.weight * (per_comp[t] - p_mix);
        let f = gp * c.weight;
        let p = &partials[t];
        out.means[2 * t] += f * p.dm1;
        out.means[2 * t + 1] += f * p.dm2;
        let h = &chain[t];
        let dl11 = 2.0 * h.l11 * p.ds11 + h.l21 * p.ds12;
        let dl21 = h.l11 * p.ds12 + 2.0 * h.l21 * p.ds22;
        let dl22 = 2.0 * h.l22 * p.ds22;
        out.l11[t] += f * dl11 * h.sig11;
        if let Some(l21) = out.l21.as_deref_mut() {
            l21[t] += f * dl21;
        }
        out.l22[t] += f * dl22 * h.sig22;
        // The partials are w.r.t. the means; shifts of z act oppositely.
        *out.z1 += f * -p.dm1;
        *out.z2 += f * -p.dm2;
    }
}

fn prior_parent_vars(
    tape: &mut Tape,
    prior: &JointHyperPrior,
    params: &ParamSet,
) -> (Vec<Var>, bool) {
    let mut parents = vec![
        tape.param(params, prior.logits),
        tape.param(params, prior.means),
        tape.param(params, prior.l11),
    ];
    let coupled = prior.l21.is_some();
    if let Some(id) = prior.l21 {
        parents.push(tape.param(params, id));
    }
    parents.push(tape.param(params, prior.l22));
    (parents, coupled)
}

fn check_hyper_len(prior_n: usize, z1: &Tensor, z2: &Tensor) -> Result<()> {
    if z1.len() != prior_n || z2.len() != prior_n {
        return Err(Error::ShapeMismatch(format!(
            "hyper pair of {} and {} values for a prior over {prior_n} indices",
            z1.len(),
            z2.len()
        )));
    }
    Ok(())
}

/// Differentiable per-index joint code lengths -log2 p(z1[j], z2[j]).
/// Gradients flow into every prior parameter and into both z inputs.
pub fn joint_rate_bits_op(
    tape: &mut Tape,
    prior: &JointHyperPrior,
    params: &ParamSet,
    z1: Var,
    z2: Var,
) -> Result<Var> {
    let z1v = tape.value(z1).clone();
    let z2v = tape.value(z2).clone();
    check_hyper_len(prior.n_indices, &z1v, &z2v)?;
    let table = prior.materialize(params);
    let (n, k) = (prior.n_indices, prior.k);

    let mut per_comp = vec![0.0; n * k];
    let mut p_mix = vec![0.0; n];
    let mut bits = Tensor::zeros(&[n]);
    for j in 0..n {
        let mut p = 0.0;
        for (t, c) in table.comps[j].iter().enumerate() {
            let zb1 = z1v.data()[j];
            let zb2 = z2v.data()[j];
            let pk = rect_prob(c, zb1 - 0.5, zb1 + 0.5, zb2 - 0.5, zb2 + 0.5, RECT_TOL);
            per_comp[j * k + t] = pk;
            p += c.weight * pk;
        }
        p_mix[j] = p;
        bits.data_mut()[j] = -p.max(PROB_FLOOR).log2();
    }

    let (mut parents, coupled) = prior_parent_vars(tape, prior, params);
    parents.push(z1);
    parents.push(z2);
    let (z1s, z2s) = (z1v.shape().to_vec(), z2v.shape().to_vec());

    let back = move |g: &Tensor| {
        let mut dlogits = Tensor::zeros(&[n, k]);
        let mut dmeans = Tensor::zeros(&[n, k, 2]);
        let mut dl11 = Tensor::zeros(&[n, k]);
        let mut dl21 = Tensor::zeros(&[n, k]);
        let mut dl22 = Tensor::zeros(&[n, k]);
        let mut dz1 = Tensor::zeros(&z1s);
        let mut dz2 = Tensor::zeros(&z2s);
        for j in 0..n {
            if p_mix[j] <= PROB_FLOOR {
                continue; // floored: the log is constant here
            }
            let gp = -g.data()[j] / (p_mix[j] * LN_2);
            let partials: Vec<RectPartials> = table.comps[j]
                .iter()
                .map(|c| rect_prob_partials(c, z1v.data()[j], z2v.data()[j]))
                .collect();
            accumulate_mixture_grads(
                &table.comps[j],
                &table.chain[j],
                &per_comp[j * k..(j + 1) * k],
                &partials,
                p_mix[j],
                gp,
                MixGradSlices {
                    logits: &mut dlogits.data_mut()[j * k..(j + 1) * k],
                    means: &mut dmeans.data_mut()[j * k * 2..(j + 1) * k * 2],
                    l11: &mut dl11.data_mut()[j * k..(j + 1) * k],
                    l21: if coupled {
                        Some(&mut dl21.data_mut()[j * k..(j + 1) * k])
                    } else {
                        None
                    },
                    l22: &mut dl22.data_mut()[j * k..(j + 1) * k],
                    z1: &mut dz1.data_mut()[j],
                    z2: &mut dz2.data_mut()[j],
                },
            );
        }
        let mut grads = vec![dlogits, dmeans, dl11];
        if coupled {
            grads.push(dl21);
        }
        grads.push(dl22);
        grads.push(dz1);
        grads.push(dz2);
        grads
    };
    tape.custom(&parents, bits, back)
}

/// Differentiable per-index mixture density at continuous points.
pub fn joint_density_op(
    tape: &mut Tape,
    prior: &JointHyperPrior,
    params: &ParamSet,
    z1: Var,
    z2: Var,
) -> Result<Var> {
    let z1v = tape.value(z1).clone();
    let z2v = tape.value(z2).clone();
    check_hyper_len(prior.n_indices, &z1v, &z2v)?;
    let table = prior.materialize(params);
    let (n, k) = (prior.n_indices, prior.k);

    let mut out = Tensor::zeros(&[n]);
    for j in 0..n {
        out.data_mut()[j] = mixture_density(&table.comps[j], z1v.data()[j], z2v.data()[j]);
    }

    let (mut parents, coupled) = prior_parent_vars(tape, prior, params);
    parents.push(z1);
    parents.push(z2);
    let (z1s, z2s) = (z1v.shape().to_vec(), z2v.shape().to_vec());
    let values = out.clone();

    let back = move |g: &Tensor| {
        let mut dlogits = Tensor::zeros(&[n, k]);
        let mut dmeans = Tensor::zeros(&[n, k, 2]);
        let mut dl11 = Tensor::zeros(&[n, k]);
        let mut dl21 = Tensor::zeros(&[n, k]);
        let mut dl22 = Tensor::zeros(&[n, k]);
        let mut dz1 = Tensor::zeros(&z1s);
        let mut dz2 = Tensor::zeros(&z2s);
        for j in 0..n {
            let gp = g.data()[j];
            let dens: Vec<DensityPartials> = table.comps[j]
                .iter()
                .map(|c| density_partials(c, z1v.data()[j], z2v.data()[j]))
                .collect();
            let per_comp: Vec<f64> = dens.iter().map(|d| d.value).collect();
            // Same mean-shift convention as RectPartials; reuse the chain.
            let partials: Vec<RectPartials> = dens
                .iter()
                .map(|d| RectPartials {
                    dm1: d.dm1,
                    dm2: d.dm2,
                    ds11: d.ds11,
                    ds12: d.ds12,
                    ds22: d.ds22,
                })
                .collect();
            accumulate_mixture_grads(
                &table.comps[j],
                &table.chain[j],
                &per_comp,
                &partials,
                values.data()[j],
                gp,
                MixGradSlices {
                    logits: &mut dlogits.data_mut()[j * k..(j + 1) * k],
                    means: &mut dmeans.data_mut()[j * k * 2..(j + 1) * k * 2],
                    l11: &mut dl11.data_mut()[j * k..(j + 1) * k],
                    l21: if coupled {
                        Some(&mut dl21.data_mut()[j * k..(j + 1) * k])
                    } else {
                        None
                    },
                    l22: &mut dl22.data_mut()[j * k..(j + 1) * k],
                    z1: &mut dz1.data_mut()[j],
                    z2: &mut dz2.data_mut()[j],
                },
            );
        }
        let mut grads = vec![dlogits, dmeans, dl11];
        if coupled {
            grads.push(dl21);
        }
        grads.push(dl22);
        grads.push(dz1);
        grads.push(dz2);
        grads
    };
    tape.custom(&parents, out, back)
}

/// Differentiable per-index univariate code lengths -log2 p(z[j]) under a
/// marginal prior.
pub fn marginal_rate_bits_op(
    tape: &mut Tape,
    prior: &MarginalPrior,
    params: &ParamSet,
    z: Var,
) -> Result<Var> {
    let zv = tape.value(z).clone();
    if zv.len() != prior.n_indices {
        return Err(Error::ShapeMismatch(format!(
            "{} values for a prior over {} indices",
            zv.len(),
            prior.n_indices
        )));
    }
    let comps = prior.materialize(params);
    let raw_scales = params.value(prior.scales).data().to_vec();
    let (n, k) = (prior.n_indices, prior.k);

    let mut per_comp = vec![0.0; n * k];
    let mut p_mix = vec![0.0; n];
    let mut bits = Tensor::zeros(&[n]);
    for j in 0..n {
        let mut p = 0.0;
        for (t, c) in comps[j].iter().enumerate() {
            let pk = bin_prob(zv.data()[j], c.mean, c.sigma);
            per_comp[j * k + t] = pk;
            p += c.weight * pk;
        }
        p_mix[j] = p;
        bits.data_mut()[j] = -p.max(PROB_FLOOR).log2();
    }

    let parents = [
        tape.param(params, prior.logits),
        tape.param(params, prior.means),
        tape.param(params, prior.scales),
        z,
    ];
    let zs = zv.shape().to_vec();

    let back = move |g: &Tensor| {
        let mut dlogits = Tensor::zeros(&[n, k]);
        let mut dmeans = Tensor::zeros(&[n, k]);
        let mut dscales = Tensor::zeros(&[n, k]);
        let mut dz = Tensor::zeros(&zs);
        for j in 0..n {
            if p_mix[j] <= PROB_FLOOR {
                continue;
            }
            let gp = -g.data()[j] / (p_mix[j] * LN_2);
            for (t, c) in comps[j].iter().enumerate() {
                dlogits.data_mut()[j * k + t] +=
                    gp * c.weight * (per_comp[j * k + t] - p_mix[j]);
                let f = gp * c.weight;
                let beta = (zv.data()[j] + 0.5 - c.mean) / c.sigma;
                let alpha = (zv.data()[j] - 0.5 - c.mean) / c.sigma;
                let (pb, pa) = (normal_pdf(beta), normal_pdf(alpha));
                dmeans.data_mut()[j * k + t] += f * -(pb - pa) / c.sigma;
                dscales.data_mut()[j * k + t] +=
                    f * -(pb * beta - pa * alpha) / c.sigma * sigmoid(raw_scales[j * k + t]);
                dz.data_mut()[j] += f * (pb - pa) / c.sigma;
            }
        }
        vec![dlogits, dmeans, dscales, dz]
    };
    tape.custom(&parents, bits, back)
}
