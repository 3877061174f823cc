//! Probability machinery: quantizers, Gaussian and Gaussian-mixture bin
//! probabilities, code rates, and the cross-user MMSE estimator.
//!
//! Discrete symbol probabilities come from integrating a continuous density
//! over unit quantization intervals. For the per-element Gaussian latent
//! model that integral is a difference of normal CDFs; for the bivariate
//! mixture hyper model it reduces to a 1-d adaptive quadrature. Rates are
//! always in log2 units (bits), with probabilities floored at
//! [`PROB_FLOOR`] before any log so early training never sees infinities.

mod gmm;
pub mod quad;

pub use gmm::{
    Component, JointHyperPrior, MarginalPrior, PriorTable, UniComponent, independent_rate_bits,
    joint_density_op, joint_rate_bits, joint_rate_bits_op, marginal_rate_bits_op, mixture_bin_prob,
    mixture_density, mmse_estimate, mmse_estimate_rev, mmse_estimate_scalar, rect_prob,
    uni_bin_prob,
};

use crate::diffcore::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Smallest probability fed to a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Lower bound on conditional-Gaussian scales.
pub const SIGMA_MIN: f64 = 1e-6;

pub const LN_2: f64 = std::f64::consts::LN_2;
const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

/// Standard normal CDF via the complementary error function (keeps relative
/// accuracy in the far tails, where 1-erf loses everything).
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Probability that a Gaussian(mu, sigma) convolved with U(-1/2, 1/2) lands
/// in the unit bin around `y`: CDF((y+1/2-mu)/sigma) - CDF((y-1/2-mu)/sigma).
pub fn bin_prob(y: f64, mu: f64, sigma: f64) -> f64 {
    let hi = (y + 0.5 - mu) / sigma;
    let lo = (y - 0.5 - mu) / sigma;
    normal_cdf(hi) - normal_cdf(lo)
}

/// Differentiable [`bin_prob`] applied elementwise to same-shaped variables.
pub fn latent_bin_prob_op(tape: &mut Tape, y: Var, mu: Var, sigma: Var) -> Result<Var> {
    let (vy, vm, vs) = (
        tape.value(y).clone(),
        tape.value(mu).clone(),
        tape.value(sigma).clone(),
    );
    if vy.shape() != vm.shape() || vy.shape() != vs.shape() {
        return Err(Error::ShapeMismatch(format!(
            "bin_prob: y {:?}, mu {:?}, sigma {:?}",
            vy.shape(),
            vm.shape(),
            vs.shape()
        )));
    }
    let mut out = Tensor::zeros(vy.shape());
    for i in 0..vy.len() {
        out.data_mut()[i] = bin_prob(vy.data()[i], vm.data()[i], vs.data()[i]);
    }
    let back = move |g: &Tensor| {
        let mut dy = Tensor::zeros(g.shape());
        let mut dm = Tensor::zeros(g.shape());
        let mut ds = Tensor::zeros(g.shape());
        for i in 0..g.len() {
            let (yv, mv, sv) = (vy.data()[i], vm.data()[i], vs.data()[i]);
            let hi = (yv + 0.5 - mv) / sv;
            let lo = (yv - 0.5 - mv) / sv;
            let (phi_hi, phi_lo) = (normal_pdf(hi), normal_pdf(lo));
            let gv = g.data()[i];
            // d/dy = (phi(hi) - phi(lo)) / sigma; d/dmu is its negative;
            // d/dsigma = -(phi(hi) hi - phi(lo) lo) / sigma.
            dy.data_mut()[i] = gv * (phi_hi - phi_lo) / sv;
            dm.data_mut()[i] = -gv * (phi_hi - phi_lo) / sv;
            ds.data_mut()[i] = -gv * (phi_hi * hi - phi_lo * lo) / sv;
        }
        vec![dy, dm, ds]
    };
    tape.custom(&[y, mu, sigma], out, back)
}

/// Per-token code length: y, mu, sigma are l×c token matrices; returns the l
/// per-token sums of -log2 bin probability.
pub fn latent_rate_bits_op(tape: &mut Tape, y: Var, mu: Var, sigma: Var) -> Result<Var> {
    let p = latent_bin_prob_op(tape, y, mu, sigma)?;
    let p = tape.clamp_min(p, PROB_FLOOR)?;
    let lp = tape.ln(p)?;
    let bits = tape.scale(lp, -1.0 / LN_2)?;
    tape.row_sums(bits)
}

/// Forward-only per-token bits with the latent pinned at its mean. A pure
/// function of sigma, which is what lets transmitter and receiver agree on
/// bandwidth without sharing the latent itself.
pub fn rate_bits_at_mean(sigma: &Tensor) -> Result<Vec<f64>> {
    match sigma.shape() {
        &[l, c] => Ok((0..l)
            .map(|i| {
                sigma.data()[i * c..(i + 1) * c]
                    .iter()
                    .map(|&s| -bin_prob(0.0, 0.0, s).max(PROB_FLOOR).log2())
                    .sum()
            })
            .collect()),
        other => Err(Error::ShapeMismatch(format!(
            "rate_bits_at_mean expects l×c tokens, got {other:?}"
        ))),
    }
}

/// Forward-only token rate at explicit latent values.
pub fn token_rate_bits(y: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    y.iter()
        .zip(mu)
        .zip(sigma)
        .map(|((&yv, &mv), &sv)| -bin_prob(yv, mv, sv).max(PROB_FLOOR).log2())
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizeMode {
    /// Additive U(-1/2, 1/2) noise: the differentiable training relaxation.
    Train,
    /// Round half away from zero, gradient passed through unchanged.
    Eval,
}

/// Quantizer relaxation. Train mode adds uniform noise drawn from a stream
/// keyed by `seed`; eval mode rounds with a straight-through backward.
pub fn noisy_quantize(tape: &mut Tape, v: Var, mode: QuantizeMode, seed: u64) -> Result<Var> {
    match mode {
        QuantizeMode::Train => {
            use rand::Rng;
            let mut rng = crate::rng::keyed_rng(seed, &[0x7175_616e_74]);
            let shape = tape.shape(v).to_vec();
            let noise = Tensor::from_fn(&shape, |_| rng.gen_range(-0.5..0.5));
            let n = tape.input(noise);
            tape.add(v, n)
        }
        QuantizeMode::Eval => {
            let val = tape.value(v).clone();
            let mut out = Tensor::zeros(val.shape());
            for (o, &x) in out.data_mut().iter_mut().zip(val.data()) {
                *o = x.round();
            }
            tape.custom(&[v], out, |g| vec![g.clone()])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::ParamSet;

    #[test]
    fn bin_prob_reference_value() {
        // Standard normal mass on [-1/2, 1/2].
        let p = bin_prob(0.0, 0.0, 1.0);
        assert!((p - 0.382_924_9).abs() < 1e-7, "p = {p}");
    }

    #[test]
    fn bin_prob_concentrates_at_tiny_sigma() {
        let p = bin_prob(0.0, 0.0, SIGMA_MIN);
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bin_prob_symmetry() {
        for d in [0.1, 0.7, 2.3, 5.0] {
            let a = bin_prob(1.0 + d, 1.0, 0.8);
            let b = bin_prob(1.0 - d, 1.0, 0.8);
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn rate_increases_away_from_mean() {
        let mut last = 0.0;
        for i in 0..10 {
            let y = i as f64 * 0.5;
            let bits = -bin_prob(y, 0.0, 1.0).log2();
            assert!(bits > last);
            last = bits;
        }
    }

    #[test]
    fn rate_at_mean_matches_bin_prob() {
        let sigma = Tensor::filled(&[2, 3], 1.0);
        let bits = rate_bits_at_mean(&sigma).unwrap();
        let per_elem = -bin_prob(0.0, 0.0, 1.0).log2();
        for b in bits {
            assert!((b - 3.0 * per_elem).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_quantize_rounds_half_away() {
        let mut tape = Tape::new();
        let v = tape.input(Tensor::new(&[4], vec![2.5, -2.5, 0.4, -0.6]).unwrap());
        let q = noisy_quantize(&mut tape, v, QuantizeMode::Eval, 0).unwrap();
        assert_eq!(tape.value(q).data(), &[3.0, -3.0, 0.0, -1.0]);
    }

    #[test]
    fn eval_quantize_straight_through() {
        let mut params = ParamSet::new();
        let mut tape = Tape::new();
        let v = tape.input(Tensor::new(&[3], vec![0.3, 1.7, -0.9]).unwrap());
        let q = noisy_quantize(&mut tape, v, QuantizeMode::Eval, 0).unwrap();
        let s = tape.sum(q).unwrap();
        let grads = tape.backward(s, &mut params).unwrap();
        assert_eq!(grads.wrt(v).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn train_quantize_is_seeded() {
        let run = |seed| {
            let mut tape = Tape::new();
            let v = tape.input(Tensor::zeros(&[16]));
            let q = noisy_quantize(&mut tape, v, QuantizeMode::Train, seed).unwrap();
            tape.value(q).data().to_vec()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
        assert!(run(5).iter().all(|&x| (-0.5..0.5).contains(&x)));
    }

    #[test]
    fn latent_rate_op_matches_plain() {
        let mut tape = Tape::new();
        let y = tape.input(Tensor::new(&[2, 2], vec![0.0, 1.0, -1.0, 2.0]).unwrap());
        let mu = tape.input(Tensor::new(&[2, 2], vec![0.1, 0.9, -1.2, 1.5]).unwrap());
        let sg = tape.input(Tensor::new(&[2, 2], vec![1.0, 0.5, 2.0, 0.7]).unwrap());
        let bits = latent_rate_bits_op(&mut tape, y, mu, sg).unwrap();
        let v = tape.value(bits);
        let row0 = token_rate_bits(&[0.0, 1.0], &[0.1, 0.9], &[1.0, 0.5]);
        let row1 = token_rate_bits(&[-1.0, 2.0], &[-1.2, 1.5], &[2.0, 0.7]);
        assert!((v.data()[0] - row0).abs() < 1e-12);
        assert!((v.data()[1] - row1).abs() < 1e-12);
    }
}
