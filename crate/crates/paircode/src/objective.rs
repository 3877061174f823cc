//! Training loss, image metrics, and divergence-term diagnostics.
//!
//! The loss is d1 + d2 + lambda*(eta*r_y1 + eta*r_y2 + r_z) with all rates
//! in log2 units. Distortion enters unclamped so gradients are never zeroed
//! by clipping; the metrics clamp on their own.

use crate::diffcore::{Tape, Tensor, Var};
use crate::{Error, Result};

const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
/// Standard five-scale weights; the first `scales` entries are renormalized
/// to sum 1 when fewer scales fit the image.
const SCALE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
/// Contrast means are floored here before the log so a pathologically
/// anti-correlated pair cannot produce a non-finite loss.
const CS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistortionKind {
    Mse,
    OneMinusMsSsim,
}

#[derive(Debug, Clone)]
pub struct LossConfig {
    /// Rate weight. Training wants lambda > 0; zero is accepted so the
    /// distortion-only corner of the formula stays expressible.
    pub lambda: f64,
    /// Bits-to-channel-uses scale shared with the rate set.
    pub eta: f64,
    pub distortion: DistortionKind,
}

impl LossConfig {
    pub fn new(lambda: f64, eta: f64, distortion: DistortionKind) -> Result<Self> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "lambda must be finite and nonnegative, got {lambda}"
            )));
        }
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "eta must be positive and finite, got {eta}"
            )));
        }
        Ok(Self {
            lambda,
            eta,
            distortion,
        })
    }
}

/// The five differentiable ingredients of the loss, all scalars on one tape.
pub struct LossParts {
    pub d1: Var,
    pub d2: Var,
    pub r_y1: Var,
    pub r_y2: Var,
    pub r_z: Var,
}

/// Logged values of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub d1: f64,
    pub d2: f64,
    pub r_y1: f64,
    pub r_y2: f64,
    pub r_z: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// total = d1 + d2 + lambda*(eta*r_y1 + eta*r_y2 + r_z) within 1e-9.
    pub fn check_identity(&self, cfg: &LossConfig) -> Result<()> {
        let expect =
            self.d1 + self.d2 + cfg.lambda * (cfg.eta * self.r_y1 + cfg.eta * self.r_y2 + self.r_z);
        if (expect - self.total).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "loss breakdown out of balance: recorded {} vs recombined {expect}",
                self.total
            )));
        }
        Ok(())
    }
}

/// Weighted combination of the loss parts. Returns the differentiable total
/// and a plain breakdown for logging.
pub fn total_loss(
    tape: &mut Tape,
    parts: &LossParts,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    for (name, v) in [
        ("d1", parts.d1),
        ("d2", parts.d2),
        ("r_y1", parts.r_y1),
        ("r_y2", parts.r_y2),
        ("r_z", parts.r_z),
    ] {
        let t = tape.value(v);
        if t.len() != 1 || !t.data()[0].is_finite() {
            return Err(Error::NonFinite(format!("loss part {name}")));
        }
    }
    let d = tape.add(parts.d1, parts.d2)?;
    let ry = tape.add(parts.r_y1, parts.r_y2)?;
    let ry = tape.scale(ry, cfg.eta)?;
    let rate = tape.add(ry, parts.r_z)?;
    let weighted = tape.scale(rate, cfg.lambda)?;
    let total = tape.add(d, weighted)?;

    let scalar = |v: Var, tape: &Tape| tape.value(v).data()[0];
    let breakdown = LossBreakdown {
        d1: scalar(parts.d1, tape),
        d2: scalar(parts.d2, tape),
        r_y1: scalar(parts.r_y1, tape),
        r_y2: scalar(parts.r_y2, tape),
        r_z: scalar(parts.r_z, tape),
        total: scalar(total, tape),
    };
    breakdown.check_identity(cfg)?;
    Ok((total, breakdown))
}

/// Differentiable mean squared error, unclamped by design.
pub fn mse_op(tape: &mut Tape, x: Var, xhat: Var) -> Result<Var> {
    let d = tape.sub(xhat, x)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// Peak signal-to-noise ratio in dB over the clamped reconstruction.
/// Identical images return the +infinity sentinel.
pub fn psnr(x: &Tensor, xhat: &Tensor) -> Result<f64> {
    if x.shape() != xhat.shape() {
        return Err(Error::ShapeMismatch(format!(
            "psnr shapes differ: {:?} vs {:?}",
            x.shape(),
            xhat.shape()
        )));
    }
    let mse = x
        .data()
        .iter()
        .zip(xhat.data())
        .map(|(a, b)| {
            let d = a - b.clamp(0.0, 1.0);
            d * d
        })
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

fn gaussian_window() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Valid-mode 11x11 Gaussian blur; linear, so backward is the transposed
/// scatter with the same weights.
fn blur_op(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if h < WINDOW || w < WINDOW {
        return Err(Error::ShapeMismatch(format!(
            "blur needs at least {WINDOW}x{WINDOW} pixels, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h - WINDOW + 1, w - WINDOW + 1);
    let k = gaussian_window();
    let src = tape.value(x).data().to_vec();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = 0.0;
                for ky in 0..WINDOW {
                    let row = (ch * h + y + ky) * w + xx;
                    let mut acc_row = 0.0;
                    for kx in 0..WINDOW {
                        acc_row += k[kx] * src[row + kx];
                    }
                    acc += k[ky] * acc_row;
                }
                out[(ch * oh + y) * ow + xx] = acc;
            }
        }
    }
    let value = Tensor::new(&[c, oh, ow], out)?;
    let back = move |g: &Tensor| {
        let mut dx = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let go = g.data()[(ch * oh + y) * ow + xx];
                    for ky in 0..WINDOW {
                        let wk = go * k[ky];
                        let row = (ch * h + y + ky) * w + xx;
                        for kx in 0..WINDOW {
                            dx[row + kx] += wk * k[kx];
                        }
                    }
                }
            }
        }
        vec![Tensor::new(&[c, h, w], dx).expect("blur grad shape")]
    };
    tape.custom(&[x], value, back)
}

/// 2x2 average pooling with truncation of odd trailing rows or columns.
fn avg_pool2_op(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::ShapeMismatch(format!(
            "cannot pool a {h}x{w} image"
        )));
    }
    let src = tape.value(x).data().to_vec();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                let base = (ch * h + 2 * y) * w + 2 * xx;
                out[(ch * oh + y) * ow + xx] =
                    0.25 * (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]);
            }
        }
    }
    let value = Tensor::new(&[c, oh, ow], out)?;
    let back = move |g: &Tensor| {
        let mut dx = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let go = 0.25 * g.data()[(ch * oh + y) * ow + xx];
                    let base = (ch * h + 2 * y) * w + 2 * xx;
                    dx[base] += go;
                    dx[base + 1] += go;
                    dx[base + w] += go;
                    dx[base + w + 1] += go;
                }
            }
        }
        vec![Tensor::new(&[c, h, w], dx).expect("pool grad shape")]
    };
    tape.custom(&[x], value, back)
}

/// Largest scale count the pre-condition admits for an h-by-w image, capped
/// at the standard five.
pub fn max_scales(h: usize, w: usize) -> usize {
    let mut s = 0;
    while s < 5 && (WINDOW << s) <= h.min(w) {
        s += 1;
    }
    s
}

/// Differentiable multi-scale structural similarity. Inputs are taken as
/// given (the metric wrapper clamps; the loss path must not).
pub fn ms_ssim_op(tape: &mut Tape, x: Var, y: Var, scales: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || tape.shape(y) != shape {
        return Err(Error::ShapeMismatch(format!(
            "ms_ssim expects two matching c,h,w images, got {:?} and {:?}",
            shape,
            tape.shape(y)
        )));
    }
    if scales == 0 || scales > 5 {
        return Err(Error::InvalidArgument(format!(
            "scale count must be 1..=5, got {scales}"
        )));
    }
    let need = WINDOW << (scales - 1);
    if shape[1] < need || shape[2] < need {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} too small for {scales} scales (needs {need} per axis)",
            shape[1], shape[2]
        )));
    }
    let wsum: f64 = SCALE_WEIGHTS[..scales].iter().sum();

    let (mut cx, mut cy) = (x, y);
    let mut log_acc: Option<Var> = None;
    for s in 0..scales {
        let mu_x = blur_op(tape, cx)?;
        let mu_y = blur_op(tape, cy)?;
        let xx = tape.mul(cx, cx)?;
        let yy = tape.mul(cy, cy)?;
        let xy = tape.mul(cx, cy)?;
        let mu_xx = tape.mul(mu_x, mu_x)?;
        let mu_yy = tape.mul(mu_y, mu_y)?;
        let mu_xy = tape.mul(mu_x, mu_y)?;
        let bxx = blur_op(tape, xx)?;
        let byy = blur_op(tape, yy)?;
        let bxy = blur_op(tape, xy)?;
        let var_x = tape.sub(bxx, mu_xx)?;
        let var_y = tape.sub(byy, mu_yy)?;
        let cov = tape.sub(bxy, mu_xy)?;

        let cov2 = tape.scale(cov, 2.0)?;
        let num_cs = tape.add_scalar(cov2, C2)?;
        let var_sum = tape.add(var_x, var_y)?;
        let den_cs = tape.add_scalar(var_sum, C2)?;
        let cs_map = tape.div(num_cs, den_cs)?;

        let term = if s + 1 == scales {
            // Last scale carries the luminance term: mean of (l*cs).
            let mu_xy2 = tape.scale(mu_xy, 2.0)?;
            let num_l = tape.add_scalar(mu_xy2, C1)?;
            let mu_sq = tape.add(mu_xx, mu_yy)?;
            let den_l = tape.add_scalar(mu_sq, C1)?;
            let l_map = tape.div(num_l, den_l)?;
            let lcs = tape.mul(l_map, cs_map)?;
            tape.mean(lcs)?
        } else {
            tape.mean(cs_map)?
        };
        let safe = tape.clamp_min(term, CS_FLOOR)?;
        let lt = tape.ln(safe)?;
        let weighted = tape.scale(lt, SCALE_WEIGHTS[s] / wsum)?;
        log_acc = Some(match log_acc {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });

        if s + 1 < scales {
            cx = avg_pool2_op(tape, cx)?;
            cy = avg_pool2_op(tape, cy)?;
        }
    }
    tape.exp(log_acc.expect("at least one scale"))
}

/// Metric wrapper: clamps both images into [0,1] and evaluates forward-only.
pub fn ms_ssim(x: &Tensor, xhat: &Tensor, scales: usize) -> Result<f64> {
    let clamp = |t: &Tensor| {
        Tensor::new(
            t.shape(),
            t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        )
        .expect("clamp preserves shape")
    };
    let mut tape = Tape::new();
    let a = tape.input(clamp(x));
    let b = tape.input(clamp(xhat));
    let v = ms_ssim_op(&mut tape, a, b, scales)?;
    Ok(tape.value(v).data()[0])
}

/// Per-batch estimates of the four divergence brackets: distortion
/// surrogate, the two per-user symbol-rate surrogates (eta * latent bits),
/// and the joint hyper bits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlReport {
    pub distortion: f64,
    pub s1_bits: f64,
    pub s2_bits: f64,
    pub z_bits: f64,
}

/// Recombine a logged breakdown into the four-term report and verify the
/// loss identity still holds.
pub fn kl_terms(breakdown: &LossBreakdown, cfg: &LossConfig) -> Result<KlReport> {
    breakdown.check_identity(cfg)?;
    let report = KlReport {
        distortion: breakdown.d1 + breakdown.d2,
        s1_bits: cfg.eta * breakdown.r_y1,
        s2_bits: cfg.eta * breakdown.r_y2,
        z_bits: breakdown.r_z,
    };
    let recombined =
        report.distortion + cfg.lambda * (report.s1_bits + report.s2_bits + report.z_bits);
    if (recombined - breakdown.total).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "divergence terms recombine to {recombined}, logged total is {}",
            breakdown.total
        )));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, Block, ParamId, ParamSet};
    use crate::rng::keyed_rng;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn cfg(lambda: f64) -> LossConfig {
        LossConfig::new(lambda, 0.2, DistortionKind::Mse).unwrap()
    }

    fn parts(tape: &mut Tape, vals: [f64; 5]) -> LossParts {
        let mut it = vals.iter().map(|&v| tape.input(Tensor::scalar(v)));
        LossParts {
            d1: it.next().unwrap(),
            d2: it.next().unwrap(),
            r_y1: it.next().unwrap(),
            r_y2: it.next().unwrap(),
            r_z: it.next().unwrap(),
        }
    }

    #[test]
    fn loss_arithmetic_matches_the_formula() {
        let mut tape = Tape::new();
        let p = parts(&mut tape, [0.1, 0.2, 10.0, 20.0, 5.0]);
        let (_, b) = total_loss(&mut tape, &p, &cfg(0.01)).unwrap();
        assert!((b.total - 0.41).abs() < 1e-12, "total {}", b.total);

        let mut tape = Tape::new();
        let p = parts(&mut tape, [0.1, 0.2, 10.0, 20.0, 5.0]);
        let (_, b0) = total_loss(&mut tape, &p, &cfg(0.0)).unwrap();
        assert!((b0.total - 0.3).abs() < 1e-15);
    }

    #[test]
    fn loss_gradient_wrt_joint_rate_is_lambda() {
        let mut params = ParamSet::new();
        let mut tape = Tape::new();
        let p = parts(&mut tape, [0.1, 0.2, 10.0, 20.0, 5.0]);
        let rz = p.r_z;
        let (total, _) = total_loss(&mut tape, &p, &cfg(0.01)).unwrap();
        let grads = tape.backward(total, &mut params).unwrap();
        assert!((grads.wrt(rz).unwrap().data()[0] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn non_finite_parts_are_rejected() {
        let mut tape = Tape::new();
        let p = parts(&mut tape, [0.1, f64::NAN, 1.0, 1.0, 1.0]);
        assert!(total_loss(&mut tape, &p, &cfg(0.01)).is_err());
        assert!(LossConfig::new(-1.0, 0.2, DistortionKind::Mse).is_err());
        assert!(LossConfig::new(0.01, 0.0, DistortionKind::Mse).is_err());
    }

    #[test]
    fn psnr_reference_points() {
        let x = Tensor::zeros(&[1, 4, 4]);
        let xhat = Tensor::from_fn(&[1, 4, 4], |_| 0.1);
        let p = psnr(&x, &xhat).unwrap();
        assert!((p - 20.0).abs() < 1e-9, "psnr {p}");

        assert_eq!(psnr(&x, &x).unwrap(), f64::INFINITY);

        let ones = Tensor::from_fn(&[1, 4, 4], |_| 1.0);
        assert!((psnr(&x, &ones).unwrap() - 0.0).abs() < 1e-9);

        let bad = Tensor::zeros(&[1, 2, 2]);
        assert!(psnr(&x, &bad).is_err());
    }

    #[test]
    fn psnr_clamps_the_reconstruction() {
        let x = Tensor::from_fn(&[1, 2, 2], |_| 1.0);
        let over = Tensor::from_fn(&[1, 2, 2], |_| 1.7);
        assert_eq!(psnr(&x, &over).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_and_mse_are_consistent() {
        let mut rng = keyed_rng(0, &[0x9]);
        let x = Tensor::from_fn(&[1, 6, 6], |_| rng.gen_range(0.0..1.0));
        let xhat = Tensor::from_fn(&[1, 6, 6], |_| rng.gen_range(0.0..1.0));
        let mse = x
            .data()
            .iter()
            .zip(xhat.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / 36.0;
        let direct = 10.0 * (1.0 / mse).log10();
        assert!((psnr(&x, &xhat).unwrap() - direct).abs() < 1e-9);
    }

    fn random_image(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
        let mut rng = keyed_rng(seed, &[0x1339]);
        Tensor::from_fn(&[c, h, w], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn identical_images_have_unit_similarity() {
        let x = random_image(1, 1, 16, 32);
        assert_eq!(ms_ssim(&x, &x, 1).unwrap(), 1.0);
    }

    #[test]
    fn inverted_contrast_scores_low() {
        // Mid-gray-free image: every pixel sits in a dark or bright band, so
        // inversion flips structure instead of approximating it.
        let mut rng = keyed_rng(2, &[0x1339]);
        let x = Tensor::from_fn(&[1, 22, 22], |_| {
            if rng.gen_bool(0.5) {
                rng.gen_range(0.05..0.15)
            } else {
                rng.gen_range(0.85..0.95)
            }
        });
        let inv = Tensor::new(&[1, 22, 22], x.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        let v = ms_ssim(&x, &inv, 1).unwrap();
        assert!(v < 0.5, "similarity {v}");
        assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn similarity_is_symmetric_and_bounded() {
        for seed in 0..100 {
            let a = random_image(seed, 1, 16, 16);
            let b = random_image(seed + 1000, 1, 16, 16);
            let ab = ms_ssim(&a, &b, 1).unwrap();
            let ba = ms_ssim(&b, &a, 1).unwrap();
            assert_eq!(ab, ba);
            assert!((0.0..=1.0).contains(&ab), "seed {seed}: {ab}");
        }
    }

    #[test]
    fn scale_count_pre_condition() {
        let x = random_image(3, 1, 16, 32);
        assert!(ms_ssim(&x, &x, 2).is_err()); // needs 22 pixels per axis
        assert!(ms_ssim(&x, &x, 0).is_err());
        let big = random_image(4, 1, 22, 22);
        assert!(ms_ssim(&big, &big, 2).is_ok());

        assert_eq!(max_scales(16, 32), 1);
        assert_eq!(max_scales(22, 22), 2);
        assert_eq!(max_scales(176, 176), 5);
        assert_eq!(max_scales(10, 300), 0);
        assert_eq!(max_scales(1000, 1000), 5);
    }

    struct SsimBlock {
        scales: usize,
    }

    impl Block for SsimBlock {
        fn forward(&self, tape: &mut Tape, _p: &ParamSet, inputs: &[Var]) -> Result<Var> {
            ms_ssim_op(tape, inputs[0], inputs[1], self.scales)
        }
        fn param_ids(&self) -> Vec<ParamId> {
            vec![]
        }
    }

    #[test]
    fn ms_ssim_gradients_match_finite_differences() {
        let mut params = ParamSet::new();
        for (scales, h, w) in [(1, 12, 14), (2, 24, 24)] {
            let a = random_image(7, 1, h, w);
            let b = random_image(8, 1, h, w);
            let err = grad_check(&SsimBlock { scales }, &mut params, &[a, b], 1e-5).unwrap();
            assert!(err < 1e-4, "scales {scales}: err {err}");
        }
    }

    #[test]
    fn mse_op_gradients_match_finite_differences() {
        struct MseBlock;
        impl Block for MseBlock {
            fn forward(&self, tape: &mut Tape, _p: &ParamSet, inputs: &[Var]) -> Result<Var> {
                mse_op(tape, inputs[0], inputs[1])
            }
            fn param_ids(&self) -> Vec<ParamId> {
                vec![]
            }
        }
        let mut params = ParamSet::new();
        let a = random_image(9, 1, 4, 4);
        let b = random_image(10, 1, 4, 4);
        let err = grad_check(&MseBlock, &mut params, &[a, b], 1e-5).unwrap();
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn divergence_terms_recombine_exactly() {
        let mut tape = Tape::new();
        let p = parts(&mut tape, [0.03, 0.05, 120.0, 95.0, 40.0]);
        let lc = cfg(0.013);
        let (_, b) = total_loss(&mut tape, &p, &lc).unwrap();
        let report = kl_terms(&b, &lc).unwrap();
        assert!((report.distortion - 0.08).abs() < 1e-15);
        assert!((report.s1_bits - 24.0).abs() < 1e-12);
        assert!((report.s2_bits - 19.0).abs() < 1e-12);
        assert!((report.z_bits - 40.0).abs() < 1e-15);

        let mut broken = b;
        broken.total += 1e-6;
        assert!(kl_terms(&broken, &lc).is_err());
    }

    #[test]
    fn channel_residuals_are_gaussian_with_configured_variance() {
        use crate::channel::{transmit_tensor, ChannelConfig};
        let n = 2_000_000;
        let s = Tensor::zeros(&[n]);
        let cc = ChannelConfig::new(5.0, 1.0, 13).unwrap();
        let out = transmit_tensor(&s, &cc, 1, 0).unwrap();
        let var = out
            .data()
            .chunks(2)
            .map(|c| c[0] * c[0] + c[1] * c[1])
            .sum::<f64>()
            / (n / 2) as f64;
        let eps2 = crate::channel::noise_variance(&cc);
        assert!((var / eps2 - 1.0).abs() < 0.02, "var {var} vs eps2 {eps2}");
    }

    #[test]
    fn quantizer_residuals_are_uniform() {
        use crate::entropy::{noisy_quantize, QuantizeMode};
        let n = 1_000_000;
        let mut tape = Tape::new();
        let z = tape.input(Tensor::zeros(&[n]));
        let zt = noisy_quantize(&mut tape, z, QuantizeMode::Train, 99).unwrap();
        let mut r: Vec<f64> = tape.value(zt).data().to_vec();
        r.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ks: f64 = 0.0;
        for (i, v) in r.iter().enumerate() {
            let f = (v + 0.5).clamp(0.0, 1.0);
            ks = ks
                .max((f - i as f64 / n as f64).abs())
                .max(((i + 1) as f64 / n as f64 - f).abs());
        }
        assert!(ks < 0.005, "KS statistic {ks}");
    }

    #[test]
    fn loss_breakdown_identity_flags_tampering() {
        let b = LossBreakdown {
            d1: 0.1,
            d2: 0.1,
            r_y1: 1.0,
            r_y2: 1.0,
            r_z: 1.0,
            total: 99.0,
        };
        assert!(b.check_identity(&cfg(0.01)).is_err());
    }

    #[test]
    fn ssim_handles_gaussian_noise_sanely() {
        // Similarity should drop with noise amplitude but stay positive.
        let x = random_image(20, 1, 16, 16);
        let mut rng = keyed_rng(21, &[0x1339]);
        let d = Normal::new(0.0, 0.05).unwrap();
        let small = Tensor::new(
            &[1, 16, 16],
            x.data().iter().map(|v| v + d.sample(&mut rng)).collect(),
        )
        .unwrap();
        let d2 = Normal::new(0.0, 0.3).unwrap();
        let big = Tensor::new(
            &[1, 16, 16],
            x.data().iter().map(|v| v + d2.sample(&mut rng)).collect(),
        )
        .unwrap();
        let s_small = ms_ssim(&x, &small, 1).unwrap();
        let s_big = ms_ssim(&x, &big, 1).unwrap();
        assert!(s_small > s_big, "{s_small} vs {s_big}");
        assert!(s_big > 0.0);
    }
}
