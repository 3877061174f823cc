//! The four nonlinear transforms: per-user analysis, hyper-analysis,
//! hyper-synthesis, and the joint synthesis that consumes side information.
//!
//! Every stage is resample + pointwise linear + rectifier. Two down-stages
//! give a total image-to-latent factor of 4; the hyper path adds one more
//! factor of 2. Latents are c,h,w grids whose token view (h*w rows of c) is
//! what the linear layers act on.

use rand_chacha::ChaCha8Rng;

use crate::diffcore::{
    grid_to_tokens, tokens_to_grid, Block, Linear, Nonlinearity, ParamId, ParamSet, Tape, Var,
};
use crate::{Error, Result};

/// Image to latent downsample factor (two stages of 2).
pub const DOWN_FACTOR: usize = 4;
/// Latent to hyper downsample factor (one stage).
pub const HYPER_FACTOR: usize = 2;
/// Additive floor under every conditional scale.
pub const SIGMA_MIN: f64 = 1e-6;

/// Channel widths of the transform ladder.
#[derive(Debug, Clone)]
pub struct TransformConfig {
    pub c_img: usize,
    pub c_mid: usize,
    pub c_lat: usize,
    pub c_hyp: usize,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            c_img: 1,
            c_mid: 32,
            c_lat: 16,
            c_hyp: 8,
        }
    }
}

impl TransformConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.c_img, self.c_mid, self.c_lat, self.c_hyp]
            .iter()
            .any(|&c| c == 0)
        {
            return Err(Error::InvalidArgument("channel widths must be positive".into()));
        }
        // Keeps the hyper stream at most a quarter of the latent stream:
        // spatial extents already shrink by 4, so c_hyp <= c_lat suffices.
        if self.c_hyp > self.c_lat {
            return Err(Error::InvalidArgument(format!(
                "hyper width {} must not exceed latent width {}",
                self.c_hyp, self.c_lat
            )));
        }
        Ok(())
    }
}

struct DownStage {
    lin: Linear,
    act: Nonlinearity,
}

impl DownStage {
    fn new(
        params: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            lin: Linear::new(params, name, 4 * c_in, c_out, rng)?,
            act: Nonlinearity::default(),
        })
    }

    fn apply(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let d = tape.space_to_depth(x, 2)?;
        let shape = tape.shape(d).to_vec();
        let t = grid_to_tokens(tape, d)?;
        let t = self.lin.apply(tape, params, t)?;
        let t = self.act.apply(tape, t)?;
        tokens_to_grid(tape, t, shape[1], shape[2])
    }

    fn ids(&self) -> Vec<ParamId> {
        self.lin.param_ids()
    }
}

struct UpStage {
    lin: Linear,
    act: Nonlinearity,
}

impl UpStage {
    fn new(
        params: &mut ParamSet,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            lin: Linear::new(params, name, c_in, 4 * c_out, rng)?,
            act: Nonlinearity::default(),
        })
    }

    fn apply(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let t = grid_to_tokens(tape, x)?;
        let t = self.lin.apply(tape, params, t)?;
        let t = self.act.apply(tape, t)?;
        let g = tokens_to_grid(tape, t, shape[1], shape[2])?;
        tape.depth_to_space(g, 2)
    }

    fn ids(&self) -> Vec<ParamId> {
        self.lin.param_ids()
    }
}

/// Per-user analysis transform: image c_img,H,W to latent c_lat,H/4,W/4.
pub struct Analyzer {
    s1: DownStage,
    s2: DownStage,
}

impl Analyzer {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        cfg: &TransformConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            s1: DownStage::new(params, &format!("{name}.s1"), cfg.c_img, cfg.c_mid, rng)?,
            s2: DownStage::new(params, &format!("{name}.s2"), cfg.c_mid, cfg.c_lat, rng)?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let y = self.s1.apply(tape, params, x)?;
        self.s2.apply(tape, params, y)
    }
}

impl Block for Analyzer {
    fn forward(&self, tape: &mut Tape, params: &ParamSet, inputs: &[Var]) -> Result<Var> {
        self.apply(tape, params, single(inputs)?)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.s1.ids();
        ids.extend(self.s2.ids());
        ids
    }
}

/// Latent to hyper latent: c_lat,h,w to c_hyp,h/2,w/2.
pub struct HyperAnalyzer {
    s: DownStage,
}

impl HyperAnalyzer {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        cfg: &TransformConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            s: DownStage::new(params, name, cfg.c_lat, cfg.c_hyp, rng)?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, params: &ParamSet, y: Var) -> Result<Var> {
        self.s.apply(tape, params, y)
    }
}

impl Block for HyperAnalyzer {
    fn forward(&self, tape: &mut Tape, params: &ParamSet, inputs: &[Var]) -> Result<Var> {
        self.apply(tape, params, single(inputs)?)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        self.s.ids()
    }
}

/// Mean and scale of the conditional density over latent values. The scale
/// is sigma = SIGMA_MIN + softplus(raw), strictly positive by construction.
pub struct GaussianConditional {
    pub mu: Var,
    pub sigma: Var,
}

/// Hyper latent back to per-element (mu, sigma) at latent resolution.
pub struct HyperSynthesizer {
    up: UpStage,
    head: Linear,
    c_lat: usize,
}

impl HyperSynthesizer {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        cfg: &TransformConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            up: UpStage::new(params, &format!("{name}.up"), cfg.c_hyp, cfg.c_mid, rng)?,
            head: Linear::new(
                params,
                &format!("{name}.head"),
                cfg.c_mid,
                2 * cfg.c_lat,
                rng,
            )?,
            c_lat: cfg.c_lat,
        })
    }

    /// Accepts the noisy hyper latent during training and the rounded one at
    /// evaluation; the map itself does not care which.
    pub fn apply(&self, tape: &mut Tape, params: &ParamSet, z: Var) -> Result<GaussianConditional> {
        let g = self.up.apply(tape, params, z)?;
        let shape = tape.shape(g).to_vec();
        let (h, w) = (shape[1], shape[2]);
        let t = grid_to_tokens(tape, g)?;
        let t = self.head.apply(tape, params, t)?;
        let g = tokens_to_grid(tape, t, h, w)?;
        let plane = self.c_lat * h * w;
        let mu_flat = tape.slice_flat(g, 0, plane)?;
        let raw_flat = tape.slice_flat(g, plane, plane)?;
        let mu = tape.reshape(mu_flat, &[self.c_lat, h, w])?;
        let raw = tape.reshape(raw_flat, &[self.c_lat, h, w])?;
        let sp = tape.softplus(raw)?;
        let sigma = tape.add_scalar(sp, SIGMA_MIN)?;
        Ok(GaussianConditional { mu, sigma })
    }
}

impl Block for HyperSynthesizer {
    fn forward(&self, tape: &mut Tape, params: &ParamSet, inputs: &[Var]) -> Result<Var> {
        let cond = self.apply(tape, params, single(inputs)?)?;
        tape.concat_flat(&[cond.mu, cond.sigma])
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.up.ids();
        ids.extend(self.head.param_ids());
        ids
    }
}

/// Joint synthesis: the user's own decoded latent channel-concatenated with
/// the aligned side latent, mapped back to image resolution. The output is
/// left unclamped so loss gradients are never zeroed by clipping; metrics
/// clamp on their own.
pub struct JointSynthesizer {
    s1: UpStage,
    s2: UpStage,
}

impl JointSynthesizer {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        cfg: &TransformConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            s1: UpStage::new(params, &format!("{name}.s1"), 2 * cfg.c_lat, cfg.c_mid, rng)?,
            s2: UpStage::new(params, &format!("{name}.s2"), cfg.c_mid, cfg.c_img, rng)?,
        })
    }

    /// `side` may be all zeros (the no-side-information ablation).
    pub fn apply(&self, tape: &mut Tape, params: &ParamSet, own: Var, side: Var) -> Result<Var> {
        let os = tape.shape(own).to_vec();
        if os != tape.shape(side) {
            return Err(Error::ShapeMismatch(format!(
                "own latent {:?} and side latent {:?} must match",
                os,
                tape.shape(side)
            )));
        }
        let flat = tape.concat_flat(&[own, side])?;
        let cat = tape.reshape(flat, &[2 * os[0], os[1], os[2]])?;
        let x = self.s1.apply(tape, params, cat)?;
        self.s2.apply(tape, params, x)
    }
}

impl Block for JointSynthesizer {
    fn forward(&self, tape: &mut Tape, params: &ParamSet, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != 2 {
            return Err(Error::InvalidArgument(
                "joint synthesis takes own and side latents".into(),
            ));
        }
        self.apply(tape, params, inputs[0], inputs[1])
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.s1.ids();
        ids.extend(self.s2.ids());
        ids
    }
}

fn single(inputs: &[Var]) -> Result<Var> {
    if inputs.len() == 1 {
        Ok(inputs[0])
    } else {
        Err(Error::InvalidArgument(format!(
            "expected one input, got {}",
            inputs.len()
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, Tensor};
    use crate::rng::keyed_rng;
    use rand_distr::{Distribution, Normal};

    fn cfg() -> TransformConfig {
        TransformConfig::default()
    }

    fn noise(seed: u64, shape: &[usize], std: f64) -> Tensor {
        let mut rng = keyed_rng(seed, &[0x7f]);
        let d = Normal::new(0.0, std).unwrap();
        Tensor::from_fn(shape, |_| d.sample(&mut rng))
    }

    fn run1<B: Block>(b: &B, params: &ParamSet, x: Tensor) -> Tensor {
        let mut tape = Tape::new();
        let v = tape.input(x);
        let out = b.forward(&mut tape, params, &[v]).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn analyzer_shape_contract() {
        let mut params = ParamSet::new();
        let mut rng = keyed_rng(0, &[1]);
        let a = Analyzer::new(&mut params, "ga", &cfg(), &mut rng).unwrap();
        let y = run1(&a, &params, noise(0, &[1, 16, 32], 1.0));
        assert_eq!(y.shape(), &[16, 4, 8]);
        assert_eq!(y.len() / 16, 32); // token count l
    }

    #[test]
    fn analyzer_is_deterministic() {
        let mut params = ParamSet::new();
        let mut rng = keyed_rng(1, &[1]);
        let a = Analyzer::new(&mut params, "ga", &cfg(), &mut rng).unwrap();
        let x = noise(3, &[1, 8, 8], 1.0);
        let y1 = run1(&a, &params, x.clone());
        let y2 = run1(&a, &params, x);
        assert_eq!(y1.data(), y2.data());
    }

    #[test]
    fn hyper_analyzer_shape_contract() {
        let mut params = ParamSet::new();
        let mut rng = keyed_rng(2, &[1]);
        let h = HyperAnalyzer::new(&mut params, "ha", &cfg(), &mut rng).unwrap();
        let z = run1(&h, &params, noise(1, &[16, 4, 8], 1.0));
        assert_eq!(z.shape(), &[8, 2, 4]);
        // N_z = 64 stays at most a quarter of N_y = 512.
        assert!(z.len() * 4 <= 16 * 4 * 8 * 4);
    }

    #[test]
    fn oversized_hyper_width_is_rejected() {
        let bad = TransformConfig {
            c_hyp: 32,
            ..cfg()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn hyper_synthesizer_shapes_and_sigma_floor() {
        let mut params = ParamSet::new();
        let mut rng = keyed_rng(3, &[1]);
        let hs = HyperSynthesizer::new(&mut params, "hs", &cfg(), &mut rng).unwrap();
        for seed in 0..4 {
            let mut tape = Tape::new();
            let z = tape.input(noise(seed, &[8, 2, 4], 3.0));
            let cond = hs.apply(&mut tape, &params, z).unwrap();
            assert_eq!(tape.shape(cond.mu), &[16, 4, 8]);
            assert_eq!(tape.shape(cond.sigma), &[16, 4, 8]);
            for s in tape.value(cond.sigma).data() {
                assert!(*s >= SIGMA_MIN);
            }
        }
    }

    #[test]
    fn joint_synthesizer_shape_and_zero_side() {
        let mut params = ParamSet::new();
        let mut rng = keyed_rng(4, &[1]);
        let js = JointSynthesizer::new(&mut params, "gs", &cfg(), &mut rng).unwrap();
        let mut tape = Tape::new();
        let own = tape.input(noise(0, &[16, 4, 8], 1.0));
        let side = tape.input(Tensor::zeros(&[16, 4, 8]));
        let img = js.apply(&mut tape, &params, own, side).unwrap();
        assert_eq!(tape.shape(img), &[1, 16, 32]);

        let bad = tape.input(Tensor::zeros(&[16, 4, 4]));
        assert!(js.apply(&mut tape, &params, own, bad).is_err());
    }

    #[test]
    fn analyzer_gradients_match_finite_differences() {
        let mut params = ParamSet::new();
        let mut rng = keyed_rng(5, &[1]);
        let a = Analyzer::new(&mut params, "ga", &cfg(), &mut rng).unwrap();
        for seed in 0..2 {
            let err = grad_check(&a, &mut params, &[noise(seed, &[1, 8, 8], 1.0)], 1e-5).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn hyper_path_gradients_match_finite_differences() {
        let mut params = ParamSet::new();
        let mut rng = keyed_rng(6, &[1]);
        let small = TransformConfig {
            c_mid: 8,
            c_lat: 8,
            c_hyp: 4,
            ..cfg()
        };
        let ha = HyperAnalyzer::new(&mut params, "ha", &small, &mut rng).unwrap();
        let hs = HyperSynthesizer::new(&mut params, "hs", &small, &mut rng).unwrap();
        let e1 = grad_check(&ha, &mut params, &[noise(0, &[8, 4, 4], 1.0)], 1e-5).unwrap();
        assert!(e1 < 1e-4, "hyper-analyze err {e1}");
        let e2 = grad_check(&hs, &mut params, &[noise(1, &[4, 2, 2], 1.0)], 1e-5).unwrap();
        assert!(e2 < 1e-4, "hyper-synthesize err {e2}");
    }

    #[test]
    fn joint_synthesizer_gradients_match_finite_differences() {
        let mut params = ParamSet::new();
        let mut rng = keyed_rng(7, &[1]);
        let small = TransformConfig {
            c_mid: 8,
            c_lat: 4,
            c_hyp: 4,
            ..cfg()
        };
        let js = JointSynthesizer::new(&mut params, "gs", &small, &mut rng).unwrap();
        let inputs = vec![noise(0, &[4, 2, 2], 1.0), noise(1, &[4, 2, 2], 1.0)];
        let err = grad_check(&js, &mut params, &inputs, 1e-5).unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    struct EndToEnd {
        a: Analyzer,
        js: JointSynthesizer,
    }

    impl Block for EndToEnd {
        fn forward(&self, tape: &mut Tape, params: &ParamSet, inputs: &[Var]) -> Result<Var> {
            let y = self.a.apply(tape, params, inputs[0])?;
            self.js.apply(tape, params, y, y)
        }
        fn param_ids(&self) -> Vec<ParamId> {
            let mut ids = self.a.param_ids();
            ids.extend(self.js.param_ids());
            ids
        }
    }

    #[test]
    fn analysis_to_synthesis_is_differentiable_end_to_end() {
        let mut params = ParamSet::new();
        let mut rng = keyed_rng(8, &[1]);
        let small = TransformConfig {
            c_mid: 8,
            c_lat: 8,
            c_hyp: 4,
            ..cfg()
        };
        let block = EndToEnd {
            a: Analyzer::new(&mut params, "ga", &small, &mut rng).unwrap(),
            js: JointSynthesizer::new(&mut params, "gs", &small, &mut rng).unwrap(),
        };
        let err = grad_check(&block, &mut params, &[noise(2, &[1, 8, 8], 1.0)], 1e-5).unwrap();
        assert!(err < 1e-3, "composite err {err}");
    }
}
