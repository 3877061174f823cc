//! End-to-end optimization: the paired codec model, Adam with a cosine
//! learning-rate schedule, deterministic batching, and bit-exact checkpoints.
//!
//! Every random draw (batch order, quantizer noise, channel noise) is keyed
//! by (seed, epoch or step index), never by an advancing stream, so a resumed
//! run replays the exact byte-for-byte trajectory of an uninterrupted one.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{make_grid_op, sample_op, Localizer};
use crate::channel::{transmit, ChannelConfig};
use crate::diffcore::{
    grid_to_tokens, tokens_to_grid, Block, ParamId, ParamSet, Tape, Tensor, Var,
};
use crate::entropy::{
    joint_rate_bits_op, latent_rate_bits_op, marginal_rate_bits_op, mmse_estimate,
    mmse_estimate_rev, noisy_quantize, JointHyperPrior, MarginalPrior, QuantizeMode,
};
use crate::jscc::{
    allocation_from_scales, power_normalize, JsccDecoder, JsccEncoder, RateAllocation, RateSet,
    RateTokens,
};
use crate::objective::{mse_op, total_loss, DistortionKind, LossBreakdown, LossConfig, LossParts};
use crate::rng::keyed_rng;
use crate::sources::ImagePair;
use crate::transforms::{
    Analyzer, HyperAnalyzer, HyperSynthesizer, JointSynthesizer, TransformConfig, DOWN_FACTOR,
    HYPER_FACTOR,
};
use crate::{Error, Result};

/// "order" and "draw" as hex ASCII: stream labels for epoch shuffles and
/// per-item quantizer noise.
const TAG_ORDER: u64 = 0x6f72_6465_72;
const TAG_DRAW: u64 = 0x6472_6177;
/// "audit": batch picks for the gradient-flow audit.
const TAG_AUDIT: u64 = 0x6175_6469_74;

const CKPT_MAGIC: &[u8; 8] = b"PAIRCK01";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub snr_db: f64,
    pub lambda: f64,
    pub eta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 2,
            lr_init: 1e-4,
            lr_final: 1e-6,
            snr_db: 5.0,
            lambda: 0.01,
            eta: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::InvalidArgument(format!(
                "epochs ({}) and batch_size ({}) must be at least 1",
                self.epochs, self.batch_size
            )));
        }
        if !(self.lr_init > 0.0) || !(self.lr_final > 0.0) {
            return Err(Error::InvalidArgument(
                "learning rates must be positive".into(),
            ));
        }
        // Delegates the lambda/eta rules.
        LossConfig::new(self.lambda, self.eta, DistortionKind::Mse)?;
        Ok(())
    }

    fn loss(&self) -> Result<LossConfig> {
        LossConfig::new(self.lambda, self.eta, DistortionKind::Mse)
    }
}

/// Cosine annealing, epoch-indexed: lr_final + (lr_init-lr_final)/2 *
/// (1 + cos(t*pi/epochs)). Monotone non-increasing on [0, epochs].
pub fn lr_at(t: usize, cfg: &TrainConfig) -> Result<f64> {
    if t > cfg.epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {t} outside schedule 0..={}",
            cfg.epochs
        )));
    }
    let phase = (t as f64 * PI / cfg.epochs as f64).cos();
    Ok(cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + phase))
}

/// Adam with bias correction; gradients are consumed (zeroed) by each step.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params
            .ids()
            .map(|id| Tensor::zeros(params.value(id).shape()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::InvalidArgument(format!("bad learning rate {lr}")));
        }
        if self.m.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, set has {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let id = ParamId(i);
            let g = params.grad(id).data().to_vec();
            let theta = params.value_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..g.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                theta[k] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        params.zero_grads();
        Ok(())
    }
}

/// Ablation switch fixed at model construction. The point-to-point baseline
/// strips every cross-user path: marginal hyper priors, no partner-rate
/// estimation, no side information at the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    /// Full system: joint prior, cross-user conditioning, aligned side info.
    Joint,
    /// Per-user marginal hyper priors; conditioning and alignment stay.
    IndependentPrior,
    /// Joint prior but the side latent enters the decoder unwarped.
    NoAlignment,
    /// Two single-user codecs sharing nothing.
    PointToPoint,
}

impl RunMode {
    pub fn all() -> [RunMode; 4] {
        [
            RunMode::Joint,
            RunMode::IndependentPrior,
            RunMode::NoAlignment,
            RunMode::PointToPoint,
        ]
    }

    pub fn label(&self) -> &'static str {
        match self {
            RunMode::Joint => "joint-prior",
            RunMode::IndependentPrior => "independent-prior",
            RunMode::NoAlignment => "no-alignment",
            RunMode::PointToPoint => "point-to-point",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::all()
            .into_iter()
            .find(|m| m.label() == s)
            .ok_or_else(|| Error::Parse(format!("unknown run mode {s:?}")))
    }

    fn joint_prior(&self) -> bool {
        matches!(self, RunMode::Joint | RunMode::NoAlignment)
    }

    fn aligned(&self) -> bool {
        matches!(self, RunMode::Joint | RunMode::IndependentPrior)
    }

    fn cross_user(&self) -> bool {
        !matches!(self, RunMode::PointToPoint)
    }
}

/// Everything that fixes the model architecture for one run.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub transform: TransformConfig,
    pub rates: RateSet,
    /// Mixture components per hyper index.
    pub gmm_components: usize,
    /// Hidden width of the alignment localizer.
    pub align_hidden: usize,
    /// Average complex-symbol power budget P.
    pub power: f64,
    pub height: usize,
    pub width: usize,
}

impl ModelConfig {
    pub fn new(transform: TransformConfig, height: usize, width: usize) -> Result<Self> {
        let cfg = Self {
            transform,
            rates: RateSet::default_set(),
            gmm_components: 3,
            align_hidden: 32,
            power: 1.0,
            height,
            width,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.transform.validate()?;
        let div = DOWN_FACTOR * HYPER_FACTOR;
        if self.height == 0 || self.width == 0 || self.height % div != 0 || self.width % div != 0 {
            return Err(Error::InvalidArgument(format!(
                "image extents {}x{} must be positive multiples of {div}",
                self.height, self.width
            )));
        }
        if self.gmm_components == 0 || self.align_hidden == 0 {
            return Err(Error::InvalidArgument(
                "gmm_components and align_hidden must be positive".into(),
            ));
        }
        if !(self.power > 0.0) || !self.power.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "power must be positive and finite, got {}",
                self.power
            )));
        }
        Ok(())
    }

    /// Latent-grid extents after the analysis transform.
    pub fn latent_extents(&self) -> (usize, usize) {
        (self.height / DOWN_FACTOR, self.width / DOWN_FACTOR)
    }

    /// Tokens per image at the channel-mapping stage.
    pub fn tokens(&self) -> usize {
        let (h, w) = self.latent_extents();
        h * w
    }

    /// Flattened hyper-latent length, one joint prior index per entry.
    pub fn hyper_len(&self) -> usize {
        let (h, w) = self.latent_extents();
        self.transform.c_hyp * (h / HYPER_FACTOR) * (w / HYPER_FACTOR)
    }
}

/// Hyper entropy model of a [`PairModel`]: coupled across users or two
/// independent marginals.
enum Prior {
    Joint(JointHyperPrior),
    Independent(MarginalPrior, MarginalPrior),
}

/// The full two-user codec: separate encoders and channel mappings, one
/// shared joint hyper prior, and a joint decoder with latent alignment.
/// Ablations swap the prior, drop the localizer, or sever the cross-user
/// paths entirely.
pub struct PairModel {
    pub cfg: ModelConfig,
    mode: RunMode,
    enc1: Analyzer,
    enc2: Analyzer,
    hyp1: HyperAnalyzer,
    hyp2: HyperAnalyzer,
    hsyn1: HyperSynthesizer,
    hsyn2: HyperSynthesizer,
    prior: Prior,
    rtok1: RateTokens,
    rtok2: RateTokens,
    jenc1: JsccEncoder,
    jenc2: JsccEncoder,
    jdec1: JsccDecoder,
    jdec2: JsccDecoder,
    align: Option<Localizer>,
    syn1: JointSynthesizer,
    syn2: JointSynthesizer,
}

impl PairModel {
    pub fn new(params: &mut ParamSet, cfg: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Self::with_mode(params, cfg, RunMode::Joint, rng)
    }

    pub fn with_mode(
        params: &mut ParamSet,
        cfg: ModelConfig,
        mode: RunMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let t = &cfg.transform;
        let prior = if mode.joint_prior() {
            Prior::Joint(JointHyperPrior::new(
                params,
                "prior",
                cfg.hyper_len(),
                cfg.gmm_components,
                true,
                rng,
            )?)
        } else {
            Prior::Independent(
                MarginalPrior::new(params, "prior1", cfg.hyper_len(), cfg.gmm_components, rng)?,
                MarginalPrior::new(params, "prior2", cfg.hyper_len(), cfg.gmm_components, rng)?,
            )
        };
        let align = if mode.aligned() {
            Some(Localizer::new(
                params,
                "align",
                2 * t.c_lat,
                cfg.align_hidden,
                rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            mode,
            enc1: Analyzer::new(params, "enc1", t, rng)?,
            enc2: Analyzer::new(params, "enc2", t, rng)?,
            hyp1: HyperAnalyzer::new(params, "hyp1", t, rng)?,
            hyp2: HyperAnalyzer::new(params, "hyp2", t, rng)?,
            hsyn1: HyperSynthesizer::new(params, "hsyn1", t, rng)?,
            hsyn2: HyperSynthesizer::new(params, "hsyn2", t, rng)?,
            prior,
            rtok1: RateTokens::new(params, "rtok1", &cfg.rates, t.c_lat, rng)?,
            rtok2: RateTokens::new(params, "rtok2", &cfg.rates, t.c_lat, rng)?,
            jenc1: JsccEncoder::new(params, "jenc1", &cfg.rates, t.c_lat, rng)?,
            jenc2: JsccEncoder::new(params, "jenc2", &cfg.rates, t.c_lat, rng)?,
            jdec1: JsccDecoder::new(params, "jdec1", &cfg.rates, t.c_lat, rng)?,
            jdec2: JsccDecoder::new(params, "jdec2", &cfg.rates, t.c_lat, rng)?,
            align,
            syn1: JointSynthesizer::new(params, "syn1", t, rng)?,
            syn2: JointSynthesizer::new(params, "syn2", t, rng)?,
            cfg,
        })
    }

    pub fn mode(&self) -> RunMode {
        self.mode
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        ids.extend(self.enc1.param_ids());
        ids.extend(self.enc2.param_ids());
        ids.extend(self.hyp1.param_ids());
        ids.extend(self.hyp2.param_ids());
        ids.extend(self.hsyn1.param_ids());
        ids.extend(self.hsyn2.param_ids());
        match &self.prior {
            Prior::Joint(p) => ids.extend(p.param_ids()),
            Prior::Independent(p1, p2) => {
                ids.extend(p1.param_ids());
                ids.extend(p2.param_ids());
            }
        }
        ids.extend(self.rtok1.param_ids());
        ids.extend(self.rtok2.param_ids());
        ids.extend(self.jenc1.param_ids());
        ids.extend(self.jenc2.param_ids());
        ids.extend(self.jdec1.param_ids());
        ids.extend(self.jdec2.param_ids());
        if let Some(a) = &self.align {
            ids.extend(a.param_ids());
        }
        ids.extend(self.syn1.param_ids());
        ids.extend(self.syn2.param_ids());
        ids
    }

    /// Hyper scales for an estimated hyper-latent, evaluated off-tape: the
    /// allocation path is detached by construction.
    fn estimated_scales(
        &self,
        params: &ParamSet,
        own_is_user1: bool,
        est: &Tensor,
    ) -> Result<Tensor> {
        let (lh, lw) = self.cfg.latent_extents();
        let shape = [
            self.cfg.transform.c_hyp,
            lh / HYPER_FACTOR,
            lw / HYPER_FACTOR,
        ];
        let mut scratch = Tape::new();
        let grid = scratch.input(Tensor::new(&shape, est.data().to_vec())?);
        let hsyn = if own_is_user1 { &self.hsyn2 } else { &self.hsyn1 };
        let gc = hsyn.apply(&mut scratch, params, grid)?;
        Ok(scratch.value(gc.sigma).clone())
    }

    /// One differentiable pass over a pair: analyze, quantize the hypers,
    /// rate both latents, allocate bandwidth (own scales plus the MMSE
    /// estimate of the partner's), map to symbols, cross the channel, decode,
    /// align, and jointly synthesize both reconstructions.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        pair: &ImagePair,
        opt: &PassOptions,
    ) -> Result<PassOutput> {
        let t = &self.cfg.transform;
        let want = [t.c_img, self.cfg.height, self.cfg.width];
        if pair.x1.shape() != want {
            return Err(Error::ShapeMismatch(format!(
                "pair shape {:?}, model expects {want:?}",
                pair.x1.shape()
            )));
        }
        let chan = ChannelConfig::new(opt.snr_db, self.cfg.power, opt.seed)?;
        let (lh, lw) = self.cfg.latent_extents();
        let n_hyper = self.cfg.hyper_len();

        let mut x = Vec::new();
        let mut y_tok = Vec::new();
        let mut zt = Vec::new();
        let mut r_y = Vec::new();
        let mut sigma_plain = Vec::new();
        for (slot, (enc, hyp, hsyn)) in [
            (&self.enc1, &self.hyp1, &self.hsyn1),
            (&self.enc2, &self.hyp2, &self.hsyn2),
        ]
        .iter()
        .enumerate()
        {
            let xin = tape.input(if slot == 0 {
                pair.x1.clone()
            } else {
                pair.x2.clone()
            });
            let y = enc.apply(tape, params, xin)?;
            let z = hyp.apply(tape, params, y)?;
            let zq = noisy_quantize(
                tape,
                z,
                opt.mode,
                stream_seed(opt.seed, &[TAG_DRAW, opt.pair_id, slot as u64, 0]),
            )?;
            let gc = hsyn.apply(tape, params, zq)?;
            let yt = grid_to_tokens(tape, y)?;
            let mu_t = grid_to_tokens(tape, gc.mu)?;
            let sg_t = grid_to_tokens(tape, gc.sigma)?;
            // Rate proxy: the perturbed latent, never the transmitted one.
            let y_noisy = noisy_quantize(
                tape,
                yt,
                opt.mode,
                stream_seed(opt.seed, &[TAG_DRAW, opt.pair_id, slot as u64, 1]),
            )?;
            let bits = latent_rate_bits_op(tape, y_noisy, mu_t, sg_t)?;
            x.push(xin);
            y_tok.push(yt);
            zt.push(zq);
            r_y.push(tape.sum(bits)?);
            sigma_plain.push(tape.value(gc.sigma).clone());
        }

        let zf1 = tape.reshape(zt[0], &[n_hyper])?;
        let zf2 = tape.reshape(zt[1], &[n_hyper])?;
        let r_z = match &self.prior {
            Prior::Joint(p) => {
                let bits = joint_rate_bits_op(tape, p, params, zf1, zf2)?;
                tape.sum(bits)?
            }
            Prior::Independent(p1, p2) => {
                let b1 = marginal_rate_bits_op(tape, p1, params, zf1)?;
                let b2 = marginal_rate_bits_op(tape, p2, params, zf2)?;
                let s1 = tape.sum(b1)?;
                let s2 = tape.sum(b2)?;
                tape.add(s1, s2)?
            }
        };

        // Bandwidth: own allocation from own scales; the partner's is
        // estimated through the shared prior, so transmitter and receiver
        // derive identical conditioning from the same hyper values. Under
        // marginal priors the best estimate is the prior mean; point-to-point
        // conditions every stream on itself.
        let mut trace = PassTrace::default();
        let k1 = allocation_from_scales(&sigma_plain[0], &self.cfg.rates)?;
        let k2 = allocation_from_scales(&sigma_plain[1], &self.cfg.rates)?;
        let (alloc1, alloc2) = if !self.mode.cross_user() {
            (
                RateAllocation::new(k1.clone(), k1, &self.cfg.rates)?,
                RateAllocation::new(k2.clone(), k2, &self.cfg.rates)?,
            )
        } else {
            let (est1, est2) = match &self.prior {
                Prior::Joint(p) => {
                    let table = p.materialize(params);
                    let z1 = Tensor::new(&[n_hyper], tape.value(zf1).data().to_vec())?;
                    let z2 = Tensor::new(&[n_hyper], tape.value(zf2).data().to_vec())?;
                    trace.mmse_calls += 2;
                    (mmse_estimate_rev(&z2, &table)?, mmse_estimate(&z1, &table)?)
                }
                Prior::Independent(p1, p2) => {
                    (marginal_means(p1, params), marginal_means(p2, params))
                }
            };
            let k2_star = allocation_from_scales(
                &self.estimated_scales(params, true, &est2)?,
                &self.cfg.rates,
            )?;
            let k1_star = allocation_from_scales(
                &self.estimated_scales(params, false, &est1)?,
                &self.cfg.rates,
            )?;
            (
                RateAllocation::new(k1, k2_star, &self.cfg.rates)?,
                RateAllocation::new(k2, k1_star, &self.cfg.rates)?,
            )
        };

        let mut y_hat = Vec::new();
        for (slot, (jenc, jdec, rtok, alloc)) in [
            (&self.jenc1, &self.jdec1, &self.rtok1, &alloc1),
            (&self.jenc2, &self.jdec2, &self.rtok2, &alloc2),
        ]
        .iter()
        .enumerate()
        {
            let s = jenc.encode(tape, params, y_tok[slot], alloc, rtok)?;
            let s = power_normalize(tape, s, self.cfg.power)?;
            let s_hat = transmit(tape, s, &chan, slot as u8 + 1, opt.pair_id)?;
            let yh = jdec.decode(tape, params, s_hat, alloc, rtok)?;
            y_hat.push(tokens_to_grid(tape, yh, lh, lw)?);
        }

        let (side1, side2) = if let Some(align) = &self.align {
            let cat = tape.concat_flat(&[y_hat[0], y_hat[1]])?;
            let cat = tape.reshape(cat, &[2 * t.c_lat, lh, lw])?;
            let (o1, o2) = align.offsets(tape, params, cat)?;
            let g1 = make_grid_op(tape, o1, lh, lw)?;
            let g2 = make_grid_op(tape, o2, lh, lw)?;
            trace.align_calls += 2;
            (sample_op(tape, y_hat[1], g1)?, sample_op(tape, y_hat[0], g2)?)
        } else if self.mode.cross_user() {
            (y_hat[1], y_hat[0])
        } else {
            let zeros = Tensor::zeros(&[t.c_lat, lh, lw]);
            (tape.input(zeros.clone()), tape.input(zeros))
        };
        let xhat1 = self.syn1.apply(tape, params, y_hat[0], side1)?;
        let xhat2 = self.syn2.apply(tape, params, y_hat[1], side2)?;
        let d1 = mse_op(tape, x[0], xhat1)?;
        let d2 = mse_op(tape, x[1], xhat2)?;

        let hyper_bits = tape.value(r_z).data()[0];
        Ok(PassOutput {
            xhat1,
            xhat2,
            parts: LossParts {
                d1,
                d2,
                r_y1: r_y[0],
                r_y2: r_y[1],
                r_z,
            },
            alloc1,
            alloc2,
            hyper_bits,
            trace,
        })
    }
}

/// Per-index mixture means of a marginal prior: the conditional expectation
/// when nothing couples the users.
fn marginal_means(prior: &MarginalPrior, params: &ParamSet) -> Tensor {
    let comps = prior.materialize(params);
    Tensor::from_fn(&[prior.n_indices], |j| {
        comps[j].iter().map(|c| c.weight * c.mean).sum()
    })
}

/// Per-pass switches: quantizer relaxation, channel state, noise streams.
#[derive(Debug, Clone, Copy)]
pub struct PassOptions {
    pub mode: QuantizeMode,
    pub snr_db: f64,
    /// Base seed for the quantizer and channel draws.
    pub seed: u64,
    /// Distinguishes noise across pairs and steps; reuse repeats noise.
    pub pair_id: u64,
}

pub struct PassOutput {
    pub xhat1: Var,
    pub xhat2: Var,
    pub parts: LossParts,
    pub alloc1: RateAllocation,
    pub alloc2: RateAllocation,
    /// Joint hyper code length of this pass, in bits.
    pub hyper_bits: f64,
    pub trace: PassTrace,
}

/// Counts of the cross-user operations a pass actually invoked; the
/// ablation contract is audited against these.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PassTrace {
    pub align_calls: usize,
    pub mmse_calls: usize,
}

fn stream_seed(base: u64, words: &[u64]) -> u64 {
    keyed_rng(base, words).gen()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean: LossBreakdown,
}

/// CSV rendering of the per-epoch log; floats print in shortest round-trip
/// form.
pub fn epoch_log_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,lr,d1,d2,r_y1,r_y2,r_z,total\n");
    for l in logs {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            l.epoch, l.lr, l.mean.d1, l.mean.d2, l.mean.r_y1, l.mean.r_y2, l.mean.r_z, l.mean.total
        ));
    }
    out
}

fn batch_mean(tape: &mut Tape, items: &[Var]) -> Result<Var> {
    let cat = tape.concat_flat(items)?;
    tape.mean(cat)
}

fn run_epochs(
    model: &PairModel,
    params: &mut ParamSet,
    adam: &mut Adam,
    cfg: &TrainConfig,
    dataset: &[ImagePair],
    from_epoch: usize,
    to_epoch: usize,
    logs: &mut Vec<EpochLog>,
) -> Result<()> {
    let steps_per_epoch = dataset.len().div_ceil(cfg.batch_size);
    for epoch in from_epoch..to_epoch {
        let lr = lr_at(epoch, cfg)?;
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut keyed_rng(cfg.seed, &[TAG_ORDER, epoch as u64]));
        let mut sums = [0.0; 6];
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let breakdown = train_step(
                model,
                params,
                cfg,
                dataset,
                batch,
                (epoch * steps_per_epoch + step) as u64,
            )
            .map_err(|e| {
                Error::NonFinite(format!(
                    "training aborted at epoch {epoch}, step {step}: {e}"
                ))
            })?;
            adam.step(params, lr)?;
            for (s, v) in sums.iter_mut().zip([
                breakdown.d1,
                breakdown.d2,
                breakdown.r_y1,
                breakdown.r_y2,
                breakdown.r_z,
                breakdown.total,
            ]) {
                *s += v;
            }
        }
        let n = steps_per_epoch as f64;
        logs.push(EpochLog {
            epoch,
            lr,
            mean: LossBreakdown {
                d1: sums[0] / n,
                d2: sums[1] / n,
                r_y1: sums[2] / n,
                r_y2: sums[3] / n,
                r_z: sums[4] / n,
                total: sums[5] / n,
            },
        });
    }
    Ok(())
}

/// Forward + backward over one batch; gradients are left accumulated for the
/// optimizer.
fn train_step(
    model: &PairModel,
    params: &mut ParamSet,
    cfg: &TrainConfig,
    dataset: &[ImagePair],
    batch: &[usize],
    global_step: u64,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let mut d1 = Vec::new();
    let mut d2 = Vec::new();
    let mut ry1 = Vec::new();
    let mut ry2 = Vec::new();
    let mut rz = Vec::new();
    for (slot, &idx) in batch.iter().enumerate() {
        let opt = PassOptions {
            mode: QuantizeMode::Train,
            snr_db: cfg.snr_db,
            seed: cfg.seed,
            pair_id: global_step * cfg.batch_size as u64 + slot as u64,
        };
        let out = model.forward(&mut tape, params, &dataset[idx], &opt)?;
        d1.push(out.parts.d1);
        d2.push(out.parts.d2);
        ry1.push(out.parts.r_y1);
        ry2.push(out.parts.r_y2);
        rz.push(out.parts.r_z);
    }
    let parts = LossParts {
        d1: batch_mean(&mut tape, &d1)?,
        d2: batch_mean(&mut tape, &d2)?,
        r_y1: batch_mean(&mut tape, &ry1)?,
        r_y2: batch_mean(&mut tape, &ry2)?,
        r_z: batch_mean(&mut tape, &rz)?,
    };
    let (total, breakdown) = total_loss(&mut tape, &parts, &cfg.loss()?)?;
    tape.backward(total, params)?;
    Ok(breakdown)
}

/// Full run from scratch. The parameter set must hold exactly the model's
/// parameters.
pub fn train(
    model: &PairModel,
    params: &mut ParamSet,
    cfg: &TrainConfig,
    dataset: &[ImagePair],
) -> Result<(Checkpoint, Vec<EpochLog>)> {
    train_until(model, params, cfg, dataset, cfg.epochs)
}

/// Run from scratch but stop after `stop_epoch` epochs; the checkpoint can
/// be resumed to finish the schedule.
pub fn train_until(
    model: &PairModel,
    params: &mut ParamSet,
    cfg: &TrainConfig,
    dataset: &[ImagePair],
    stop_epoch: usize,
) -> Result<(Checkpoint, Vec<EpochLog>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty training dataset".into()));
    }
    if stop_epoch > cfg.epochs {
        return Err(Error::InvalidArgument(format!(
            "stop epoch {stop_epoch} beyond schedule {}",
            cfg.epochs
        )));
    }
    let mut adam = Adam::new(params);
    let mut logs = Vec::new();
    run_epochs(model, params, &mut adam, cfg, dataset, 0, stop_epoch, &mut logs)?;
    Ok((
        Checkpoint::capture(params, &adam, stop_epoch, cfg),
        logs,
    ))
}

/// Continue an interrupted run to the end of its schedule. Bit-exact: the
/// result matches an uninterrupted run of the same config.
pub fn resume(
    model: &PairModel,
    params: &mut ParamSet,
    ckpt: &Checkpoint,
    dataset: &[ImagePair],
) -> Result<(Checkpoint, Vec<EpochLog>)> {
    let cfg = ckpt.config.clone();
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty training dataset".into()));
    }
    let mut adam = Adam::new(params);
    ckpt.restore(params, &mut adam)?;
    let mut logs = Vec::new();
    run_epochs(
        model,
        params,
        &mut adam,
        &cfg,
        dataset,
        ckpt.epoch,
        cfg.epochs,
        &mut logs,
    )?;
    Ok((
        Checkpoint::capture(params, &adam, cfg.epochs, &cfg),
        logs,
    ))
}

/// Runs `batches` seeded batches, backward each, and reports parameters that
/// never received a nonzero gradient. Callers filter intentionally detached
/// names (the per-rate projections only fire for allocated rates, and the
/// localizer tail is gated by its zero-initialized final layer until the
/// first update).
pub fn gradient_flow_audit(
    model: &PairModel,
    params: &mut ParamSet,
    cfg: &TrainConfig,
    dataset: &[ImagePair],
    batches: usize,
) -> Result<Vec<String>> {
    if dataset.is_empty() || batches == 0 {
        return Err(Error::InvalidArgument(
            "audit needs a dataset and at least one batch".into(),
        ));
    }
    params.zero_grads();
    let mut fired = vec![false; params.len()];
    for b in 0..batches {
        let mut rng = keyed_rng(cfg.seed, &[TAG_AUDIT, b as u64]);
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.gen_range(0..dataset.len()))
            .collect();
        // Offset the noise streams away from training's step ids.
        train_step(model, params, cfg, dataset, &batch, (1 << 40) + b as u64)?;
        for (i, f) in fired.iter_mut().enumerate() {
            if params.grad(ParamId(i)).data().iter().any(|&g| g != 0.0) {
                *f = true;
            }
        }
        params.zero_grads();
    }
    Ok(fired
        .iter()
        .enumerate()
        .filter(|(_, &f)| !f)
        .map(|(i, _)| params.name(ParamId(i)).to_string())
        .collect())
}

/// True for per-rate projection parameters (names with a `w<digits>`
/// segment): the audit allowlist, since only allocated rates fire.
pub fn is_rate_projection(name: &str) -> bool {
    name.split('.').any(|seg| {
        seg.len() > 1 && seg.starts_with('w') && seg[1..].chars().all(|c| c.is_ascii_digit())
    })
}

/// Complete optimizer + model state. Byte layout (all little-endian):
/// magic, version, epoch, adam step count, the config echo, then each
/// parameter sorted by name with shape, values, and both Adam moments.
#[derive(Debug)]
pub struct Checkpoint {
    pub epoch: usize,
    pub adam_t: u64,
    pub config: TrainConfig,
    entries: Vec<CkptEntry>,
}

#[derive(Debug)]
struct CkptEntry {
    name: String,
    shape: Vec<usize>,
    value: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Checkpoint {
    pub fn capture(params: &ParamSet, adam: &Adam, epoch: usize, cfg: &TrainConfig) -> Self {
        let entries = params
            .sorted_names()
            .into_iter()
            .map(|name| {
                let id = params.lookup(&name).expect("listed name");
                CkptEntry {
                    shape: params.value(id).shape().to_vec(),
                    value: params.value(id).data().to_vec(),
                    m: adam.m[id.0].data().to_vec(),
                    v: adam.v[id.0].data().to_vec(),
                    name,
                }
            })
            .collect();
        Self {
            epoch,
            adam_t: adam.t,
            config: cfg.clone(),
            entries,
        }
    }

    /// Write the state back into a freshly built model and optimizer. The
    /// parameter sets must agree exactly on names and shapes.
    pub fn restore(&self, params: &mut ParamSet, adam: &mut Adam) -> Result<()> {
        if self.entries.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint has {} parameters, model has {}",
                self.entries.len(),
                params.len()
            )));
        }
        for e in &self.entries {
            let id = params.lookup(&e.name).ok_or_else(|| {
                Error::InvalidArgument(format!("checkpoint parameter {} not in model", e.name))
            })?;
            if params.value(id).shape() != e.shape.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "checkpoint {} has shape {:?}, model expects {:?}",
                    e.name,
                    e.shape,
                    params.value(id).shape()
                )));
            }
            params.value_mut(id).data_mut().copy_from_slice(&e.value);
            adam.m[id.0].data_mut().copy_from_slice(&e.m);
            adam.v[id.0].data_mut().copy_from_slice(&e.v);
        }
        adam.t = self.adam_t;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&self.adam_t.to_le_bytes());
        let c = &self.config;
        out.extend_from_slice(&(c.epochs as u64).to_le_bytes());
        out.extend_from_slice(&(c.batch_size as u64).to_le_bytes());
        out.extend_from_slice(&c.seed.to_le_bytes());
        for f in [c.lr_init, c.lr_final, c.snr_db, c.lambda, c.eta] {
            out.extend_from_slice(&f.to_le_bytes());
        }
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u64).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u64).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for arr in [&e.value, &e.m, &e.v] {
                for &x in arr.iter() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != CKPT_MAGIC {
            return Err(Error::Parse("checkpoint: bad magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(Error::Parse(format!(
                "checkpoint: version {version}, expected {CKPT_VERSION}"
            )));
        }
        let epoch = r.u64()? as usize;
        let adam_t = r.u64()?;
        let config = TrainConfig {
            epochs: r.u64()? as usize,
            batch_size: r.u64()? as usize,
            seed: r.u64()?,
            lr_init: r.f64()?,
            lr_final: r.f64()?,
            snr_db: r.f64()?,
            lambda: r.f64()?,
            eta: r.f64()?,
        };
        let n = r.u64()? as usize;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = r.u64()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Parse("checkpoint: name is not UTF-8".into()))?;
            let ndim = r.u64()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let len: usize = shape.iter().product();
            let mut arrays = [Vec::new(), Vec::new(), Vec::new()];
            for arr in &mut arrays {
                arr.reserve(len);
                for _ in 0..len {
                    arr.push(r.f64()?);
                }
            }
            let [value, m, v] = arrays;
            entries.push(CkptEntry {
                name,
                shape,
                value,
                m,
                v,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse(format!(
                "checkpoint: {} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            epoch,
            adam_t,
            config,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse("checkpoint: truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
