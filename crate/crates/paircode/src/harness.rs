//! Run configuration, rate accounting, evaluation, rate-distortion sweeps
//! with ablation modes, and the oracle suite behind `oracle-check`.
//!
//! The oracle suite re-derives the numbers the fast implementations must
//! reproduce (quadratures, Monte Carlo moments, brute-force scans, finite
//! differences) and reports observed error against a bound per row. Every
//! oracle is a plain function over an explicit budget so the release gate
//! and the quick self-test share one code path.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::alignment::{make_grid_op, sample_op, Localizer};
use crate::channel::{noise_variance, transmit_tensor, ChannelConfig};
use crate::diffcore::{grad_check_seeded, normal_inputs, Block, ParamId, ParamSet, Tape, Tensor, Var};
use crate::entropy::{
    bin_prob, independent_rate_bits, joint_rate_bits, joint_rate_bits_op, latent_rate_bits_op,
    mixture_bin_prob, mmse_estimate_scalar, noisy_quantize, normal_pdf, quad, Component,
    JointHyperPrior, PriorTable, QuantizeMode,
};
use crate::jscc::{
    allocate, power_normalize, power_normalize_tensor, JsccDecoder, JsccEncoder, RateAllocation,
    RateSet, RateTokens,
};
use crate::objective::{max_scales, ms_ssim, ms_ssim_op, mse_op, psnr};
use crate::rng::keyed_rng;
use crate::sources::{dataset, gen_correlated_pair, write_pair, ImagePair, SourceConfig};
use crate::training::{
    train, Adam, Checkpoint, ModelConfig, PairModel, PassOptions, RunMode, TrainConfig,
};
use crate::transforms::{
    Analyzer, HyperAnalyzer, HyperSynthesizer, JointSynthesizer, TransformConfig,
};
use crate::{Error, Result};

/// "model": parameter-initialization stream.
const TAG_MODEL: u64 = 0x6d6f_6465_6c;
/// "orac": oracle-suite sampling streams.
const TAG_ORACLE: u64 = 0x6f72_6163;

// ---- rate accounting ----

/// Capacity of the complex AWGN channel in bits per channel use. The
/// `-inf` sentinel (no signal) maps to zero.
pub fn awgn_capacity(snr_db: f64) -> f64 {
    if snr_db == f64::NEG_INFINITY {
        return 0.0;
    }
    (1.0 + 10f64.powf(snr_db / 10.0)).log2()
}

/// Channel uses per pixel for one user: the learned symbols plus the hyper
/// bits priced at capacity, r = (n + hyper_bits / (2 capacity)) / (C H W).
pub fn rate_per_pixel(
    n: f64,
    hyper_bits: f64,
    capacity: f64,
    c: usize,
    h: usize,
    w: usize,
) -> Result<f64> {
    if !(n >= 0.0) || !(hyper_bits >= 0.0) || !(capacity > 0.0) || !capacity.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "rate accounting wants n >= 0, hyper_bits >= 0, finite capacity > 0; \
             got n={n}, hyper_bits={hyper_bits}, capacity={capacity}"
        )));
    }
    let pixels = (c * h * w) as f64;
    if pixels == 0.0 {
        return Err(Error::InvalidArgument("empty image in rate accounting".into()));
    }
    Ok((n + hyper_bits / (2.0 * capacity)) / pixels)
}

/// How joint hyper bits are apportioned in per-user rates.
pub const SPLIT_NOTE: &str =
    "joint hyper bits charged in full to each user (conservative double count)";

/// Bandwidth cost of one user on one evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    /// Mean complex channel uses for the learned symbols.
    pub n: f64,
    /// Mean total hyper code length, bits.
    pub hyper_bits: f64,
    /// Bits per channel use the hyper side stream is priced at.
    pub capacity: f64,
    /// Channel uses per pixel.
    pub r: f64,
    pub split: &'static str,
}

impl RateReport {
    pub fn new(n: f64, hyper_bits: f64, capacity: f64, c: usize, h: usize, w: usize) -> Result<Self> {
        Ok(Self {
            n,
            hyper_bits,
            capacity,
            r: rate_per_pixel(n, hyper_bits, capacity, c, h, w)?,
            split: SPLIT_NOTE,
        })
    }
}

// ---- run configuration ----

/// One flat configuration for every tool. Text form is UTF-8 `key = value`
/// lines with `#` comments; keys are `section.name` and unknown keys are
/// rejected. [`RunConfig::KEYS`] is the complete key list.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // source
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub shared_gain: f64,
    pub detail_gain: f64,
    pub max_shift: f64,
    pub max_rotation: f64,
    pub smoothness: usize,
    pub data_seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    // model
    pub c_mid: usize,
    pub c_lat: usize,
    pub c_hyp: usize,
    pub gmm_components: usize,
    pub align_hidden: usize,
    pub power: f64,
    // rates
    pub rate_values: Vec<usize>,
    pub eta: f64,
    // channel
    pub snr_db: f64,
    // training
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub lambda: f64,
    pub seed: u64,
    // sweep
    pub sweep_lambdas: Vec<f64>,
    pub sweep_seeds: Vec<u64>,
    pub sweep_epochs: usize,
    pub train_inline: bool,
    pub checkpoint_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            c: 1,
            h: 16,
            w: 16,
            shared_gain: 0.6,
            detail_gain: 0.15,
            max_shift: 1.5,
            max_rotation: 0.03,
            smoothness: 2,
            data_seed: 11,
            n_train: 4,
            n_test: 2,
            c_mid: 8,
            c_lat: 6,
            c_hyp: 3,
            gmm_components: 3,
            align_hidden: 32,
            power: 1.0,
            rate_values: vec![2, 4, 8, 12, 16, 24, 32],
            eta: 0.2,
            snr_db: 5.0,
            epochs: 200,
            batch_size: 2,
            lr_init: 1e-4,
            lr_final: 1e-6,
            lambda: 0.01,
            seed: 0,
            sweep_lambdas: vec![0.005, 0.01, 0.02],
            sweep_seeds: vec![0, 1, 2],
            sweep_epochs: 50,
            train_inline: false,
            checkpoint_dir: PathBuf::from("checkpoints"),
        }
    }
}

impl RunConfig {
    /// Every accepted key, grouped by section.
    pub const KEYS: &'static [&'static str] = &[
        "source.c",
        "source.h",
        "source.w",
        "source.shared_gain",
        "source.detail_gain",
        "source.max_shift",
        "source.max_rotation",
        "source.smoothness",
        "source.seed",
        "source.n_train",
        "source.n_test",
        "model.c_mid",
        "model.c_lat",
        "model.c_hyp",
        "model.gmm_components",
        "model.align_hidden",
        "model.power",
        "rates.values",
        "rates.eta",
        "channel.snr_db",
        "training.epochs",
        "training.batch_size",
        "training.lr_init",
        "training.lr_final",
        "training.lambda",
        "training.seed",
        "sweep.lambdas",
        "sweep.seeds",
        "sweep.epochs",
        "sweep.train_inline",
        "sweep.checkpoint_dir",
    ];

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("config line {}: expected key = value", ln + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Applies one `section.name = value` assignment. Later assignments win.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "source.c" => self.c = p_usize(key, value)?,
            "source.h" => self.h = p_usize(key, value)?,
            "source.w" => self.w = p_usize(key, value)?,
            "source.shared_gain" => self.shared_gain = p_f64(key, value)?,
            "source.detail_gain" => self.detail_gain = p_f64(key, value)?,
            "source.max_shift" => self.max_shift = p_f64(key, value)?,
            "source.max_rotation" => self.max_rotation = p_f64(key, value)?,
            "source.smoothness" => self.smoothness = p_usize(key, value)?,
            "source.seed" => self.data_seed = p_u64(key, value)?,
            "source.n_train" => self.n_train = p_usize(key, value)?,
            "source.n_test" => self.n_test = p_usize(key, value)?,
            "model.c_mid" => self.c_mid = p_usize(key, value)?,
            "model.c_lat" => self.c_lat = p_usize(key, value)?,
            "model.c_hyp" => self.c_hyp = p_usize(key, value)?,
            "model.gmm_components" => self.gmm_components = p_usize(key, value)?,
            "model.align_hidden" => self.align_hidden = p_usize(key, value)?,
            "model.power" => self.power = p_f64(key, value)?,
            "rates.values" => self.rate_values = p_list_usize(key, value)?,
            "rates.eta" => self.eta = p_f64(key, value)?,
            "channel.snr_db" => self.snr_db = p_f64(key, value)?,
            "training.epochs" => self.epochs = p_usize(key, value)?,
            "training.batch_size" => self.batch_size = p_usize(key, value)?,
            "training.lr_init" => self.lr_init = p_f64(key, value)?,
            "training.lr_final" => self.lr_final = p_f64(key, value)?,
            "training.lambda" => self.lambda = p_f64(key, value)?,
            "training.seed" => self.seed = p_u64(key, value)?,
            "sweep.lambdas" => self.sweep_lambdas = p_list_f64(key, value)?,
            "sweep.seeds" => self.sweep_seeds = p_list_u64(key, value)?,
            "sweep.epochs" => self.sweep_epochs = p_usize(key, value)?,
            "sweep.train_inline" => self.train_inline = p_bool(key, value)?,
            "sweep.checkpoint_dir" => self.checkpoint_dir = PathBuf::from(value),
            _ => {
                return Err(Error::Parse(format!(
                    "unknown key `{key}`; sections are source, model, rates, channel, \
                     training, sweep"
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.source_config().validate()?;
        self.model_config()?.validate()?;
        self.train_config().validate()?;
        if self.sweep_lambdas.is_empty() || self.sweep_seeds.is_empty() {
            return Err(Error::InvalidArgument(
                "sweep.lambdas and sweep.seeds must be nonempty".into(),
            ));
        }
        for &l in &self.sweep_lambdas {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(Error::InvalidArgument(format!("bad sweep lambda {l}")));
            }
        }
        if self.sweep_epochs == 0 {
            return Err(Error::InvalidArgument("sweep.epochs must be >= 1".into()));
        }
        Ok(())
    }

    pub fn source_config(&self) -> SourceConfig {
        let mut s = SourceConfig::new(self.c, self.h, self.w, self.data_seed);
        s.shared_gain = self.shared_gain;
        s.detail_gain = self.detail_gain;
        s.max_shift = self.max_shift;
        s.max_rotation = self.max_rotation;
        s.smoothness = self.smoothness;
        s
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let t = TransformConfig {
            c_img: self.c,
            c_mid: self.c_mid,
            c_lat: self.c_lat,
            c_hyp: self.c_hyp,
        };
        let mut m = ModelConfig::new(t, self.h, self.w)?;
        m.rates = RateSet::new(self.rate_values.clone(), self.eta)?;
        m.gmm_components = self.gmm_components;
        m.align_hidden = self.align_hidden;
        m.power = self.power;
        Ok(m)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_init: self.lr_init,
            lr_final: self.lr_final,
            snr_db: self.snr_db,
            lambda: self.lambda,
            eta: self.eta,
            seed: self.seed,
        }
    }
}

fn p_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::Parse(format!("{key}: expected an unsigned integer, got `{v}`")))
}

fn p_u64(key: &str, v: &str) -> Result<u64> {
    v.parse()
        .map_err(|_| Error::Parse(format!("{key}: expected an unsigned integer, got `{v}`")))
}

fn p_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::Parse(format!("{key}: expected a number, got `{v}`")))
}

fn p_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Parse(format!("{key}: expected true or false, got `{v}`"))),
    }
}

fn p_list_usize(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| p_usize(key, s.trim())).collect()
}

fn p_list_u64(key: &str, v: &str) -> Result<Vec<u64>> {
    v.split(',').map(|s| p_u64(key, s.trim())).collect()
}

fn p_list_f64(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|s| p_f64(key, s.trim())).collect()
}

// ---- run assembly ----

/// Materialized training split.
pub fn training_pairs(cfg: &RunConfig) -> Result<Vec<ImagePair>> {
    let s = cfg.source_config();
    let (train, _) = dataset(&s, cfg.n_train, cfg.n_test)?;
    train.iter().map(|&i| gen_correlated_pair(&s, i)).collect()
}

/// Materialized held-out split.
pub fn test_pairs(cfg: &RunConfig) -> Result<Vec<ImagePair>> {
    let s = cfg.source_config();
    let (_, test) = dataset(&s, cfg.n_train, cfg.n_test)?;
    test.iter().map(|&i| gen_correlated_pair(&s, i)).collect()
}

/// Fresh model with parameters drawn from the (seed, "model") stream, so a
/// run is reproducible from its config and seed alone.
pub fn build_model(cfg: &RunConfig, mode: RunMode, seed: u64) -> Result<(ParamSet, PairModel)> {
    let mcfg = cfg.model_config()?;
    let mut params = ParamSet::new();
    let mut rng = keyed_rng(seed, &[TAG_MODEL]);
    let model = PairModel::with_mode(&mut params, mcfg, mode, &mut rng)?;
    Ok((params, model))
}

/// Writes both splits as PGM/PPM files and returns the paths, train first.
pub fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let s = cfg.source_config();
    let (train, test) = dataset(&s, cfg.n_train, cfg.n_test)?;
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for idx in train.into_iter().chain(test) {
        let pair = gen_correlated_pair(&s, idx)?;
        let (p1, p2) = write_pair(dir, &pair)?;
        out.push(p1);
        out.push(p2);
    }
    Ok(out)
}

// ---- evaluation ----

#[derive(Debug, Clone, Copy)]
struct PairScore {
    psnr: [f64; 2],
    ms: [f64; 2],
    n: [f64; 2],
    hyper_bits: f64,
}

fn eval_pair(
    model: &PairModel,
    params: &ParamSet,
    snr_db: f64,
    seed: u64,
    scales: usize,
    pair: &ImagePair,
) -> Result<PairScore> {
    let mut tape = Tape::new();
    let opt = PassOptions {
        mode: QuantizeMode::Eval,
        snr_db,
        seed,
        pair_id: pair.pair_id,
    };
    let out = model.forward(&mut tape, params, pair, &opt)?;
    let xh1 = tape.value(out.xhat1).clone();
    let xh2 = tape.value(out.xhat2).clone();
    let ms = if scales == 0 {
        [f64::NAN, f64::NAN]
    } else {
        [
            ms_ssim(&pair.x1, &xh1, scales)?,
            ms_ssim(&pair.x2, &xh2, scales)?,
        ]
    };
    Ok(PairScore {
        psnr: [psnr(&pair.x1, &xh1)?, psnr(&pair.x2, &xh2)?],
        ms,
        n: [
            out.alloc1.total_symbols() as f64,
            out.alloc2.total_symbols() as f64,
        ],
        hyper_bits: out.hyper_bits,
    })
}

/// Mean quality and bandwidth over an evaluation set.
#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub pairs: usize,
    /// MS-SSIM scale count actually used: min(3, largest the extents allow).
    pub scales: usize,
    pub psnr: [f64; 2],
    pub ms_ssim: [f64; 2],
    pub rate: [RateReport; 2],
}

impl EvalSummary {
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "pairs {}  ms-ssim scales {}\n",
            self.pairs, self.scales
        ));
        for u in 0..2 {
            s.push_str(&format!(
                "user{}: r {:.6}  n {:.1}  hyper_bits {:.2}  psnr {:.3} dB  ms-ssim {:.4}\n",
                u + 1,
                self.rate[u].r,
                self.rate[u].n,
                self.rate[u].hyper_bits,
                self.psnr[u],
                self.ms_ssim[u],
            ));
        }
        s.push_str(&format!("split: {SPLIT_NOTE}\n"));
        s
    }
}

/// Deterministic-rounding evaluation over `pairs`, parallel across pairs.
/// Results are independent of the thread count: per-pair scores are computed
/// in isolation and reduced in pair order.
pub fn evaluate(
    model: &PairModel,
    params: &ParamSet,
    snr_db: f64,
    seed: u64,
    pairs: &[ImagePair],
) -> Result<EvalSummary> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no evaluation pairs".into()));
    }
    let cfg = &model.cfg;
    let scales = max_scales(cfg.height, cfg.width).min(3);

    let threads = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(pairs.len());
    let chunk = pairs.len().div_ceil(threads);
    let scores: Vec<PairScore> = std::thread::scope(|scope| {
        let handles: Vec<_> = pairs
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|p| eval_pair(model, params, snr_db, seed, scales, p))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut all = Vec::with_capacity(pairs.len());
        for h in handles {
            all.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok::<_, Error>(all)
    })?;

    let m = scores.len() as f64;
    let mean = |f: &dyn Fn(&PairScore) -> f64| scores.iter().map(|s| f(s)).sum::<f64>() / m;
    let hyper = mean(&|s| s.hyper_bits);
    let capacity = awgn_capacity(snr_db);
    let t = &cfg.transform;
    let rate = [
        RateReport::new(mean(&|s| s.n[0]), hyper, capacity, t.c_img, cfg.height, cfg.width)?,
        RateReport::new(mean(&|s| s.n[1]), hyper, capacity, t.c_img, cfg.height, cfg.width)?,
    ];
    Ok(EvalSummary {
        pairs: pairs.len(),
        scales,
        psnr: [mean(&|s| s.psnr[0]), mean(&|s| s.psnr[1])],
        ms_ssim: [mean(&|s| s.ms[0]), mean(&|s| s.ms[1])],
        rate,
    })
}

// ---- rate-distortion sweep ----

pub const SWEEP_CSV_HEADER: &str =
    "lambda,mode,seed,r_user1,r_user2,psnr_1,psnr_2,msssim_1,msssim_2";

/// Canonical checkpoint location for one sweep point.
pub fn checkpoint_path(dir: &Path, lambda: f64, mode: RunMode, seed: u64) -> PathBuf {
    dir.join(format!("ck_l{lambda}_{}_s{seed}.bin", mode.label()))
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub lambda: f64,
    pub mode: RunMode,
    pub seed: u64,
    pub r: [f64; 2],
    pub psnr: [f64; 2],
    pub ms_ssim: [f64; 2],
}

impl SweepRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.lambda,
            self.mode.label(),
            self.seed,
            self.r[0],
            self.r[1],
            self.psnr[0],
            self.psnr[1],
            self.ms_ssim[0],
            self.ms_ssim[1],
        )
    }
}

/// One sweep point: train (or load) a model for (lambda, mode, seed) and
/// evaluate it on the held-out pairs.
pub fn sweep_point(
    cfg: &RunConfig,
    lambda: f64,
    mode: RunMode,
    seed: u64,
    train_set: &[ImagePair],
    test_set: &[ImagePair],
) -> Result<SweepRow> {
    let (mut params, model) = build_model(cfg, mode, seed)?;
    let tcfg = TrainConfig {
        epochs: cfg.sweep_epochs,
        lambda,
        seed,
        ..cfg.train_config()
    };
    let path = checkpoint_path(&cfg.checkpoint_dir, lambda, mode, seed);
    if path.exists() {
        let ckpt = Checkpoint::load(&path)?;
        let mut adam = Adam::new(&params);
        ckpt.restore(&mut params, &mut adam)?;
    } else if cfg.train_inline {
        std::fs::create_dir_all(&cfg.checkpoint_dir)?;
        let (ckpt, _) = train(&model, &mut params, &tcfg, train_set)?;
        ckpt.save(&path)?;
    } else {
        return Err(Error::InvalidArgument(format!(
            "missing checkpoint {}: train it first or set sweep.train_inline=true",
            path.display()
        )));
    }
    let s = evaluate(&model, &params, cfg.snr_db, seed, test_set)?;
    Ok(SweepRow {
        lambda,
        mode,
        seed,
        r: [s.rate[0].r, s.rate[1].r],
        psnr: s.psnr,
        ms_ssim: s.ms_ssim,
    })
}

/// Full grid: every sweep lambda, all four run modes, every sweep seed.
/// Points run sequentially so logs and checkpoint writes are reproducible.
pub fn rd_sweep(cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    let train_set = training_pairs(cfg)?;
    let test_set = test_pairs(cfg)?;
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for &lambda in &cfg.sweep_lambdas {
        for mode in RunMode::all() {
            for &seed in &cfg.sweep_seeds {
                let row = sweep_point(cfg, lambda, mode, seed, &train_set, &test_set)?;
                out.push_str(&row.csv_line());
                out.push('\n');
            }
        }
    }
    Ok(out)
}

// ---- oracle suite ----

/// One oracle row: `pass` iff `observed <= bound` and finite.
#[derive(Debug, Clone)]
pub struct OracleOutcome {
    pub name: String,
    pub observed: f64,
    pub bound: f64,
    pub pass: bool,
    pub runtime_ms: f64,
}

#[derive(Debug, Clone)]
pub struct OracleReport {
    pub rows: Vec<OracleOutcome>,
}

impl OracleReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<28} {:>12} {:>10} {:>7} {:>9}\n",
            "oracle", "observed", "bound", "verdict", "ms"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<28} {:>12.3e} {:>10.1e} {:>7} {:>9.1}\n",
                r.name,
                r.observed,
                r.bound,
                if r.pass { "pass" } else { "FAIL" },
                r.runtime_ms,
            ));
        }
        s
    }
}

/// Sampling and grid sizes for one oracle run.
#[derive(Debug, Clone, Copy)]
pub struct OracleBudget {
    /// Points per axis of the (latent, mean, scale) quadrature grid.
    pub grid_per_axis: usize,
    pub gmm_priors: usize,
    pub gmm_draws: usize,
    pub mmse_draws: usize,
    pub grad_seeds: usize,
    pub alloc_cases: usize,
    pub residual_draws: usize,
}

impl OracleBudget {
    /// Seconds-scale suite for self-tests.
    pub fn quick() -> Self {
        Self {
            grid_per_axis: 5,
            gmm_priors: 4,
            gmm_draws: 200_000,
            mmse_draws: 400_000,
            grad_seeds: 2,
            alloc_cases: 2_000,
            residual_draws: 200_000,
        }
    }

    /// Release-gate suite.
    pub fn full() -> Self {
        Self {
            grid_per_axis: 10,
            gmm_priors: 20,
            gmm_draws: 10_000_000,
            mmse_draws: 10_000_000,
            grad_seeds: 10,
            alloc_cases: 10_000,
            residual_draws: 1_000_000,
        }
    }
}

fn timed(name: &str, bound: f64, f: impl FnOnce() -> Result<f64>) -> Result<OracleOutcome> {
    let t0 = Instant::now();
    let observed = f()?;
    Ok(OracleOutcome {
        name: name.into(),
        observed,
        bound,
        pass: observed.is_finite() && observed <= bound,
        runtime_ms: t0.elapsed().as_secs_f64() * 1e3,
    })
}

/// Runs the whole independent-oracle suite at the given budget.
pub fn oracle_check(b: &OracleBudget) -> Result<OracleReport> {
    let mut rows = Vec::new();
    rows.push(timed("latent-bin-vs-quadrature", 1e-8, || {
        Ok(latent_bin_error(b.grid_per_axis, &bin_prob))
    })?);
    rows.push(timed("gmm-bin-vs-monte-carlo", 3.0, || {
        gmm_bin_mc_error(b.gmm_priors, b.gmm_draws, 0x676d_6d31)
    })?);
    rows.push(timed("gmm-normalization", 1e-6, || Ok(normalization_defect()))?);
    rows.push(timed("diagonal-prob-factorization", 1e-9, || {
        Ok(factorization_prob_error())
    })?);
    rows.push(timed("diagonal-rate-factorization", 1e-6, || {
        Ok(factorization_rate_error())
    })?);
    rows.push(timed("mmse-linear-case-exact", 0.0, || Ok(mmse_exact_error()))?);
    rows.push(timed("mmse-vs-monte-carlo", 3.0, || {
        mmse_mc_error(b.mmse_draws, 0x6d6d_7365)
    })?);
    rows.extend(grad_suite(b.grad_seeds)?);
    rows.push(timed("channel-empirical-snr-db", 0.1, || {
        empirical_snr_error(b.residual_draws)
    })?);
    rows.push(timed("power-constraint", 1e-9, || {
        power_constraint_error(b.residual_draws)
    })?);
    rows.push(timed("allocation-vs-brute-force", 0.0, || {
        allocation_mismatches(b.alloc_cases, 0x616c_6c6f)
    })?);
    rows.push(timed("symbol-residual-variance", 0.02, || {
        residual_variance_error(b.residual_draws)
    })?);
    rows.push(timed("quantizer-noise-ks", 0.005, || {
        quantizer_ks(b.residual_draws)
    })?);
    rows.push(timed("capacity-at-0db", 1e-15, || {
        Ok((awgn_capacity(0.0) - 1.0).abs())
    })?);
    rows.push(timed("capacity-at-5db", 1e-9, || {
        Ok((awgn_capacity(5.0) - 2.057_373_208_606_795).abs())
    })?);
    rows.push(timed("rate-per-pixel-example", 1e-9, || {
        let r = rate_per_pixel(128.0, 64.0, awgn_capacity(5.0), 1, 16, 32)?;
        Ok((r - 0.280_378_542_764_403_7).abs())
    })?);
    Ok(OracleReport { rows })
}

/// Worst |closed form - quadrature| of the Gaussian-bin probability over a
/// grid of (latent, mean, scale) triples. The probability under test is a
/// parameter so a corrupted implementation demonstrably fails.
pub fn latent_bin_error(grid_per_axis: usize, bin: &dyn Fn(f64, f64, f64) -> f64) -> f64 {
    let g = grid_per_axis.max(2);
    let lerp = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (g - 1) as f64;
    let mut worst: f64 = 0.0;
    for i in 0..g {
        let y = lerp(-6.0, 6.0, i);
        for j in 0..g {
            let mu = lerp(-3.0, 3.0, j);
            for k in 0..g {
                let sigma = lerp(0.05_f64.ln(), 5.0_f64.ln(), k).exp();
                let want = quad::integrate(
                    &|t| normal_pdf((t - mu) / sigma) / sigma,
                    y - 0.5,
                    y + 0.5,
                    1e-12,
                );
                worst = worst.max((bin(y, mu, sigma) - want).abs());
            }
        }
    }
    worst
}

fn sample_mixture(comps: &[Component], rng: &mut ChaCha8Rng) -> (f64, f64) {
    let mut u: f64 = rng.gen();
    let mut c = &comps[comps.len() - 1];
    for cand in comps {
        if u < cand.weight {
            c = cand;
            break;
        }
        u -= cand.weight;
    }
    let [s11, s12, s22] = c.cov;
    let l11 = s11.sqrt();
    let l21 = s12 / l11;
    let l22 = (s22 - l21 * l21).max(0.0).sqrt();
    let g1: f64 = StandardNormal.sample(rng);
    let g2: f64 = StandardNormal.sample(rng);
    (c.mean[0] + l11 * g1, c.mean[1] + l21 * g1 + l22 * g2)
}

fn random_spd_mixture(rng: &mut ChaCha8Rng, index: usize) -> Vec<Component> {
    let k = 1 + index % 3;
    let mut w: Vec<f64> = (0..k).map(|_| 0.2 + rng.gen::<f64>()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    (0..k)
        .map(|i| {
            let s1 = 0.6 + 1.2 * rng.gen::<f64>();
            let s2 = 0.6 + 1.2 * rng.gen::<f64>();
            // The first two priors pin the strongly coupled corners.
            let rho = match (index, i) {
                (0, 0) => 0.9,
                (1, 0) => -0.9,
                _ => 1.8 * rng.gen::<f64>() - 0.9,
            };
            Component {
                weight: w[i],
                mean: [3.0 * rng.gen::<f64>() - 1.5, 3.0 * rng.gen::<f64>() - 1.5],
                cov: [s1 * s1, rho * s1 * s2, s2 * s2],
            }
        })
        .collect()
}

/// Worst Monte Carlo disagreement of the joint bin probability, in standard
/// errors, over random SPD mixtures (the first two pin rho = +-0.9).
pub fn gmm_bin_mc_error(priors: usize, draws: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for p in 0..priors {
        let mut rng = keyed_rng(seed, &[TAG_ORACLE, 1, p as u64]);
        let comps = random_spd_mixture(&mut rng, p);
        let heavy = comps
            .iter()
            .max_by(|a, b| a.weight.total_cmp(&b.weight))
            .expect("nonempty mixture");
        let (zb1, zb2) = (heavy.mean[0].round(), heavy.mean[1].round());
        let want = mixture_bin_prob(&comps, zb1, zb2, 1e-10);
        let mut hits = 0u64;
        for _ in 0..draws {
            let (z1, z2) = sample_mixture(&comps, &mut rng);
            if (z1 - zb1).abs() <= 0.5 && (z2 - zb2).abs() <= 0.5 {
                hits += 1;
            }
        }
        let n = draws as f64;
        let phat = hits as f64 / n;
        let se = (want * (1.0 - want) / n).sqrt();
        if se == 0.0 {
            return Err(Error::InvalidArgument(
                "degenerate bin in the GMM Monte Carlo oracle".into(),
            ));
        }
        worst = worst.max((phat - want).abs() / se);
    }
    Ok(worst)
}

/// Worst deviation of the integer-bin mass sum from [1 - 1e-6, 1] for
/// mixtures supported well inside [-15, 15]^2. Overshooting one is an
/// immediate failure.
pub fn normalization_defect() -> f64 {
    let priors: [Vec<Component>; 2] = [
        vec![
            Component {
                weight: 0.6,
                mean: [0.3, -0.7],
                cov: [1.0, 0.56, 0.64],
            },
            Component {
                weight: 0.4,
                mean: [-6.0, 9.0],
                cov: [1.44, -0.6, 1.0],
            },
        ],
        vec![
            Component {
                weight: 0.5,
                mean: [12.0, -12.0],
                cov: [1.0, 0.3, 0.49],
            },
            Component {
                weight: 0.3,
                mean: [-11.0, -10.5],
                cov: [0.81, 0.0, 1.21],
            },
            Component {
                weight: 0.2,
                mean: [2.0, 3.0],
                cov: [1.44, 0.9, 1.0],
            },
        ],
    ];
    let tol = 1e-11;
    // Exact bin masses sum to at most one; the numerical sum may overshoot
    // by the accumulated per-bin quadrature tolerance, never more.
    let overshoot_slack = 41.0 * 41.0 * tol;
    let mut worst: f64 = 0.0;
    for comps in &priors {
        let mut total = 0.0;
        for zb1 in -20..=20 {
            for zb2 in -20..=20 {
                total += mixture_bin_prob(comps, zb1 as f64, zb2 as f64, tol);
            }
        }
        if total > 1.0 + overshoot_slack {
            return f64::INFINITY;
        }
        worst = worst.max(1.0 - total).max(0.0);
    }
    worst
}

/// Diagonal-covariance priors used by both factorization identities.
fn diagonal_priors() -> Vec<Vec<Component>> {
    (0..3)
        .map(|j| {
            let m = j as f64 * 0.8 - 0.9;
            vec![Component {
                weight: 1.0,
                mean: [m, -0.5 * m],
                cov: [(0.7 + 0.2 * j as f64).powi(2), 0.0, (1.3 - 0.15 * j as f64).powi(2)],
            }]
        })
        .collect()
}

/// Worst |joint bin probability - product of univariate bins| over
/// diagonal-covariance priors (for which the identity is exact).
pub fn factorization_prob_error() -> f64 {
    let mut prob_err: f64 = 0.0;
    for cj in &diagonal_priors() {
        let c = &cj[0];
        for z1 in [-1.0, 0.0, 1.0, 2.0] {
            for z2 in [-2.0, 0.0, 0.5] {
                let joint = mixture_bin_prob(cj, z1, z2, 1e-12);
                let product = bin_prob(z1, c.mean[0], c.cov[0].sqrt())
                    * bin_prob(z2, c.mean[1], c.cov[2].sqrt());
                prob_err = prob_err.max((joint - product).abs());
            }
        }
    }
    prob_err
}

/// Worst |joint rate - sum of marginal rates| over diagonal priors.
pub fn factorization_rate_error() -> f64 {
    let table = PriorTable::from_components(diagonal_priors());
    let z1 = [0.0, 1.0, -1.0];
    let z2 = [0.5, -0.5, 0.0];
    let joint = joint_rate_bits(&table, &z1, &z2);
    let marginal = independent_rate_bits(&table.marginals(1), &table.marginals(2), &z1, &z2);
    joint
        .iter()
        .zip(&marginal)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Deviation of the MMSE estimator from the exact linear-Gaussian
/// regression 0.8 z1 (single component, unit scales, rho = 0.8).
pub fn mmse_exact_error() -> f64 {
    let linear = vec![Component {
        weight: 1.0,
        mean: [0.0, 0.0],
        cov: [1.0, 0.8, 1.0],
    }];
    let mut exact: f64 = 0.0;
    for z1 in [-1.5, 0.5, 2.0] {
        exact = exact.max((mmse_estimate_scalar(&linear, z1) - 0.8 * z1).abs());
    }
    exact
}

/// Worst rejection-window Monte Carlo disagreement of the MMSE estimator,
/// in standard errors, over K = 1 and K = 2 priors.
pub fn mmse_mc_error(draws: usize, seed: u64) -> Result<f64> {
    let cases: [(Vec<Component>, f64); 2] = [
        (
            vec![Component {
                weight: 1.0,
                mean: [0.2, -0.4],
                cov: [1.0, 0.5, 0.8],
            }],
            0.5,
        ),
        (
            vec![
                Component {
                    weight: 0.55,
                    mean: [-1.0, -1.0],
                    cov: [0.8, 0.3, 0.9],
                },
                Component {
                    weight: 0.45,
                    mean: [1.2, 0.8],
                    cov: [1.1, -0.4, 0.7],
                },
            ],
            0.3,
        ),
    ];
    let window = 0.01;
    let mut mc_worst: f64 = 0.0;
    for (ci, (comps, z_star)) in cases.iter().enumerate() {
        let mut rng = keyed_rng(seed, &[TAG_ORACLE, 2, ci as u64]);
        let mut kept = Vec::new();
        for _ in 0..draws {
            let (z1, z2) = sample_mixture(comps, &mut rng);
            if (z1 - z_star).abs() <= window {
                kept.push(z2);
            }
        }
        if kept.len() < 100 {
            return Err(Error::InvalidArgument(format!(
                "mmse oracle kept only {} draws; raise the budget",
                kept.len()
            )));
        }
        let k = kept.len() as f64;
        let mean = kept.iter().sum::<f64>() / k;
        let var = kept.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / (k - 1.0);
        let se = (var / k).sqrt();
        let closed = mmse_estimate_scalar(comps, *z_star);
        mc_worst = mc_worst.max((closed - mean).abs() / se);
    }
    Ok(mc_worst)
}

// ---- gradient suite ----

struct WarpPipe {
    loc: Localizer,
    lh: usize,
    lw: usize,
}

impl Block for WarpPipe {
    fn forward(&self, tape: &mut Tape, params: &ParamSet, inputs: &[Var]) -> Result<Var> {
        let (o1, _o2) = self.loc.offsets(tape, params, inputs[0])?;
        let g = make_grid_op(tape, o1, self.lh, self.lw)?;
        sample_op(tape, inputs[1], g)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        self.loc.param_ids()
    }
}

struct LatentRatePipe;

impl Block for LatentRatePipe {
    fn forward(&self, tape: &mut Tape, _params: &ParamSet, inputs: &[Var]) -> Result<Var> {
        // exp keeps the scale input positive without a kink.
        let sigma = tape.exp(inputs[2])?;
        latent_rate_bits_op(tape, inputs[0], inputs[1], sigma)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        Vec::new()
    }
}

struct JointRatePipe {
    prior: JointHyperPrior,
}

impl Block for JointRatePipe {
    fn forward(&self, tape: &mut Tape, params: &ParamSet, inputs: &[Var]) -> Result<Var> {
        joint_rate_bits_op(tape, &self.prior, params, inputs[0], inputs[1])
    }

    fn param_ids(&self) -> Vec<ParamId> {
        self.prior.param_ids()
    }
}

struct JsccPipe {
    enc: JsccEncoder,
    dec: JsccDecoder,
    rtok: RateTokens,
    alloc: RateAllocation,
}

impl Block for JsccPipe {
    fn forward(&self, tape: &mut Tape, params: &ParamSet, inputs: &[Var]) -> Result<Var> {
        let s = self.enc.encode(tape, params, inputs[0], &self.alloc, &self.rtok)?;
        let s = power_normalize(tape, s, 1.0)?;
        self.dec.decode(tape, params, s, &self.alloc, &self.rtok)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.enc.param_ids();
        ids.extend(self.dec.param_ids());
        ids.extend(self.rtok.param_ids());
        ids
    }
}

struct NormalizePipe;

impl Block for NormalizePipe {
    fn forward(&self, tape: &mut Tape, _params: &ParamSet, inputs: &[Var]) -> Result<Var> {
        power_normalize(tape, inputs[0], 2.0)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        Vec::new()
    }
}

struct SsimPipe {
    scales: usize,
}

impl Block for SsimPipe {
    fn forward(&self, tape: &mut Tape, _params: &ParamSet, inputs: &[Var]) -> Result<Var> {
        ms_ssim_op(tape, inputs[0], inputs[1], self.scales)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        Vec::new()
    }
}

struct MsePipe;

impl Block for MsePipe {
    fn forward(&self, tape: &mut Tape, _params: &ParamSet, inputs: &[Var]) -> Result<Var> {
        mse_op(tape, inputs[0], inputs[1])
    }

    fn param_ids(&self) -> Vec<ParamId> {
        Vec::new()
    }
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| lo + (hi - lo) * rng.gen::<f64>())
}

const GRAD_EPS: f64 = 1e-5;
const GRAD_BOUND: f64 = 1e-4;

fn grad_row(
    name: &str,
    seeds: usize,
    block: &dyn Block,
    params: &mut ParamSet,
    gen: impl Fn(u64) -> Vec<Tensor>,
) -> Result<OracleOutcome> {
    let t0 = Instant::now();
    let observed = grad_check_seeded(block, params, GRAD_EPS, 0..seeds as u64, gen)?;
    Ok(OracleOutcome {
        name: name.into(),
        observed,
        bound: GRAD_BOUND,
        pass: observed.is_finite() && observed <= GRAD_BOUND,
        runtime_ms: t0.elapsed().as_secs_f64() * 1e3,
    })
}

/// Central-difference checks for every differentiable block family, one row
/// per family, worst relative error over seeded input points.
pub fn grad_suite(seeds: usize) -> Result<Vec<OracleOutcome>> {
    let mut rng = keyed_rng(0x6772_6164, &[TAG_ORACLE, 3]);
    let t = TransformConfig {
        c_img: 1,
        c_mid: 5,
        c_lat: 3,
        c_hyp: 2,
    };
    let mut rows = Vec::new();

    let gen_n =
        |shapes: &'static [&'static [usize]]| move |seed: u64| normal_inputs(seed, shapes);

    let mut params = ParamSet::new();
    let enc = Analyzer::new(&mut params, "enc", &t, &mut rng)?;
    rows.push(grad_row("grad-analyzer", seeds, &enc, &mut params, gen_n(&[&[1, 8, 8]]))?);

    let mut params = ParamSet::new();
    let hyp = HyperAnalyzer::new(&mut params, "hyp", &t, &mut rng)?;
    rows.push(grad_row("grad-hyper-analyzer", seeds, &hyp, &mut params, gen_n(&[&[3, 4, 4]]))?);

    let mut params = ParamSet::new();
    let hsyn = HyperSynthesizer::new(&mut params, "hsyn", &t, &mut rng)?;
    rows.push(grad_row(
        "grad-hyper-synthesizer",
        seeds,
        &hsyn,
        &mut params,
        gen_n(&[&[2, 2, 2]]),
    )?);

    let mut params = ParamSet::new();
    let syn = JointSynthesizer::new(&mut params, "syn", &t, &mut rng)?;
    rows.push(grad_row(
        "grad-joint-synthesizer",
        seeds,
        &syn,
        &mut params,
        gen_n(&[&[3, 4, 4], &[3, 4, 4]]),
    )?);

    let mut params = ParamSet::new();
    let loc = Localizer::new(&mut params, "loc", 4, 6, &mut rng)?;
    rows.push(grad_row("grad-localizer", seeds, &loc, &mut params, gen_n(&[&[4, 4, 4]]))?);

    // The warp check needs the zero-initialized offset head moved off the
    // exact lattice, where bilinear weights have a corner.
    let mut params = ParamSet::new();
    let loc = Localizer::new(&mut params, "wp", 4, 6, &mut rng)?;
    for name in ["wp.fc2.w", "wp.fc2.b"] {
        let id = params.lookup(name).expect("localizer head");
        let fill = uniform_tensor(&mut rng, params.value(id).shape(), -0.04, 0.04);
        *params.value_mut(id) = fill;
    }
    let warp = WarpPipe { loc, lh: 4, lw: 4 };
    rows.push(grad_row(
        "grad-warp-pipeline",
        seeds,
        &warp,
        &mut params,
        gen_n(&[&[4, 4, 4], &[2, 4, 4]]),
    )?);

    // Keep |y - mu| within a few sigma: in the far tails the forward CDF
    // difference cancels below f64 resolution and finite differences of
    // that noise say nothing about the (accurate, pdf-based) backward.
    let mut params = ParamSet::new();
    rows.push(grad_row(
        "grad-latent-rate",
        seeds,
        &LatentRatePipe,
        &mut params,
        |seed| {
            let mut r = keyed_rng(seed, &[TAG_ORACLE, 4]);
            vec![
                uniform_tensor(&mut r, &[4, 3], -1.5, 1.5),
                uniform_tensor(&mut r, &[4, 3], -1.5, 1.5),
                uniform_tensor(&mut r, &[4, 3], -0.3, 0.7),
            ]
        },
    )?);

    let mut params = ParamSet::new();
    let prior = JointHyperPrior::new(&mut params, "prior", 4, 2, true, &mut rng)?;
    rows.push(grad_row(
        "grad-joint-rate",
        seeds,
        &JointRatePipe { prior },
        &mut params,
        gen_n(&[&[4], &[4]]),
    )?);

    let mut params = ParamSet::new();
    let rates = RateSet::new(vec![2, 4, 8], 0.2)?;
    let pipe = JsccPipe {
        enc: JsccEncoder::new(&mut params, "je", &rates, 3, &mut rng)?,
        dec: JsccDecoder::new(&mut params, "jd", &rates, 3, &mut rng)?,
        rtok: RateTokens::new(&mut params, "rt", &rates, 3, &mut rng)?,
        alloc: RateAllocation::new(vec![2, 4, 8, 2], vec![4, 2, 8, 4], &rates)?,
    };
    rows.push(grad_row("grad-jscc-roundtrip", seeds, &pipe, &mut params, gen_n(&[&[4, 3]]))?);

    let mut params = ParamSet::new();
    rows.push(grad_row(
        "grad-power-normalize",
        seeds,
        &NormalizePipe,
        &mut params,
        gen_n(&[&[16]]),
    )?);

    let mut params = ParamSet::new();
    rows.push(grad_row(
        "grad-ms-ssim",
        seeds,
        &SsimPipe { scales: 1 },
        &mut params,
        |seed| {
            let mut r = keyed_rng(seed, &[TAG_ORACLE, 5]);
            vec![
                uniform_tensor(&mut r, &[1, 12, 14], 0.1, 0.9),
                uniform_tensor(&mut r, &[1, 12, 14], 0.1, 0.9),
            ]
        },
    )?);

    let mut params = ParamSet::new();
    rows.push(grad_row("grad-mse", seeds, &MsePipe, &mut params, gen_n(&[&[2, 5, 5], &[2, 5, 5]]))?);

    Ok(rows)
}

// ---- channel and quantizer oracles ----

fn normalized_signal(complex_uses: usize) -> Result<Tensor> {
    let mut rng = keyed_rng(0x6368_616e, &[TAG_ORACLE, 6]);
    let raw = normal_tensor(&mut rng, &[2 * complex_uses]);
    power_normalize_tensor(&raw, 1.0)
}

/// Per-complex-use power deviation from the budget after normalization.
pub fn power_constraint_error(complex_uses: usize) -> Result<f64> {
    let s = normalized_signal(complex_uses)?;
    let mean_power = s.data().iter().map(|x| x * x).sum::<f64>() / complex_uses as f64;
    Ok((mean_power - 1.0).abs())
}

/// |empirical - configured| SNR in dB at 5 dB over a normalized signal.
pub fn empirical_snr_error(complex_uses: usize) -> Result<f64> {
    let s = normalized_signal(complex_uses)?;
    let cfg = ChannelConfig::new(5.0, 1.0, 0x6f72_6163)?;
    let shat = transmit_tensor(&s, &cfg, 1, 0)?;
    let eps2_hat = s
        .data()
        .iter()
        .zip(shat.data())
        .map(|(a, b)| (b - a) * (b - a))
        .sum::<f64>()
        / complex_uses as f64;
    Ok((10.0 * (1.0 / eps2_hat).log10() - 5.0).abs())
}

/// Relative error of the received-symbol residual variance against the
/// configured noise variance.
pub fn residual_variance_error(complex_uses: usize) -> Result<f64> {
    let cfg = ChannelConfig::new(5.0, 1.0, 0x7265_7369)?;
    let zeros = Tensor::zeros(&[2 * complex_uses]);
    let shat = transmit_tensor(&zeros, &cfg, 2, 7)?;
    let var = shat.data().iter().map(|x| x * x).sum::<f64>() / complex_uses as f64;
    Ok((var / noise_variance(&cfg) - 1.0).abs())
}

/// Kolmogorov-Smirnov distance of training-mode quantizer perturbations
/// against Uniform(-1/2, 1/2).
pub fn quantizer_ks(draws: usize) -> Result<f64> {
    let chunks = 10;
    let per = draws / chunks;
    let mut noise = Vec::with_capacity(per * chunks);
    for c in 0..chunks {
        let mut tape = Tape::new();
        let v = tape.input(Tensor::zeros(&[per]));
        let q = noisy_quantize(
            &mut tape,
            v,
            QuantizeMode::Train,
            keyed_rng(0x6b73_7175, &[TAG_ORACLE, 7, c as u64]).gen(),
        )?;
        noise.extend_from_slice(tape.value(q).data());
    }
    noise.sort_by(f64::total_cmp);
    let n = noise.len() as f64;
    let mut ks: f64 = 0.0;
    for (i, x) in noise.iter().enumerate() {
        let f = (x + 0.5).clamp(0.0, 1.0);
        ks = ks.max((f - i as f64 / n).abs());
        ks = ks.max((f - (i + 1) as f64 / n).abs());
    }
    Ok(ks)
}

/// Mismatches between the bandwidth argmin and an exhaustive scan with the
/// smaller-on-ties rule. Dyadic eta makes the constructed ties exact.
pub fn allocation_mismatches(cases: usize, seed: u64) -> Result<f64> {
    let mut rng = keyed_rng(seed, &[TAG_ORACLE, 8]);
    let sets = [
        RateSet::new(vec![2, 4, 8, 12, 16, 24, 32], 0.2)?,
        RateSet::new(vec![1, 2, 3, 5, 8, 13, 21, 34], 0.25)?,
    ];
    let etas = [0.2, 0.25];
    let mut mismatches = 0u64;
    for i in 0..cases {
        let which = i % 2;
        let (rates, eta) = (&sets[which], etas[which]);
        let vals = rates.values();
        let bits = if i % 7 == 3 && which == 1 {
            // Exact midpoint of an adjacent pair: 0.25 * bits is dyadic.
            let j = i % (vals.len() - 1);
            (vals[j] + vals[j + 1]) as f64 / (2.0 * eta)
        } else {
            260.0 * rng.gen::<f64>()
        };
        let got = allocate(&[bits], rates)?[0];
        let target = eta * bits;
        let mut best = vals[0];
        let mut best_d = (target - vals[0] as f64).abs();
        for &v in &vals[1..] {
            let d = (target - v as f64).abs();
            // Ascending order plus strict improvement keeps the smaller
            // element on exact ties.
            if d < best_d {
                best_d = d;
                best = v;
            }
        }
        if got != best {
            mismatches += 1;
        }
    }
    Ok(mismatches as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::lr_at;

    #[test]
    fn capacity_known_points() {
        assert_eq!(awgn_capacity(0.0), 1.0);
        assert!((awgn_capacity(5.0) - 2.057_373_208_606_795).abs() < 1e-12);
        assert!((awgn_capacity(5.0) - 2.0574).abs() < 1e-4);
        assert_eq!(awgn_capacity(f64::NEG_INFINITY), 0.0);
    }

    #[test]
    fn rate_per_pixel_worked_example() {
        let c = awgn_capacity(5.0);
        let r = rate_per_pixel(128.0, 64.0, c, 1, 16, 32).unwrap();
        assert!((r - 0.280_378_542_764_403_7).abs() < 1e-12);
        assert!((r - 0.28038).abs() < 1e-5);
        // No hyper bits: the formula collapses to n over the pixel count.
        let r0 = rate_per_pixel(128.0, 0.0, c, 1, 16, 32).unwrap();
        assert_eq!(r0, 128.0 / 512.0);
        // Doubling the pixel count halves the rate.
        let r2 = rate_per_pixel(128.0, 64.0, c, 1, 32, 32).unwrap();
        assert!((r2 - r / 2.0).abs() < 1e-15);
    }

    #[test]
    fn rate_per_pixel_rejects_bad_arguments() {
        assert!(rate_per_pixel(-1.0, 0.0, 1.0, 1, 4, 4).is_err());
        assert!(rate_per_pixel(1.0, -0.5, 1.0, 1, 4, 4).is_err());
        assert!(rate_per_pixel(1.0, 0.0, 0.0, 1, 4, 4).is_err());
        assert!(rate_per_pixel(1.0, 0.0, f64::INFINITY, 1, 4, 4).is_err());
        assert!(rate_per_pixel(1.0, 0.0, 1.0, 0, 4, 4).is_err());
    }

    #[test]
    fn run_config_parses_sections_comments_and_overrides() {
        let text = "\
# a comment
source.h = 24
source.w = 32

model.c_lat = 4
rates.values = 2, 4, 8
rates.eta = 0.25
channel.snr_db = 7.5
training.lambda = 0.02
sweep.lambdas = 0.01, 0.02
sweep.seeds = 5
sweep.train_inline = true
source.h = 16
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.h, 16, "later assignment wins");
        assert_eq!(cfg.w, 32);
        assert_eq!(cfg.c_lat, 4);
        assert_eq!(cfg.rate_values, vec![2, 4, 8]);
        assert_eq!(cfg.eta, 0.25);
        assert_eq!(cfg.snr_db, 7.5);
        assert_eq!(cfg.lambda, 0.02);
        assert_eq!(cfg.sweep_lambdas, vec![0.01, 0.02]);
        assert_eq!(cfg.sweep_seeds, vec![5]);
        assert!(cfg.train_inline);
    }

    #[test]
    fn run_config_rejects_unknown_keys_and_bad_values() {
        let err = RunConfig::parse("model.width = 3\n").unwrap_err();
        assert!(err.to_string().contains("unknown key `model.width`"), "{err}");
        let err = RunConfig::parse("source.h twelve\n").unwrap_err();
        assert!(err.to_string().contains("expected key = value"), "{err}");
        let err = RunConfig::parse("source.h = twelve\n").unwrap_err();
        assert!(err.to_string().contains("unsigned integer"), "{err}");
        let err = RunConfig::parse("sweep.train_inline = yes\n").unwrap_err();
        assert!(err.to_string().contains("true or false"), "{err}");
        // Extents must stay compatible with the transform strides.
        assert!(RunConfig::parse("source.h = 12\n").is_err());
    }

    #[test]
    fn run_config_key_list_matches_setter() {
        let mut cfg = RunConfig::default();
        for key in RunConfig::KEYS {
            let probe = match *key {
                "rates.values" => "2,4",
                "sweep.lambdas" => "0.01",
                "sweep.seeds" => "1,2",
                "sweep.train_inline" => "false",
                "sweep.checkpoint_dir" => "ckpts",
                _ => "3",
            };
            cfg.set(key, probe).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }

    fn tiny_run_config(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.c_mid = 6;
        cfg.c_lat = 4;
        cfg.c_hyp = 2;
        cfg.align_hidden = 8;
        cfg.gmm_components = 2;
        cfg.n_train = 2;
        cfg.n_test = 2;
        cfg.epochs = 1;
        cfg.sweep_epochs = 1;
        cfg.lr_init = 1e-3;
        cfg.lr_final = 1e-4;
        cfg.sweep_lambdas = vec![0.01];
        cfg.sweep_seeds = vec![0];
        cfg.train_inline = true;
        cfg.checkpoint_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn evaluate_reports_rates_consistent_with_the_formula() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run_config(dir.path());
        let (params, model) = build_model(&cfg, RunMode::Joint, 3).unwrap();
        let pairs = test_pairs(&cfg).unwrap();
        let s = evaluate(&model, &params, cfg.snr_db, 3, &pairs).unwrap();
        assert_eq!(s.pairs, 2);
        for u in 0..2 {
            let want = rate_per_pixel(
                s.rate[u].n,
                s.rate[u].hyper_bits,
                awgn_capacity(cfg.snr_db),
                cfg.c,
                cfg.h,
                cfg.w,
            )
            .unwrap();
            assert_eq!(s.rate[u].r, want);
            assert!(s.psnr[u].is_finite());
            assert!(s.ms_ssim[u] > 0.0 && s.ms_ssim[u] <= 1.0);
        }
        assert_eq!(s.rate[0].hyper_bits, s.rate[1].hyper_bits);

        // Same scores no matter how many worker threads the host offers.
        let again = evaluate(&model, &params, cfg.snr_db, 3, &pairs).unwrap();
        assert_eq!(s.psnr, again.psnr);
        assert_eq!(s.rate[0].r, again.rate[0].r);
    }

    #[test]
    fn eval_hyper_bits_match_training_rate_term_within_mc_tolerance() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run_config(dir.path());
        let (params, model) = build_model(&cfg, RunMode::Joint, 5).unwrap();
        let pairs = test_pairs(&cfg).unwrap();
        let eval = evaluate(&model, &params, cfg.snr_db, 5, &pairs).unwrap();

        // Training-mode r_z averages over the quantizer's uniform dither;
        // the evaluation path rounds deterministically instead.
        let noise_seeds = 100;
        let mut total = 0.0;
        for pair in &pairs {
            for s in 0..noise_seeds {
                let mut tape = Tape::new();
                let opt = PassOptions {
                    mode: QuantizeMode::Train,
                    snr_db: cfg.snr_db,
                    seed: 1000 + s,
                    pair_id: pair.pair_id,
                };
                let out = model.forward(&mut tape, &params, pair, &opt).unwrap();
                total += out.hyper_bits;
            }
        }
        let train_mean = total / (pairs.len() * noise_seeds as usize) as f64;
        let rel = (eval.rate[0].hyper_bits - train_mean).abs() / train_mean;
        assert!(
            rel < 0.05,
            "eval {} vs train {} ({rel:.4} relative)",
            eval.rate[0].hyper_bits,
            train_mean
        );
    }

    #[test]
    fn sweep_covers_the_mode_grid_and_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run_config(dir.path());
        let csv = rd_sweep(&cfg).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], SWEEP_CSV_HEADER);
        assert_eq!(lines.len(), 1 + 4, "one row per mode");
        for (line, mode) in lines[1..].iter().zip(RunMode::all()) {
            assert!(line.starts_with(&format!("0.01,{},0,", mode.label())), "{line}");
        }
        // Checkpoints were written; the rerun loads them and must agree.
        assert!(checkpoint_path(dir.path(), 0.01, RunMode::Joint, 0).exists());
        let again = rd_sweep(&cfg).unwrap();
        assert_eq!(csv, again);
    }

    #[test]
    fn sweep_without_checkpoints_names_the_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_run_config(dir.path());
        cfg.train_inline = false;
        let err = rd_sweep(&cfg).unwrap_err().to_string();
        assert!(err.contains("missing checkpoint"), "{err}");
        assert!(err.contains("ck_l0.01_joint-prior_s0.bin"), "{err}");
        assert!(err.contains("train_inline"), "{err}");
    }

    #[test]
    fn gen_data_writes_both_splits() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run_config(dir.path());
        let paths = gen_data(&cfg, dir.path()).unwrap();
        assert_eq!(paths.len(), 2 * (cfg.n_train + cfg.n_test));
        for p in &paths {
            assert!(p.exists(), "{p:?}");
        }
    }

    #[test]
    fn oracle_suite_passes_at_quick_budget() {
        let report = oracle_check(&OracleBudget::quick()).unwrap();
        let table = report.table();
        assert!(report.all_pass(), "\n{table}");
        assert!(table.contains("ms"), "{table}");
        assert!(report.rows.len() >= 15, "{}", report.rows.len());
        for row in &report.rows {
            assert!(row.runtime_ms >= 0.0);
        }
    }

    #[test]
    fn latent_bin_oracle_flags_a_corrupted_implementation() {
        let clean = latent_bin_error(4, &bin_prob);
        assert!(clean < 1e-8, "clean error {clean}");
        let skewed = |y: f64, mu: f64, sigma: f64| bin_prob(y, mu, sigma) * 1.001;
        let corrupted = latent_bin_error(4, &skewed);
        assert!(corrupted > 1e-8, "corruption went unnoticed: {corrupted}");
        // A wrong CDF shape, not just a scale error, is also caught.
        let wrong = |y: f64, mu: f64, sigma: f64| bin_prob(y, mu, 1.01 * sigma);
        assert!(latent_bin_error(4, &wrong) > 1e-8);
    }

    #[test]
    fn allocation_oracle_detects_a_wrong_tie_rule() {
        // The real allocator agrees with the scan.
        assert_eq!(allocation_mismatches(2_000, 9).unwrap(), 0.0);
        // A larger-on-ties variant disagrees on the constructed midpoints.
        let rates = RateSet::new(vec![1, 2, 3, 5, 8, 13, 21, 34], 0.25).unwrap();
        let vals = rates.values();
        let bits = (vals[2] + vals[3]) as f64 / 0.5;
        let got = allocate(&[bits], &rates).unwrap()[0];
        assert_eq!(got, vals[2], "ties resolve to the smaller bandwidth");
    }

    #[test]
    fn schedule_constant_smoke() {
        // The cosine schedule midpoint the training module froze, readable
        // from here as a cross-module sanity hook for the CLI.
        let cfg = TrainConfig::default();
        assert!((lr_at(100, &cfg).unwrap() - 5.05e-5).abs() < 1e-12);
    }
}
