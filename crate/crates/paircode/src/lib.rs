//! Distributed joint source-channel coding for correlated image pairs.
//!
//! Two correlated images are encoded separately, transmitted over independent
//! AWGN channels, and decoded jointly. Each encoder maps its image to a latent
//! grid, summarizes the latent with a small hyper representation, and spends
//! channel bandwidth per latent token according to the entropy the hyper model
//! assigns to it. The hyper representations of the two users share a joint
//! density model (a per-index bivariate Gaussian mixture), which is what lets
//! either side predict the other's statistics without seeing its data. At the
//! receiver the decoded latents are spatially aligned and concatenated so each
//! image is reconstructed with the other as side information.
//!
//! Module map:
//!
//! - [`diffcore`]: dense f64 tensors, a reverse-mode tape, primitive blocks
//!   (linear / leaky rectifier / space-to-depth resampling / attention), and a
//!   finite-difference gradient checker.
//! - [`sources`]: synthetic correlated pair generator plus PGM/PPM image IO.
//! - [`transforms`]: analysis, hyper-analysis, hyper-synthesis, and the joint
//!   synthesis transform that consumes side information.
//! - [`alignment`]: localization network, projective grid generation, and
//!   differentiable bilinear sampling.
//! - [`entropy`]: quantizers, Gaussian and Gaussian-mixture bin probabilities,
//!   code rates, and the cross-user MMSE estimator.
//! - [`jscc`]: per-token bandwidth allocation, rate-token conditioning,
//!   variable-length symbol projections, power normalization.
//! - [`channel`]: complex AWGN with counter-based reproducible noise.
//! - [`objective`]: the rate-distortion loss, PSNR, MS-SSIM, and variational
//!   diagnostics.
//! - [`training`]: Adam, cosine learning-rate schedule, the end-to-end loop,
//!   checkpointing.
//! - [`harness`]: run configuration, rate accounting, RD sweeps with ablation
//!   modes, and the oracle suite behind `oracle-check`.
//!
//! Runnable walkthroughs live in `examples/`; the `paircode` binary exposes
//! the same capabilities as subcommands (`gen-data`, `train`, `eval`,
//! `rd-sweep`, `oracle-check`).

pub mod alignment;
pub mod channel;
pub mod diffcore;
pub mod entropy;
pub mod harness;
pub mod jscc;
pub mod objective;
pub mod rng;
pub mod sources;
pub mod training;
pub mod transforms;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Backward may run once per forward; a fresh tape must be built first.
    #[error("tape already consumed by backward; run a new forward pass")]
    TapeConsumed,

    #[error("variable does not belong to this tape")]
    ForeignVar,

    /// Projective map sent a grid cell to infinity (|w'| < 1e-8).
    #[error("singular projective transform at cell ({row}, {col})")]
    SingularTransform { row: usize, col: usize },

    #[error("duplicate parameter name: {0}")]
    DuplicateParameter(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
