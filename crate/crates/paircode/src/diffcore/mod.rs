//! Differentiable-compute substrate.
//!
//! Dense row-major f64 tensors, a parameter store with gradient accumulators,
//! a reverse-mode tape, the primitive blocks everything else is assembled
//! from, and a finite-difference gradient checker.
//!
//! The contract, relied on by every module downstream:
//!
//! - a forward pass records nodes on a [`Tape`]; [`Tape::backward`] walks the
//!   record once, accumulating into [`ParamSet`] gradients (never
//!   overwriting), and consumes the tape;
//! - a second backward on the same tape is an error;
//! - every shipped [`Block`] passes [`grad_check`] at 1e-4 relative error.

mod blocks;
mod gradcheck;
mod tape;
mod tensor;

pub use blocks::{Attention, Linear, Nonlinearity, Resample, ResampleDirection};
pub(crate) use blocks::{grid_to_tokens, tokens_to_grid};
pub(crate) use gradcheck::normal_inputs;
pub use gradcheck::{grad_check, grad_check_seeded};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{ParamId, ParamSet, Parameter, Tensor};

use crate::Result;

/// A differentiable unit: owns parameter handles, maps input variables to one
/// output variable on the caller's tape.
pub trait Block {
    fn forward(&self, tape: &mut Tape, params: &ParamSet, inputs: &[Var]) -> Result<Var>;

    /// Handles of every parameter this block reads.
    fn param_ids(&self) -> Vec<ParamId>;
}
