//! Finite-difference verification of backward rules.
//!
//! The scalarizing function is the plain sum of the block output. For every
//! input element and every parameter element, the analytic gradient is
//! compared against a central difference; the reported figure is the maximum
//! relative error |a−n| / max(1, |a|, |n|) over all coordinates.

use super::tape::Tape;
use super::tensor::{ParamSet, Tensor};
use super::Block;
use crate::{Error, Result};

fn scalar_forward<B: Block + ?Sized>(
    block: &B,
    params: &ParamSet,
    inputs: &[Tensor],
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = block.forward(&mut tape, params, &vars)?;
    let loss = tape.sum(out)?;
    tape.value(loss).item()
}

/// Max relative error between analytic and central-difference gradients of
/// sum(forward) over every input and parameter coordinate.
///
/// `eps` must lie in [1e-7, 1e-3]. Parameter values are restored bit-exactly;
/// parameter grads are zeroed before and after.
pub fn grad_check<B: Block + ?Sized>(
    block: &B,
    params: &mut ParamSet,
    inputs: &[Tensor],
    eps: f64,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "grad_check step {eps} outside [1e-7, 1e-3]"
        )));
    }

    params.zero_grads();
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = block.forward(&mut tape, params, &vars)?;
    let loss = tape.sum(out)?;
    let grads = tape.backward(loss, params)?;

    let analytic_inputs: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .wrt(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();
    let ids = block.param_ids();
    let analytic_params: Vec<Tensor> = ids.iter().map(|&id| params.grad(id).clone()).collect();
    params.zero_grads();

    let mut max_err: f64 = 0.0;
    let mut record = |analytic: f64, numeric: f64| -> Result<()> {
        if !analytic.is_finite() || !numeric.is_finite() {
            return Err(Error::NonFinite("grad_check comparison".into()));
        }
        let err = (analytic - numeric).abs() / 1.0_f64.max(analytic.abs()).max(numeric.abs());
        max_err = max_err.max(err);
        Ok(())
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, analytic) in analytic_inputs.iter().enumerate() {
        for j in 0..work[ti].len() {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + eps;
            let up = scalar_forward(block, params, &work)?;
            work[ti].data_mut()[j] = orig - eps;
            let down = scalar_forward(block, params, &work)?;
            work[ti].data_mut()[j] = orig;
            record(analytic.data()[j], (up - down) / (2.0 * eps))?;
        }
    }

    for (&id, analytic) in ids.iter().zip(&analytic_params) {
        for j in 0..params.value(id).len() {
            let orig = params.value(id).data()[j];
            params.value_mut(id).data_mut()[j] = orig + eps;
            let up = scalar_forward(block, params, &work)?;
            params.value_mut(id).data_mut()[j] = orig - eps;
            let down = scalar_forward(block, params, &work)?;
            params.value_mut(id).data_mut()[j] = orig;
            record(analytic.data()[j], (up - down) / (2.0 * eps))?;
        }
    }

    Ok(max_err)
}

/// Runs [`grad_check`] at several seeded input points and returns the worst
/// error. `gen` maps a seed to the block's input tensors.
pub fn grad_check_seeded<B: Block + ?Sized>(
    block: &B,
    params: &mut ParamSet,
    eps: f64,
    seeds: impl IntoIterator<Item = u64>,
    gen: impl Fn(u64) -> Vec<Tensor>,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for seed in seeds {
        worst = worst.max(grad_check(block, params, &gen(seed), eps)?);
    }
    Ok(worst)
}

/// Standard-normal input tensors for seeded gradient checks.
pub(crate) fn normal_inputs(seed: u64, shapes: &[&[usize]]) -> Vec<Tensor> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = crate::rng::keyed_rng(seed, &[0x6772_6164]);
    shapes
        .iter()
        .map(|shape| Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng)))
        .collect()
}
