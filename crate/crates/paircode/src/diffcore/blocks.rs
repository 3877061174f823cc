//! Primitive blocks: linear, pointwise rectifier, space-to-depth resampling,
//! single-head attention.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{Tape, Var};
use super::tensor::{ParamId, ParamSet, Tensor};
use super::Block;
use crate::Result;

/// Affine map along the trailing axis: weight m×n plus bias n.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Weights drawn N(0, 1/m), bias zero.
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        m: usize,
        n: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let std = 1.0 / (m as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        let w = Tensor::from_fn(&[m, n], |_| dist.sample(rng));
        Ok(Self {
            w: params.add(&format!("{name}.w"), w)?,
            b: params.add(&format!("{name}.b"), Tensor::zeros(&[n]))?,
        })
    }

    /// All-zero weights and bias; the block starts as the constant-zero map.
    pub fn zeroed(params: &mut ParamSet, name: &str, m: usize, n: usize) -> Result<Self> {
        Ok(Self {
            w: params.add(&format!("{name}.w"), Tensor::zeros(&[m, n]))?,
            b: params.add(&format!("{name}.b"), Tensor::zeros(&[n]))?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let w = tape.param(params, self.w);
        let b = tape.param(params, self.b);
        tape.linear(x, w, b)
    }
}

impl Block for Linear {
    fn forward(&self, tape: &mut Tape, params: &ParamSet, inputs: &[Var]) -> Result<Var> {
        self.apply(tape, params, one_input(inputs)?)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

/// Pointwise rectifier with a configurable negative slope (default 0.01).
#[derive(Debug, Clone)]
pub struct Nonlinearity {
    pub slope: f64,
}

impl Default for Nonlinearity {
    fn default() -> Self {
        Self { slope: 0.01 }
    }
}

impl Nonlinearity {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.leaky_relu(x, self.slope)
    }
}

impl Block for Nonlinearity {
    fn forward(&self, tape: &mut Tape, _params: &ParamSet, inputs: &[Var]) -> Result<Var> {
        self.apply(tape, one_input(inputs)?)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        vec![]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleDirection {
    Down,
    Up,
}

/// Space-to-depth (down) or its exact inverse (up) by an integer factor.
#[derive(Debug, Clone)]
pub struct Resample {
    pub factor: usize,
    pub direction: ResampleDirection,
}

impl Resample {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self.direction {
            ResampleDirection::Down => tape.space_to_depth(x, self.factor),
            ResampleDirection::Up => tape.depth_to_space(x, self.factor),
        }
    }
}

impl Block for Resample {
    fn forward(&self, tape: &mut Tape, _params: &ParamSet, inputs: &[Var]) -> Result<Var> {
        self.apply(tape, one_input(inputs)?)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        vec![]
    }
}

/// Single-head scaled dot-product attention over l tokens of width c, with a
/// residual connection and a two-layer pointwise map.
#[derive(Debug, Clone)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ff1: Linear,
    pub ff2: Linear,
    width: usize,
}

impl Attention {
    pub fn new(params: &mut ParamSet, name: &str, c: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            wq: Linear::new(params, &format!("{name}.wq"), c, c, rng)?,
            wk: Linear::new(params, &format!("{name}.wk"), c, c, rng)?,
            wv: Linear::new(params, &format!("{name}.wv"), c, c, rng)?,
            wo: Linear::new(params, &format!("{name}.wo"), c, c, rng)?,
            ff1: Linear::new(params, &format!("{name}.ff1"), c, 2 * c, rng)?,
            ff2: Linear::new(params, &format!("{name}.ff2"), 2 * c, c, rng)?,
            width: c,
        })
    }

    pub fn apply(&self, tape: &mut Tape, params: &ParamSet, tokens: Var) -> Result<Var> {
        let shape = tape.shape(tokens).to_vec();
        if shape.len() != 2 || shape[1] != self.width {
            return Err(crate::Error::ShapeMismatch(format!(
                "attention expects l×{}, got {shape:?}",
                self.width
            )));
        }
        let q = self.wq.apply(tape, params, tokens)?;
        let k = self.wk.apply(tape, params, tokens)?;
        let v = self.wv.apply(tape, params, tokens)?;
        let kt = tape.transpose2(k)?;
        let scores = tape.matmul(q, kt)?;
        let scaled = tape.scale(scores, 1.0 / (self.width as f64).sqrt())?;
        let weights = tape.softmax_rows(scaled)?;
        let mixed = tape.matmul(weights, v)?;
        let proj = self.wo.apply(tape, params, mixed)?;
        let res = tape.add(tokens, proj)?;

        let h = self.ff1.apply(tape, params, res)?;
        let h = tape.leaky_relu(h, 0.01)?;
        let h = self.ff2.apply(tape, params, h)?;
        tape.add(res, h)
    }
}

impl Block for Attention {
    fn forward(&self, tape: &mut Tape, params: &ParamSet, inputs: &[Var]) -> Result<Var> {
        self.apply(tape, params, one_input(inputs)?)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        [
            &self.wq, &self.wk, &self.wv, &self.wo, &self.ff1, &self.ff2,
        ]
        .iter()
        .flat_map(|l| l.param_ids())
        .collect()
    }
}

fn one_input(inputs: &[Var]) -> Result<Var> {
    match inputs {
        [x] => Ok(*x),
        other => Err(crate::Error::InvalidArgument(format!(
            "block takes one input, got {}",
            other.len()
        ))),
    }
}

/// c×h×w grid viewed as (h·w)×c tokens (token per spatial cell).
pub(crate) fn grid_to_tokens(tape: &mut Tape, grid: Var) -> Result<Var> {
    let shape = tape.shape(grid).to_vec();
    match shape[..] {
        [c, h, w] => {
            let flat = tape.reshape(grid, &[c, h * w])?;
            tape.transpose2(flat)
        }
        ref other => Err(crate::Error::ShapeMismatch(format!(
            "grid_to_tokens expects c×h×w, got {other:?}"
        ))),
    }
}

/// Inverse of [`grid_to_tokens`] for the given spatial extents.
pub(crate) fn tokens_to_grid(tape: &mut Tape, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let shape = tape.shape(tokens).to_vec();
    match shape[..] {
        [l, c] if l == h * w => {
            let t = tape.transpose2(tokens)?;
            tape.reshape(t, &[c, h, w])
        }
        ref other => Err(crate::Error::ShapeMismatch(format!(
            "tokens_to_grid expects ({h}·{w})×c, got {other:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed_rng;

    #[test]
    fn linear_identity_case() {
        let mut params = ParamSet::new();
        let lin = Linear::zeroed(&mut params, "id", 3, 3).unwrap();
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        *params.value_mut(lin.w) = eye;
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(&[1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = lin.apply(&mut tape, &params, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn linear_zero_weight_bias_only() {
        let mut params = ParamSet::new();
        let lin = Linear::zeroed(&mut params, "b5", 4, 1).unwrap();
        *params.value_mut(lin.b) = Tensor::scalar(5.0).reshaped(&[1]).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_fn(&[2, 4], |i| i as f64));
        let y = lin.apply(&mut tape, &params, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn nonlinearity_definition() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(&[2], vec![2.0, -1.0]).unwrap());
        let y = Nonlinearity::default().apply(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, -0.01]);
    }

    #[test]
    fn resample_shape_contract() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[1, 4, 4]));
        let down = Resample {
            factor: 2,
            direction: ResampleDirection::Down,
        };
        let y = down.apply(&mut tape, x).unwrap();
        assert_eq!(tape.shape(y), &[4, 2, 2]);
    }

    #[test]
    fn attention_preserves_shape() {
        let mut params = ParamSet::new();
        let mut rng = keyed_rng(0, &[1]);
        let att = Attention::new(&mut params, "att", 16, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_fn(&[8, 16], |i| (i as f64 * 0.7).sin()));
        let y = att.apply(&mut tape, &params, x).unwrap();
        assert_eq!(tape.shape(y), &[8, 16]);
    }

    #[test]
    fn singleton_attention_weight_is_one() {
        // softmax over one score is exactly 1 whatever the score, so an l=1
        // output cannot depend on the query/key projections.
        let mut params = ParamSet::new();
        let mut rng = keyed_rng(0, &[2]);
        let att = Attention::new(&mut params, "att", 4, &mut rng).unwrap();
        let x = Tensor::from_fn(&[1, 4], |i| i as f64 * 0.3 - 0.5);

        let run = |params: &ParamSet, x: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.input(x.clone());
            let y = att.apply(&mut tape, params, v).unwrap();
            tape.value(y).data().to_vec()
        };
        let base = run(&params, &x);
        for v in params.value_mut(att.wq.w).data_mut() {
            *v += 10.0;
        }
        assert_eq!(run(&params, &x), base);

        // With two tokens the same perturbation must matter.
        let x2 = Tensor::from_fn(&[2, 4], |i| (i as f64 * 0.4).cos());
        let mut tape = Tape::new();
        let v2 = tape.input(x2.clone());
        let y2 = att.apply(&mut tape, &params, v2).unwrap();
        let perturbed = tape.value(y2).data().to_vec();
        for v in params.value_mut(att.wq.w).data_mut() {
            *v -= 10.0;
        }
        let mut tape = Tape::new();
        let v2 = tape.input(x2);
        let y2 = att.apply(&mut tape, &params, v2).unwrap();
        assert_ne!(tape.value(y2).data(), &perturbed[..]);
    }

    #[test]
    fn token_round_trip() {
        let mut tape = Tape::new();
        let x = Tensor::from_fn(&[3, 2, 4], |i| i as f64);
        let v = tape.input(x.clone());
        let t = grid_to_tokens(&mut tape, v).unwrap();
        assert_eq!(tape.shape(t), &[8, 3]);
        let back = tokens_to_grid(&mut tape, t, 2, 4).unwrap();
        assert_eq!(tape.value(back).data(), x.data());
    }
}
