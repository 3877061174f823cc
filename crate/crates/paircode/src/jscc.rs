//! Variable-rate channel mapping: per-token bandwidth allocation, learned
//! rate tokens for both users, variable-length projections to complex
//! symbols, power normalization, and the inverse decoder.
//!
//! The bandwidth of latent token j is an element of a small admissible set V,
//! picked as the nearest value to eta times the token's bit cost. Both ends
//! evaluate that cost from the shared hyper latents alone (scales at the
//! conditional mean), so transmitter and receiver always agree on segment
//! lengths without any side channel.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::{Attention, Block, Linear, ParamId, ParamSet, Tape, Tensor, Var};
use crate::entropy::rate_bits_at_mean;
use crate::{Error, Result};

/// Admissible per-token bandwidths and the bits-to-channel-uses scale.
#[derive(Debug, Clone)]
pub struct RateSet {
    v: Vec<usize>,
    pub eta: f64,
}

impl RateSet {
    pub fn new(v: Vec<usize>, eta: f64) -> Result<Self> {
        if v.len() < 2 {
            return Err(Error::InvalidArgument(
                "rate set needs at least two bandwidths".into(),
            ));
        }
        if v[0] == 0 || v.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "rate set must be strictly increasing and positive, got {v:?}"
            )));
        }
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "eta must be positive and finite, got {eta}"
            )));
        }
        Ok(Self { v, eta })
    }

    pub fn default_set() -> Self {
        Self::new(vec![2, 4, 8, 12, 16, 24, 32], 0.2).expect("default set is valid")
    }

    pub fn values(&self) -> &[usize] {
        &self.v
    }

    pub fn index_of(&self, rate: usize) -> Result<usize> {
        self.v
            .iter()
            .position(|&x| x == rate)
            .ok_or_else(|| Error::InvalidArgument(format!("bandwidth {rate} not in rate set")))
    }
}

/// Nearest admissible bandwidth to eta*bits per token; ties break toward the
/// smaller value. Downstream treats the result as a constant: the loss's
/// rate terms carry the differentiable pressure on the bit costs.
pub fn allocate(bits: &[f64], rates: &RateSet) -> Result<Vec<usize>> {
    bits.iter()
        .map(|&b| {
            if !(b >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "token bit cost must be nonnegative, got {b}"
                )));
            }
            let target = rates.eta * b;
            let mut best = rates.v[0];
            let mut best_d = (target - best as f64).abs();
            for &v in &rates.v[1..] {
                let d = (target - v as f64).abs();
                if d < best_d {
                    best = v;
                    best_d = d;
                }
            }
            Ok(best)
        })
        .collect()
}

/// Own and estimated-other bandwidths, one of each per latent token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RateAllocation {
    pub k: Vec<usize>,
    pub k_star: Vec<usize>,
}

impl RateAllocation {
    pub fn new(k: Vec<usize>, k_star: Vec<usize>, rates: &RateSet) -> Result<Self> {
        if k.len() != k_star.len() {
            return Err(Error::ShapeMismatch(format!(
                "own and estimated allocations differ in length: {} vs {}",
                k.len(),
                k_star.len()
            )));
        }
        for &v in k.iter().chain(&k_star) {
            rates.index_of(v)?;
        }
        Ok(Self { k, k_star })
    }

    /// Total complex symbols n = sum of own bandwidths.
    pub fn total_symbols(&self) -> usize {
        self.k.iter().sum()
    }
}

/// Per-token bandwidths from conditional scales shaped c,h,w, anchored at
/// the conditional mean. Both ends of the link call this with the same
/// scales, which is what keeps their segment lengths in agreement.
pub fn allocation_from_scales(sigma: &Tensor, rates: &RateSet) -> Result<Vec<usize>> {
    let bits = rate_bits_at_mean(&grid_tokens(sigma)?)?;
    allocate(&bits, rates)
}

/// Plain-tensor version of the grid-to-token view: c,h,w to (h*w),c.
pub(crate) fn grid_tokens(t: &Tensor) -> Result<Tensor> {
    let shape = t.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected c,h,w grid, got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut data = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h * w {
            data[i * c + ch] = t.data()[ch * h * w + i];
        }
    }
    Tensor::new(&[h * w, c], data)
}

/// Learned additive rate embeddings: one table for the user's own bandwidth,
/// one for the estimated bandwidth of the partner stream.
pub struct RateTokens {
    pub own: ParamId,
    pub other: ParamId,
}

impl RateTokens {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        rates: &RateSet,
        c: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = Normal::new(0.0, 0.1).expect("positive std");
        let q = rates.values().len();
        let own = Tensor::from_fn(&[q, c], |_| d.sample(rng));
        let other = Tensor::from_fn(&[q, c], |_| d.sample(rng));
        Ok(Self {
            own: params.add(&format!("{name}.own"), own)?,
            other: params.add(&format!("{name}.other"), other)?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.own, self.other]
    }
}

fn conditioned_tokens(
    tape: &mut Tape,
    params: &ParamSet,
    x: Var,
    alloc: &RateAllocation,
    tokens: &RateTokens,
    rates: &RateSet,
) -> Result<Var> {
    let own_idx: Vec<usize> = alloc
        .k
        .iter()
        .map(|&v| rates.index_of(v))
        .collect::<Result<_>>()?;
    let star_idx: Vec<usize> = alloc
        .k_star
        .iter()
        .map(|&v| rates.index_of(v))
        .collect::<Result<_>>()?;
    let own_table = tape.param(params, tokens.own);
    let other_table = tape.param(params, tokens.other);
    let t_own = tape.gather_rows(own_table, &own_idx)?;
    let t_other = tape.gather_rows(other_table, &star_idx)?;
    let x = tape.add(x, t_own)?;
    tape.add(x, t_other)
}

/// Encoder side of the channel mapping: additive rate conditioning, one
/// attention pass over all tokens, then a per-rate projection c -> 2v.
pub struct JsccEncoder {
    attn: Attention,
    proj: Vec<Linear>,
    rates: RateSet,
}

impl JsccEncoder {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        rates: &RateSet,
        c: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let attn = Attention::new(params, &format!("{name}.attn"), c, rng)?;
        let proj = rates
            .values()
            .iter()
            .map(|&v| Linear::new(params, &format!("{name}.w{v}"), c, 2 * v, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            attn,
            proj,
            rates: rates.clone(),
        })
    }

    /// Map l tokens of width c to an unnormalized symbol vector of length
    /// 2n = 2 * sum(k). Serialization is token-major: token 0's symbols
    /// first, then token 1's, and so on.
    pub fn encode(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        y_tokens: Var,
        alloc: &RateAllocation,
        tokens: &RateTokens,
    ) -> Result<Var> {
        let shape = tape.shape(y_tokens).to_vec();
        if shape.len() != 2 || shape[0] != alloc.k.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} tokens, got shape {shape:?}",
                alloc.k.len()
            )));
        }
        let c = shape[1];
        let x = conditioned_tokens(tape, params, y_tokens, alloc, tokens, &self.rates)?;
        let x = self.attn.apply(tape, params, x)?;
        let mut parts = Vec::with_capacity(alloc.k.len());
        for (j, &v) in alloc.k.iter().enumerate() {
            let row = tape.gather_rows(x, &[j])?;
            let out = self.proj[self.rates.index_of(v)?].apply(tape, params, row)?;
            parts.push(tape.reshape(out, &[2 * v])?);
        }
        let _ = c;
        tape.concat_flat(&parts)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.attn.param_ids();
        for p in &self.proj {
            ids.extend(p.param_ids());
        }
        ids
    }
}

/// Decoder side: per-rate inverse projection 2v -> c, the same additive rate
/// conditioning, one attention pass.
pub struct JsccDecoder {
    attn: Attention,
    proj: Vec<Linear>,
    rates: RateSet,
}

impl JsccDecoder {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        rates: &RateSet,
        c: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let attn = Attention::new(params, &format!("{name}.attn"), c, rng)?;
        let proj = rates
            .values()
            .iter()
            .map(|&v| Linear::new(params, &format!("{name}.w{v}"), 2 * v, c, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            attn,
            proj,
            rates: rates.clone(),
        })
    }

    pub fn decode(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        s_hat: Var,
        alloc: &RateAllocation,
        tokens: &RateTokens,
    ) -> Result<Var> {
        let need = 2 * alloc.total_symbols();
        let got = tape.value(s_hat).len();
        if got != need {
            return Err(Error::ShapeMismatch(format!(
                "symbol vector has {got} reals but the allocation needs {need}"
            )));
        }
        let mut rows = Vec::with_capacity(alloc.k.len());
        let mut offset = 0usize;
        for &v in &alloc.k {
            let seg = tape.slice_flat(s_hat, offset, 2 * v)?;
            let seg = tape.reshape(seg, &[1, 2 * v])?;
            rows.push(self.proj[self.rates.index_of(v)?].apply(tape, params, seg)?);
            offset += 2 * v;
        }
        let flat = tape.concat_flat(&rows)?;
        let c = tape.value(flat).len() / alloc.k.len();
        let x = tape.reshape(flat, &[alloc.k.len(), c])?;
        let x = conditioned_tokens(tape, params, x, alloc, tokens, &self.rates)?;
        self.attn.apply(tape, params, x)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.attn.param_ids();
        for p in &self.proj {
            ids.extend(p.param_ids());
        }
        ids
    }
}

/// Scale to the exact average complex-symbol power P: s * sqrt(nP/|s|^2).
pub fn power_normalize(tape: &mut Tape, s: Var, power: f64) -> Result<Var> {
    let len = tape.value(s).len();
    if len % 2 != 0 || len == 0 {
        return Err(Error::ShapeMismatch(format!(
            "symbol vector needs a positive even number of reals, got {len}"
        )));
    }
    let energy: f64 = tape.value(s).data().iter().map(|v| v * v).sum();
    if energy <= 0.0 {
        return Err(Error::InvalidArgument(
            "cannot power-normalize a zero symbol vector".into(),
        ));
    }
    let n = (len / 2) as f64;
    let sq = tape.mul(s, s)?;
    let ss = tape.sum(sq)?;
    let inv_norm = tape.pow_const(ss, -0.5)?;
    let scale = tape.scale(inv_norm, (n * power).sqrt())?;
    tape.mul_scalar_var(s, scale)
}

/// Forward-only power normalization for replay paths.
pub fn power_normalize_tensor(s: &Tensor, power: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.input(s.clone());
    let out = power_normalize(&mut tape, v, power)?;
    Ok(tape.value(out).clone())
}

/// Serialize symbols as a count prefix (complex symbols, u64 LE) followed by
/// interleaved re/im 64-bit floats, little-endian.
pub fn write_symbols(s: &Tensor) -> Result<Vec<u8>> {
    if s.len() % 2 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "symbol tensor length {} is not a whole number of complex symbols",
            s.len()
        )));
    }
    let mut out = Vec::with_capacity(8 + 8 * s.len());
    out.extend_from_slice(&((s.len() / 2) as u64).to_le_bytes());
    for v in s.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn read_symbols(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 8 {
        return Err(Error::Parse("symbol stream shorter than its prefix".into()));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let need = 8 + 16 * n;
    if bytes.len() < need {
        return Err(Error::Parse(format!(
            "symbol stream truncated: need {need} bytes, have {}",
            bytes.len()
        )));
    }
    let data = bytes[8..need]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(&[2 * n], data)
}
