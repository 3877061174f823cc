//! Independent complex AWGN channels, one per user.
//!
//! Symbols travel as interleaved real/imaginary pairs, so a vector of n
//! complex symbols is a flat tensor of 2n reals. Complex noise of variance
//! eps2 lands as two independent real components of variance eps2/2 each
//! (circular-symmetric convention).

use rand_distr::{Distribution, Normal};

use crate::diffcore::{Tape, Tensor, Var};
use crate::rng::keyed_rng;
use crate::{Error, Result};

const TAG_CHANNEL: u64 = 0x6368_616e; // "chan"

#[derive(Debug, Clone)]
pub struct ChannelConfig {
    /// Signal-to-noise ratio in decibels. `f64::INFINITY` is the noiseless
    /// sentinel: transmit returns its input untouched.
    pub snr_db: f64,
    /// Transmit power budget P.
    pub power: f64,
    pub seed: u64,
}

impl ChannelConfig {
    pub fn new(snr_db: f64, power: f64, seed: u64) -> Result<Self> {
        if !(power > 0.0) || !power.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "channel power must be positive and finite, got {power}"
            )));
        }
        if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
            return Err(Error::InvalidArgument(format!("bad SNR {snr_db} dB")));
        }
        Ok(Self { snr_db, power, seed })
    }
}

/// Complex noise variance from the SNR definition P / eps2.
pub fn noise_variance(cfg: &ChannelConfig) -> f64 {
    if cfg.snr_db == f64::INFINITY {
        0.0
    } else {
        cfg.power / 10f64.powf(cfg.snr_db / 10.0)
    }
}

fn draw_noise(cfg: &ChannelConfig, user: u8, pair_id: u64, len: usize) -> Tensor {
    let eps2 = noise_variance(cfg);
    let mut rng = keyed_rng(cfg.seed, &[TAG_CHANNEL, user as u64, pair_id]);
    let per_component = Normal::new(0.0, (eps2 / 2.0).sqrt()).expect("nonnegative std");
    Tensor::from_fn(&[len], |_| per_component.sample(&mut rng))
}

/// Add channel noise to a plain symbol tensor. Deterministic in
/// (seed, user, pair_id) regardless of call order across pairs.
pub fn transmit_tensor(s: &Tensor, cfg: &ChannelConfig, user: u8, pair_id: u64) -> Result<Tensor> {
    check_symbols(s.shape())?;
    if cfg.snr_db == f64::INFINITY {
        return Ok(s.clone());
    }
    let noise = draw_noise(cfg, user, pair_id, s.len());
    let data = s
        .data()
        .iter()
        .zip(noise.data())
        .map(|(a, b)| a + b)
        .collect();
    Tensor::new(s.shape(), data)
}

/// Differentiable transmit: the draw is an additive constant, so gradients
/// pass through to the symbols unchanged.
pub fn transmit(tape: &mut Tape, s: Var, cfg: &ChannelConfig, user: u8, pair_id: u64) -> Result<Var> {
    check_symbols(tape.shape(s))?;
    if cfg.snr_db == f64::INFINITY {
        return Ok(s);
    }
    let noise = draw_noise(cfg, user, pair_id, tape.value(s).len());
    let n = tape.input(noise);
    tape.add(s, n)
}

fn check_symbols(shape: &[usize]) -> Result<()> {
    let len: usize = shape.iter().product();
    if len % 2 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "symbol tensors interleave re/im and need even length, got {len}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(snr_db: f64) -> ChannelConfig {
        ChannelConfig::new(snr_db, 1.0, 77).unwrap()
    }

    #[test]
    fn variance_matches_snr_definition() {
        assert!((noise_variance(&cfg(5.0)) - 0.3162278).abs() < 1e-7);
        assert_eq!(noise_variance(&cfg(0.0)), 1.0);
        let c = ChannelConfig::new(3.0103, 2.0, 0).unwrap();
        assert!((noise_variance(&c) - 1.0).abs() < 1e-4);
        assert_eq!(noise_variance(&cfg(f64::INFINITY)), 0.0);
    }

    #[test]
    fn config_rejects_bad_power_and_snr() {
        assert!(ChannelConfig::new(5.0, 0.0, 0).is_err());
        assert!(ChannelConfig::new(5.0, -1.0, 0).is_err());
        assert!(ChannelConfig::new(f64::NAN, 1.0, 0).is_err());
        assert!(ChannelConfig::new(f64::NEG_INFINITY, 1.0, 0).is_err());
    }

    #[test]
    fn noiseless_sentinel_is_exact() {
        let s = Tensor::from_fn(&[64], |i| (i as f64).sin());
        let out = transmit_tensor(&s, &cfg(f64::INFINITY), 1, 0).unwrap();
        assert_eq!(out.data(), s.data());
    }

    #[test]
    fn empirical_complex_variance_at_5db() {
        let n = 2_000_000usize; // 1e6 complex symbols
        let s = Tensor::zeros(&[n]);
        let out = transmit_tensor(&s, &cfg(5.0), 1, 3).unwrap();
        let var: f64 = out
            .data()
            .chunks(2)
            .map(|c| c[0] * c[0] + c[1] * c[1])
            .sum::<f64>()
            / (n / 2) as f64;
        assert!((var - 0.3162).abs() < 0.0032, "complex variance {var}");
        // Per-component isotropy.
        let (mut re, mut im) = (0.0, 0.0);
        for c in out.data().chunks(2) {
            re += c[0] * c[0];
            im += c[1] * c[1];
        }
        let ratio = re / im;
        assert!((ratio - 1.0).abs() < 0.02, "re:im ratio {ratio}");
        // Empirical SNR within 0.1 dB of configured.
        let snr = 10.0 * (1.0 / var).log10();
        assert!((snr - 5.0).abs() < 0.1, "empirical SNR {snr} dB");
    }

    #[test]
    fn user_streams_are_independent() {
        let n = 2_000_000usize;
        let s = Tensor::zeros(&[n]);
        let a = transmit_tensor(&s, &cfg(5.0), 1, 9).unwrap();
        let b = transmit_tensor(&s, &cfg(5.0), 2, 9).unwrap();
        let (mut dot, mut va, mut vb) = (0.0, 0.0, 0.0);
        for (x, y) in a.data().iter().zip(b.data()) {
            dot += x * y;
            va += x * x;
            vb += y * y;
        }
        let corr = dot / (va * vb).sqrt();
        assert!(corr.abs() < 0.01, "cross-correlation {corr}");
    }

    #[test]
    fn draws_are_keyed_by_seed_user_and_pair() {
        let s = Tensor::zeros(&[8]);
        let base = transmit_tensor(&s, &cfg(5.0), 1, 4).unwrap();
        let same = transmit_tensor(&s, &cfg(5.0), 1, 4).unwrap();
        assert_eq!(base.data(), same.data());
        let other_pair = transmit_tensor(&s, &cfg(5.0), 1, 5).unwrap();
        assert_ne!(base.data(), other_pair.data());
        let other_user = transmit_tensor(&s, &cfg(5.0), 2, 4).unwrap();
        assert_ne!(base.data(), other_user.data());
    }

    #[test]
    fn gradient_passes_through_noise() {
        let mut params = crate::diffcore::ParamSet::new();
        let mut tape = Tape::new();
        let s = tape.input(Tensor::from_fn(&[6], |i| i as f64 * 0.1));
        let out = transmit(&mut tape, s, &cfg(5.0), 1, 0).unwrap();
        let loss = tape.sum(out).unwrap();
        let grads = tape.backward(loss, &mut params).unwrap();
        let g = grads.wrt(s).unwrap();
        assert!(g.data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn odd_length_symbol_tensors_are_rejected() {
        let s = Tensor::zeros(&[7]);
        assert!(transmit_tensor(&s, &cfg(5.0), 1, 0).is_err());
    }
}
