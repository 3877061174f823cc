//! Push a power-normalized symbol vector through the AWGN channel and
//! compare empirical SNR against the configured value, plus the capacity
//! each SNR buys for the hyper side stream.

use paircode::channel::{noise_variance, transmit_tensor, ChannelConfig};
use paircode::diffcore::Tensor;
use paircode::harness::awgn_capacity;
use paircode::jscc::power_normalize_tensor;
use paircode::rng::keyed_rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> paircode::Result<()> {
    let complex_uses = 200_000;
    let mut rng = keyed_rng(3, &[0x736e_7231]);
    let raw = Tensor::from_fn(&[2 * complex_uses], |_| StandardNormal.sample(&mut rng));
    let s = power_normalize_tensor(&raw, 1.0)?;
    let power = s.data().iter().map(|x| x * x).sum::<f64>() / complex_uses as f64;
    println!("mean complex-symbol power after normalization: {power:.12}");

    println!("{:>7} {:>10} {:>12} {:>10}", "snr dB", "eps^2", "measured dB", "capacity");
    for snr_db in [0.0, 5.0, 10.0, 15.0] {
        let cfg = ChannelConfig::new(snr_db, 1.0, 99)?;
        let shat = transmit_tensor(&s, &cfg, 1, 0)?;
        let eps2_hat = s
            .data()
            .iter()
            .zip(shat.data())
            .map(|(a, b)| (b - a) * (b - a))
            .sum::<f64>()
            / complex_uses as f64;
        println!(
            "{:>7} {:>10.5} {:>12.4} {:>10.5}",
            snr_db,
            noise_variance(&cfg),
            10.0 * (1.0 / eps2_hat).log10(),
            awgn_capacity(snr_db),
        );
    }
    println!("no-signal sentinel: capacity(-inf) = {}", awgn_capacity(f64::NEG_INFINITY));
    Ok(())
}
