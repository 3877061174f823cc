//! Per-token bandwidth allocation: the argmin over the rate ladder that
//! tracks eta times the entropy-model bit estimate, ties going to the
//! smaller bandwidth.

use paircode::jscc::{allocate, RateSet};

fn main() -> paircode::Result<()> {
    let rates = RateSet::default_set();
    println!("ladder {:?}, eta 0.2", rates.values());
    println!("{:>10} {:>10} {:>4}", "bits", "eta*bits", "k");
    for bits in [1.0, 12.0, 25.0, 49.0, 80.0, 120.0, 200.0] {
        let k = allocate(&[bits], &rates)?[0];
        println!("{:>10.1} {:>10.1} {:>4}", bits, 0.2 * bits, k);
    }

    // 15 bits at eta 0.2 targets 3.0, the exact midpoint of {2, 4}.
    let tie = allocate(&[15.0], &rates)?[0];
    println!("tie at target 3.0 between 2 and 4 resolves to k = {tie}");

    let per_token = [3.0, 40.0, 90.0, 150.0, 9.0, 60.0];
    let ks = allocate(&per_token, &rates)?;
    let total: usize = ks.iter().sum();
    println!("token costs {per_token:?}");
    println!("allocation  {ks:?}  ({total} complex symbols total)");
    Ok(())
}
