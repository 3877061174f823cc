//! Two gradient audits: finite-difference checks of every block family,
//! then a flow audit that flags parameters no training batch ever touched.

use paircode::harness::{build_model, grad_suite, training_pairs, RunConfig};
use paircode::training::{gradient_flow_audit, is_rate_projection, train_until, RunMode};

fn main() -> paircode::Result<()> {
    println!("finite-difference suite (2 seeded points per block):");
    for row in grad_suite(2)? {
        println!(
            "  {:<24} {:>10.2e}  {}",
            row.name,
            row.observed,
            if row.pass { "pass" } else { "FAIL" }
        );
    }

    let mut cfg = RunConfig::default();
    cfg.c_mid = 6;
    cfg.c_lat = 4;
    cfg.c_hyp = 2;
    cfg.align_hidden = 8;
    cfg.gmm_components = 2;
    cfg.n_train = 4;
    cfg.epochs = 2;
    cfg.lr_init = 1e-3;
    cfg.lr_final = 1e-4;

    let pairs = training_pairs(&cfg)?;
    let (mut params, model) = build_model(&cfg, RunMode::Joint, 0)?;
    // One epoch first: the localizer head is zero-initialized, so its
    // upstream layers only see gradient after the first update.
    train_until(&model, &mut params, &cfg.train_config(), &pairs, 1)?;
    let silent = gradient_flow_audit(&model, &mut params, &cfg.train_config(), &pairs, 4)?;
    let unexplained: Vec<&String> = silent.iter().filter(|n| !is_rate_projection(n)).collect();
    println!(
        "flow audit: {} parameters silent, {} outside the per-rate allowlist",
        silent.len(),
        unexplained.len()
    );
    for name in unexplained {
        println!("  silent: {name}");
    }
    Ok(())
}
