//! Release gate: every frozen number re-derived by an independent oracle at
//! full budget, plus end-to-end training properties and the directional
//! two-user experiments. One summary line prints per criterion; run with
//! `cargo test --test acceptance -- --nocapture` to see them all.

use std::time::Instant;

use paircode::entropy::bin_prob;
use paircode::harness::{
    allocation_mismatches, awgn_capacity, build_model, empirical_snr_error, evaluate,
    factorization_prob_error, factorization_rate_error, gmm_bin_mc_error, grad_suite,
    latent_bin_error, mmse_exact_error, mmse_mc_error, normalization_defect,
    power_constraint_error, quantizer_ks, rate_per_pixel, residual_variance_error, test_pairs,
    training_pairs, RunConfig,
};
use paircode::training::{epoch_log_csv, resume, train, train_until, RunMode};

fn report(n: usize, line: &str, pass: bool) {
    println!(
        "[acceptance {n:>2}/11] {line}: {}",
        if pass { "pass" } else { "FAIL" }
    );
    assert!(pass, "criterion {n}: {line}");
}

/// Small model over 16x16 sources; training-speed knobs tightened so the
/// desk-scale runs move in tens of epochs.
fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.c_mid = 6;
    cfg.c_lat = 4;
    cfg.c_hyp = 2;
    cfg.align_hidden = 8;
    cfg.gmm_components = 2;
    cfg.lr_init = 1e-3;
    cfg.lr_final = 1e-4;
    cfg
}

#[test]
fn probability_oracles_match_quadrature_and_monte_carlo() {
    let t0 = Instant::now();
    let latent = latent_bin_error(10, &bin_prob);
    let gmm = gmm_bin_mc_error(20, 10_000_000, 0x676d_6d31).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    report(
        1,
        &format!(
            "gaussian bin vs quadrature {latent:.2e} (bound 1e-8) on a 10^3 grid; \
             gmm bin vs 1e7-draw mc {gmm:.2} se (bound 3) on 20 priors; {secs:.1}s (limit 120)"
        ),
        latent <= 1e-8 && gmm <= 3.0 && secs < 120.0,
    );
}

#[test]
fn gmm_bin_mass_is_normalized() {
    let defect = normalization_defect();
    report(
        2,
        &format!("integer-bin mass over [-20,20]^2 within {defect:.2e} of 1 from below (bound 1e-6)"),
        defect.is_finite() && defect <= 1e-6,
    );
}

#[test]
fn diagonal_priors_factorize() {
    let p = factorization_prob_error();
    let r = factorization_rate_error();
    report(
        3,
        &format!("diagonal-covariance joint = product: prob err {p:.2e} (1e-9), rate err {r:.2e} (1e-6)"),
        p <= 1e-9 && r <= 1e-6,
    );
}

#[test]
fn mmse_estimator_matches_monte_carlo_and_linear_case() {
    let exact = mmse_exact_error();
    let mc = mmse_mc_error(10_000_000, 0x6d6d_7365).unwrap();
    report(
        4,
        &format!(
            "conditional mean: rho=0.8 single-component case off by {exact:.1e} (exact), \
             rejection mc {mc:.2} se (bound 3) at 1e7 draws"
        ),
        exact == 0.0 && mc <= 3.0,
    );
}

#[test]
fn every_block_family_passes_gradient_checks() {
    let rows = grad_suite(10).unwrap();
    let worst = rows
        .iter()
        .max_by(|a, b| a.observed.total_cmp(&b.observed))
        .unwrap();
    report(
        5,
        &format!(
            "{} block families, 10 seeded points each; worst {} at {:.2e} (bound 1e-4)",
            rows.len(),
            worst.name,
            worst.observed
        ),
        rows.len() == 12 && rows.iter().all(|r| r.pass),
    );
}

#[test]
fn channel_calibration_holds_over_a_million_symbols() {
    let snr = empirical_snr_error(1_000_000).unwrap();
    let power = power_constraint_error(1_000_000).unwrap();
    report(
        6,
        &format!("empirical snr off by {snr:.4} dB (0.1); power off by {power:.1e} (1e-9)"),
        snr <= 0.1 && power <= 1e-9,
    );
}

#[test]
fn bandwidth_allocation_matches_brute_force_with_ties() {
    let mismatches = allocation_mismatches(10_000, 0x616c_6c6f).unwrap();
    report(
        7,
        &format!("argmin vs exhaustive scan: {mismatches} mismatches over 1e4 cases incl. exact ties"),
        mismatches == 0.0,
    );
}

#[test]
fn channel_and_quantizer_residuals_match_the_modeled_densities() {
    let var = residual_variance_error(1_000_000).unwrap();
    let ks = quantizer_ks(1_000_000).unwrap();
    report(
        8,
        &format!(
            "received-symbol residual variance off by {var:.4} relative (0.02); \
             quantizer noise vs uniform ks {ks:.4} (0.005) over 1e6 draws"
        ),
        var <= 0.02 && ks < 0.005,
    );
}

#[test]
fn training_smoke_is_reproducible_and_resumable() {
    let mut cfg = tiny_config();
    cfg.n_train = 4;
    cfg.epochs = 100; // batch 2 over 4 pairs: 200 optimizer steps
    cfg.batch_size = 2;
    cfg.lambda = 0.01;
    cfg.seed = 0;

    let pairs = training_pairs(&cfg).unwrap();
    let tcfg = cfg.train_config();

    let t0 = Instant::now();
    let (mut p1, m1) = build_model(&cfg, RunMode::Joint, 0).unwrap();
    let (ck1, logs1) = train(&m1, &mut p1, &tcfg, &pairs).unwrap();
    let secs = t0.elapsed().as_secs_f64();

    let improved = logs1.last().unwrap().mean.total < logs1[0].mean.total;

    let (mut p2, m2) = build_model(&cfg, RunMode::Joint, 0).unwrap();
    let (ck2, logs2) = train(&m2, &mut p2, &tcfg, &pairs).unwrap();
    let reproducible =
        ck1.to_bytes() == ck2.to_bytes() && epoch_log_csv(&logs1) == epoch_log_csv(&logs2);

    let (mut p3, m3) = build_model(&cfg, RunMode::Joint, 0).unwrap();
    let (half, _) = train_until(&m3, &mut p3, &tcfg, &pairs, 50).unwrap();
    let (mut p4, m4) = build_model(&cfg, RunMode::Joint, 0).unwrap();
    let (resumed, _) = resume(&m4, &mut p4, &half, &pairs).unwrap();
    let resume_ok = resumed.to_bytes() == ck1.to_bytes();

    report(
        9,
        &format!(
            "200 steps, seed 0, 4 pairs, lambda 0.01: loss {:.4} -> {:.4}; rerun bit-identical {}; \
             resume-from-half bit-identical {}; {secs:.0}s (limit 600)",
            logs1[0].mean.total,
            logs1.last().unwrap().mean.total,
            reproducible,
            resume_ok
        ),
        improved && reproducible && resume_ok && secs < 600.0,
    );
}

#[test]
fn joint_coding_beats_the_ablations_on_correlated_sources() {
    let t0 = Instant::now();
    let seeds = [0u64, 1, 2];

    // Per (mode, seed): mean hyper code length, mean PSNR, mean rate.
    let run = |mode: RunMode, seed: u64| -> (f64, f64, f64) {
        let mut cfg = tiny_config();
        cfg.shared_gain = 1.0;
        cfg.detail_gain = 0.05;
        cfg.n_train = 256;
        cfg.n_test = 16;
        cfg.epochs = 50;
        cfg.lambda = 0.01;
        cfg.seed = seed;
        let train_set = training_pairs(&cfg).unwrap();
        let test_set = test_pairs(&cfg).unwrap();
        let (mut params, model) = build_model(&cfg, mode, seed).unwrap();
        train(&model, &mut params, &cfg.train_config(), &train_set).unwrap();
        let s = evaluate(&model, &params, cfg.snr_db, seed, &test_set).unwrap();
        (
            s.rate[0].hyper_bits,
            (s.psnr[0] + s.psnr[1]) / 2.0,
            (s.rate[0].r + s.rate[1].r) / 2.0,
        )
    };

    let mut mean = [0.0f64; 3]; // joint r_z, independent r_z, p2p psnr
    let mut joint_psnr = 0.0;
    let mut joint_r = 0.0;
    let mut p2p_r = 0.0;
    for &seed in &seeds {
        let (jz, jp, jr) = run(RunMode::Joint, seed);
        let (iz, ip, ir) = run(RunMode::IndependentPrior, seed);
        let (_, pp, pr) = run(RunMode::PointToPoint, seed);
        println!(
            "[acceptance 10/11]   seed {seed}: hyper bits joint {jz:.2} vs independent {iz:.2}; \
             psnr joint {jp:.3} (r {jr:.4}) vs point-to-point {pp:.3} (r {pr:.4}); \
             independent psnr {ip:.3} (r {ir:.4})"
        );
        mean[0] += jz / seeds.len() as f64;
        mean[1] += iz / seeds.len() as f64;
        mean[2] += pp / seeds.len() as f64;
        joint_psnr += jp / seeds.len() as f64;
        joint_r += jr / seeds.len() as f64;
        p2p_r += pr / seeds.len() as f64;
    }
    let secs = t0.elapsed().as_secs_f64();
    report(
        10,
        &format!(
            "50 epochs, 3 seeds, shared gain 1.0: joint hyper bits {:.2} <= independent {:.2}; \
             full-model psnr {joint_psnr:.3} (r {joint_r:.4}) >= point-to-point {:.3} (r {p2p_r:.4}); \
             {secs:.0}s (limit 7200)",
            mean[0], mean[1], mean[2]
        ),
        mean[0] <= mean[1] && joint_psnr >= mean[2] && secs < 7200.0,
    );
}

#[test]
fn rate_accounting_reproduces_the_worked_example() {
    let cap = awgn_capacity(5.0);
    let r = rate_per_pixel(128.0, 64.0, cap, 1, 16, 32).unwrap();
    report(
        11,
        &format!("capacity(5 dB) = {cap:.6} (2.0574 at 1e-4); r = {r:.6} (0.28038 at 1e-5)"),
        (cap - 2.0574).abs() <= 1e-4 && (r - 0.28038).abs() <= 1e-5,
    );
}
