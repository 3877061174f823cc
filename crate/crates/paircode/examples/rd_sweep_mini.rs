//! Miniature rate-distortion sweep: one lambda, one seed, all four run
//! modes, trained inline and evaluated on held-out pairs.

use paircode::harness::{rd_sweep, RunConfig};

fn main() -> paircode::Result<()> {
    let dir = tempfile::tempdir()?;
    let mut cfg = RunConfig::default();
    cfg.c_mid = 6;
    cfg.c_lat = 4;
    cfg.c_hyp = 2;
    cfg.align_hidden = 8;
    cfg.gmm_components = 2;
    cfg.n_train = 2;
    cfg.n_test = 2;
    cfg.sweep_epochs = 2;
    cfg.lr_init = 1e-3;
    cfg.lr_final = 1e-4;
    cfg.sweep_lambdas = vec![0.01];
    cfg.sweep_seeds = vec![0];
    cfg.train_inline = true;
    cfg.checkpoint_dir = dir.path().to_path_buf();

    print!("{}", rd_sweep(&cfg)?);
    Ok(())
}
