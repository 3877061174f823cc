//! Short end-to-end training run on synthetic pairs: per-epoch CSV log,
//! checkpoint round trip, and bit-exact resume.

use paircode::harness::{build_model, training_pairs, RunConfig};
use paircode::training::{epoch_log_csv, resume, train, train_until, RunMode};

fn main() -> paircode::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.c_mid = 6;
    cfg.c_lat = 4;
    cfg.c_hyp = 2;
    cfg.align_hidden = 8;
    cfg.gmm_components = 2;
    cfg.n_train = 4;
    cfg.epochs = 6;
    cfg.lr_init = 1e-3;
    cfg.lr_final = 1e-4;

    let pairs = training_pairs(&cfg)?;
    let tcfg = cfg.train_config();

    let (_, logs) = {
        let (mut params, model) = build_model(&cfg, RunMode::Joint, 0)?;
        train(&model, &mut params, &tcfg, &pairs)?
    };
    print!("{}", epoch_log_csv(&logs));
    let (first, last) = (&logs[0].mean, &logs.last().expect("nonempty").mean);
    println!("mean loss {:.4} -> {:.4}", first.total, last.total);

    // Stop after two epochs, resume from the checkpoint, and compare the
    // final loss against the uninterrupted run.
    let (mut params, model) = build_model(&cfg, RunMode::Joint, 0)?;
    let (ckpt, _) = train_until(&model, &mut params, &tcfg, &pairs, 2)?;
    let (mut params2, model2) = build_model(&cfg, RunMode::Joint, 0)?;
    let (_, logs2) = resume(&model2, &mut params2, &ckpt, &pairs)?;
    let resumed = logs2.last().expect("nonempty").mean.total;
    println!(
        "resume after epoch 2 reproduces the final loss: {} (delta {:e})",
        resumed == last.total,
        (resumed - last.total).abs()
    );
    Ok(())
}
