//! Command-line front end: data generation, training, evaluation,
//! rate-distortion sweeps, and the oracle release gate.
//!
//! Every subcommand reads the same flat `key = value` configuration; a
//! `--config FILE` loads one, trailing `section.key=value` arguments
//! override it. Exit code is zero only when the requested run completed
//! (and, for `oracle-check`, every oracle passed).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use paircode::harness::{
    build_model, checkpoint_path, evaluate, gen_data, oracle_check, rd_sweep, test_pairs,
    training_pairs, OracleBudget, RunConfig,
};
use paircode::training::{epoch_log_csv, train, Adam, Checkpoint, RunMode};
use paircode::{Error, Result};

#[derive(Parser)]
#[command(name = "paircode", version, about = "Distributed source-channel coding simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic correlated image pairs (PGM/PPM), both splits.
    GenData {
        /// Output directory.
        #[arg(long, default_value = "data")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigOpts,
    },
    /// Train one model and save its checkpoint.
    Train {
        /// One of joint-prior, independent-prior, no-alignment, point-to-point.
        #[arg(long, default_value = "joint-prior")]
        mode: String,
        /// Checkpoint path; defaults to the sweep layout under the
        /// configured checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Optional per-epoch CSV log destination.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigOpts,
    },
    /// Score a trained checkpoint on the held-out pairs.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run mode the checkpoint was trained under.
        #[arg(long, default_value = "joint-prior")]
        mode: String,
        #[command(flatten)]
        cfg: ConfigOpts,
    },
    /// Rate-distortion sweep over lambdas, all four modes, and seeds.
    RdSweep {
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigOpts,
    },
    /// Re-derive every frozen number with independent oracles.
    OracleCheck {
        /// Seconds-scale budget instead of the full release gate.
        #[arg(long)]
        quick: bool,
    },
}

#[derive(Args)]
struct ConfigOpts {
    /// Configuration file, UTF-8 `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trailing overrides: `section.key=value` (a leading `--` is allowed).
    #[arg(value_name = "KEY=VALUE", allow_hyphen_values = true)]
    overrides: Vec<String>,
}

impl ConfigOpts {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        for raw in &self.overrides {
            let stripped = raw.strip_prefix("--").unwrap_or(raw);
            let (key, value) = stripped.split_once('=').ok_or_else(|| {
                Error::Parse(format!("override `{raw}`: expected key=value"))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run() -> Result<bool> {
    match Cli::parse().cmd {
        Cmd::GenData { out, cfg } => {
            let cfg = cfg.load()?;
            let paths = gen_data(&cfg, &out)?;
            println!("wrote {} images to {}", paths.len(), out.display());
            Ok(true)
        }
        Cmd::Train { mode, out, log, cfg } => {
            let cfg = cfg.load()?;
            let mode = RunMode::parse(&mode)?;
            let (mut params, model) = build_model(&cfg, mode, cfg.seed)?;
            let pairs = training_pairs(&cfg)?;
            let (ckpt, logs) = train(&model, &mut params, &cfg.train_config(), &pairs)?;
            let path = out.unwrap_or_else(|| {
                checkpoint_path(&cfg.checkpoint_dir, cfg.lambda, mode, cfg.seed)
            });
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            ckpt.save(&path)?;
            if let Some(log_path) = log {
                std::fs::write(&log_path, epoch_log_csv(&logs))?;
            }
            if let Some(last) = logs.last() {
                println!(
                    "trained {} epochs ({} mode); final mean loss {:.6}",
                    logs.len(),
                    mode.label(),
                    last.mean.total
                );
            }
            println!("checkpoint {}", path.display());
            Ok(true)
        }
        Cmd::Eval { checkpoint, mode, cfg } => {
            let cfg = cfg.load()?;
            let mode = RunMode::parse(&mode)?;
            let (mut params, model) = build_model(&cfg, mode, cfg.seed)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let mut adam = Adam::new(&params);
            ckpt.restore(&mut params, &mut adam)?;
            let pairs = test_pairs(&cfg)?;
            let summary = evaluate(&model, &params, cfg.snr_db, cfg.seed, &pairs)?;
            print!("{}", summary.table());
            Ok(true)
        }
        Cmd::RdSweep { out, cfg } => {
            let cfg = cfg.load()?;
            let csv = rd_sweep(&cfg)?;
            match out {
                Some(path) => {
                    std::fs::write(&path, &csv)?;
                    println!("wrote {}", path.display());
                }
                None => print!("{csv}"),
            }
            Ok(true)
        }
        Cmd::OracleCheck { quick } => {
            let budget = if quick {
                OracleBudget::quick()
            } else {
                OracleBudget::full()
            };
            let report = oracle_check(&budget)?;
            print!("{}", report.table());
            Ok(report.all_pass())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("oracle suite reported failures");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
