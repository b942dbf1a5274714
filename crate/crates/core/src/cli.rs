//! Command-line entry points: `train`, `eval`, `synth`, `pl-sim`.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error. Logs go to stderr;
//! `eval` prints its report as JSON on stdout.

use crate::config::TrainConfig;
use crate::data::{scan_dataset, synth_generate, write_dataset};
use crate::engine::plsim::{pl_accuracy_experiment, rows_to_csv, PlSimOptions};
use crate::engine::{evaluate, fit, TrainState};
use crate::error::{HermesError, Result};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(name = "hermes", version, about = "Semi-supervised dual-branch tumor segmentation and classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Config file (key = value lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, repeatable; `--set seed=7` beats HERMES_SEED.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None => TrainConfig::default(),
        };
        if let Ok(seed) = std::env::var("HERMES_SEED") {
            let seed = seed.parse::<u64>().map_err(|_| {
                HermesError::Config(format!("HERMES_SEED must be an integer, got `{seed}`"))
            })?;
            cfg.seed = seed;
        }
        for kv in &self.set {
            let (key, value) = kv.split_once('=').ok_or(UsageError(format!(
                "--set expects KEY=VALUE, got `{kv}`"
            )))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| UsageError(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

// Usage errors exit 1; runtime errors exit 2.
struct UsageError(String);

impl From<UsageError> for HermesError {
    fn from(u: UsageError) -> Self {
        HermesError::Config(format!("usage: {}", u.0))
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a dataset directory and write metrics + checkpoints.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset root (benign/ and malignant/ with *_mask.png files).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for metrics.jsonl and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Number of training samples that keep annotations.
        #[arg(long = "n-labeled")]
        n_labeled: Option<usize>,
        /// Validation fraction split off first.
        #[arg(long = "val-fraction", default_value_t = 0.3)]
        val_fraction: f64,
        /// Drop unlabeled samples entirely (supervised-only baseline).
        #[arg(long = "sup-only", default_value_t = false)]
        sup_only: bool,
        /// Resume from a checkpoint blob.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on every labeled sample under --data.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write a synthetic dataset in the on-disk layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "image-size", default_value_t = 96)]
        image_size: usize,
    },
    /// Pseudo-label selection-strategy comparison; writes a CSV.
    PlSim {
        /// Output CSV path (epoch,strategy,pl_accuracy,coverage).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long = "n-labeled", default_value_t = 50)]
        n_labeled: usize,
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        #[arg(long = "image-size", default_value_t = 24)]
        image_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run_command(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            data,
            out,
            n_labeled,
            val_fraction,
            sup_only,
            resume,
        } => {
            let cfg = config.resolve()?;
            let mut dataset = scan_dataset(&data)?;
            let total = dataset.index.labeled.len();
            let n_train = total - (total as f64 * val_fraction).round() as usize;
            let n_labeled = n_labeled.unwrap_or(n_train);
            dataset.split_labeled(n_labeled, val_fraction, cfg.seed)?;
            if sup_only {
                dataset.drop_unlabeled();
            }
            log::info!(
                "train: {} labeled / {} unlabeled / {} val",
                dataset.index.labeled.len(),
                dataset.index.unlabeled.len(),
                dataset.index.val.len()
            );
            let outcome = fit(&cfg, &dataset, &out, resume.as_deref())?;
            log::info!(
                "best dice {:.4} acc {:.4}; last dice {:.4} acc {:.4}",
                outcome.best.dice_mean,
                outcome.best.accuracy,
                outcome.last.dice_mean,
                outcome.last.accuracy
            );
            println!(
                "{}",
                serde_json::json!({
                    "best": outcome.best,
                    "last": outcome.last,
                    "metrics": outcome.metrics_path,
                    "best_checkpoint": outcome.best_checkpoint,
                })
            );
            Ok(())
        }
        Command::Eval {
            config,
            checkpoint,
            data,
        } => {
            let cfg = config.resolve()?;
            if !checkpoint.exists() {
                return Err(HermesError::Checkpoint(format!(
                    "checkpoint not found: {}",
                    checkpoint.display()
                )));
            }
            let state = TrainState::load_checkpoint(cfg.clone(), &checkpoint)?;
            let dataset = scan_dataset(&data)?;
            let samples: Vec<_> = dataset
                .index
                .labeled
                .iter()
                .map(|id| dataset.load_full(id))
                .collect::<Result<_>>()?;
            let report = evaluate(&state.model, &cfg, &samples)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report)
                    .expect("eval report serializes")
            );
            Ok(())
        }
        Command::Synth {
            out,
            n,
            seed,
            image_size,
        } => {
            if n == 0 {
                return Err(UsageError("--n must be at least 1".into()).into());
            }
            let samples = synth_generate(n, image_size, seed);
            write_dataset(&out, &samples)?;
            log::info!("wrote {n} samples to {}", out.display());
            Ok(())
        }
        Command::PlSim {
            out,
            n,
            n_labeled,
            epochs,
            image_size,
            seed,
        } => {
            let opts = PlSimOptions {
                n_samples: n,
                n_labeled,
                epochs,
                image_size,
                seed,
                ..PlSimOptions::default()
            };
            let rows = pl_accuracy_experiment(&opts)?;
            std::fs::write(&out, rows_to_csv(&rows)).map_err(|e| HermesError::io(&out, e))?;
            log::info!("wrote {} rows to {}", rows.len(), out.display());
            Ok(())
        }
    }
}

/// Parses argv (including the program name) and runs; returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with zero exit.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{e}");
            return 1;
        }
    };
    match run_command(cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string();
            if msg.starts_with("config error: usage:") {
                eprintln!("{msg}");
                1
            } else {
                eprintln!("error: {msg}");
                2
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_command_is_usage_error() {
        assert_eq!(run(["hermes", "frobnicate"]), 1);
        assert_eq!(run(["hermes", "train"]), 1); // missing required flags
    }

    #[test]
    fn bad_set_key_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("d");
        let code = run([
            "hermes",
            "train",
            "--data",
            dir.path().to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--set",
            "not_a_key=1",
        ]);
        assert_eq!(code, 1);
    }

    #[test]
    fn missing_checkpoint_is_runtime_error() {
        let dir = tempfile::tempdir().unwrap();
        let code = run([
            "hermes",
            "eval",
            "--checkpoint",
            dir.path().join("missing.ckpt").to_str().unwrap(),
            "--data",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(code, 2);
    }
}
