//! `nextvisit` command-line driver.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;
use nextvisit::config::RunConfig;
use nextvisit::pipeline::{
    cmd_eval_pretrain, cmd_eval_zeroshot, cmd_gen, cmd_sweep_delta, cmd_train, cmd_vocab, dump_mask, PipelineError, RunPaths,
};

#[derive(Debug, Parser)]
#[command(name = "nextvisit", version, about = "Next-visit pretraining and evaluation on synthetic EHR cohorts")]
struct Cli {
    /// TOML run configuration; unset keys take their defaults. Without it the
    /// run directory's config.toml is used when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic cohort and its train/val/test split.
    Gen,
    /// Build the vocabulary from the training split.
    Vocab,
    /// Pretrain the model.
    Train {
        /// Continue from train/last.ckpt.
        #[arg(long)]
        resume: bool,
    },
    /// Next-visit precision, recall and on-time rate for the configured condition.
    EvalPretrain {
        /// Defaults to train/final.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate one model per decay value.
    SweepDelta {
        /// Comma-separated decay values; replaces `sweep_deltas`.
        #[arg(long, value_delimiter = ',')]
        deltas: Option<Vec<f64>>,
    },
    /// Zero-shot risk forecasting with bootstrap intervals.
    EvalZeroshot {
        /// Defaults to train/final.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated horizons in days; replaces `horizons_days`.
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<u32>>,
    },
    /// Inspection helpers.
    Debug {
        #[command(subcommand)]
        what: DebugCommand,
    },
}

#[derive(Debug, Subcommand)]
enum DebugCommand {
    /// Print the attention mask of the first packed validation row.
    DumpMask {
        #[arg(long, default_value_t = 48)]
        max_tokens: usize,
    },
}

/// Explicit `--config`, else the echo left in the run directory, else defaults.
fn load_config(cli: &Cli, paths: &RunPaths) -> Result<RunConfig, PipelineError> {
    let echoed = paths.config();
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None if echoed.exists() => RunConfig::load(&echoed)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let paths = RunPaths::new(&cli.out);
    let mut cfg = load_config(&cli, &paths)?;
    match cli.command {
        Command::Gen => {
            let s = cmd_gen(&cfg, &paths)?;
            println!("patients: train {} val {} test {}; label sets {}", s.train, s.val, s.test, s.label_sets);
        }
        Command::Vocab => {
            let v = cmd_vocab(&cfg, &paths)?;
            println!("vocabulary: {} tokens", v.len());
        }
        Command::Train { resume } => {
            let report = cmd_train(&cfg, &paths, resume)?;
            if let Some(last) = report.log.last() {
                println!("step {} train loss {}", last.step, fmt_opt(last.train_loss));
            }
            if let Some((step, loss)) = report.best {
                println!("best val loss {loss:.6} at step {step}");
            }
        }
        Command::EvalPretrain { checkpoint } => {
            let e = cmd_eval_pretrain(&cfg, &paths, checkpoint.as_deref())?;
            println!(
                "threshold {:.4} precision {} recall {} on-time rate {} ({}/{})",
                e.threshold,
                fmt_opt(e.test.precision),
                fmt_opt(e.test.recall),
                fmt_opt(e.on_time.rate),
                e.on_time.tp_on_time,
                e.on_time.tp_total
            );
        }
        Command::SweepDelta { deltas } => {
            if let Some(d) = deltas {
                cfg.sweep_deltas = d;
            }
            for row in cmd_sweep_delta(&cfg, &paths)? {
                println!(
                    "delta {} precision {} recall {} on-time rate {}",
                    row.delta,
                    fmt_opt(row.eval.test.precision),
                    fmt_opt(row.eval.test.recall),
                    fmt_opt(row.eval.on_time.rate)
                );
            }
        }
        Command::EvalZeroshot { checkpoint, horizons } => {
            if let Some(h) = horizons {
                cfg.horizons_days = h;
            }
            for r in cmd_eval_zeroshot(&cfg, &paths, checkpoint.as_deref())? {
                println!(
                    "{}d: windows {} positives {} AUROC {:.4} [{:.4}, {:.4}] AUPRC {:.4} [{:.4}, {:.4}]",
                    r.horizon_days, r.counts.included, r.n_positive, r.auroc, r.auroc_ci.0, r.auroc_ci.1, r.auprc, r.auprc_ci.0, r.auprc_ci.1
                );
            }
        }
        Command::Debug {
            what: DebugCommand::DumpMask { max_tokens },
        } => print!("{}", dump_mask(&cfg, &paths, max_tokens)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
