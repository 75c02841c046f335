use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ctp_cli::formats::config::{read_config, RunConfig};
use ctp_cli::pipeline;
use ctp_cli::CliResult;
use ctp_core::trainer::Baseline;

/// Causal trajectory prediction pipeline.
#[derive(Parser)]
#[command(name = "ctp", version, about)]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed override (flag > config > default).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel sections (or CTP_WORKERS).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset family (or import a CSV) and write splits.
    Gen {
        /// Output directory for train/val/test files.
        #[arg(long)]
        out: PathBuf,
        /// Import a long-format CSV (sample_id,time,feature,value) instead
        /// of simulating.
        #[arg(long)]
        from_csv: Option<PathBuf>,
        /// Fraction of each subject's visits used as encoder input when
        /// importing.
        #[arg(long, default_value_t = 0.5)]
        input_fraction: f64,
    },
    /// Train the pilot model (or a baseline ablation).
    Train {
        /// Directory holding the dataset splits.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Train an ablation instead: "neural-ode" or "linear-ode".
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Vote the causal mask into certainty and retrain the reference model.
    Identify {
        #[arg(long)]
        dataset: PathBuf,
        /// Pilot checkpoint (supplies the model-quality threshold).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the min-max treatment ensemble from the reference model.
    Ensemble {
        #[arg(long)]
        dataset: PathBuf,
        /// Reference (star) checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply the configured do-intervention and write bounds + series.
    Treat {
        #[arg(long)]
        dataset: PathBuf,
        /// Ensemble file.
        #[arg(long)]
        ensemble: PathBuf,
        /// Treatment spec file overriding the config block.
        #[arg(long)]
        treatment: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute all metrics for a run.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        /// Checkpoint to evaluate (usually the star model).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Pilot checkpoint for raw connectivity scores.
        #[arg(long)]
        pilot: Option<PathBuf>,
        /// Bounds file for treatment metrics.
        #[arg(long)]
        bounds: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a combined table from metric report files.
    Report {
        /// Metric report files.
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => read_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn workers(cli: &Cli) -> usize {
    cli.workers
        .unwrap_or_else(|| ctp_cli::exec::ThreadPool::from_env().workers)
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = load_config(&cli)?;
    let n_workers = workers(&cli);
    match &cli.command {
        Command::Gen {
            out,
            from_csv,
            input_fraction,
        } => match from_csv {
            Some(csv) => pipeline::stage_import(&cfg, csv, out, *input_fraction),
            None => pipeline::stage_gen(&cfg, out),
        },
        Command::Train {
            dataset,
            out,
            baseline,
        } => {
            let baseline = match baseline.as_deref() {
                None => None,
                Some("neural-ode") => Some(Baseline::NeuralOde),
                Some("linear-ode") => Some(Baseline::LinearOde),
                Some(other) => {
                    return Err(ctp_cli::CliError::Schema(format!(
                        "unknown baseline {other:?} (expected neural-ode or linear-ode)"
                    )))
                }
            };
            pipeline::stage_train(&cfg, dataset, out, baseline)
        }
        Command::Identify {
            dataset,
            checkpoint,
            out,
        } => pipeline::stage_identify(&cfg, dataset, checkpoint, out, n_workers),
        Command::Ensemble {
            dataset,
            checkpoint,
            out,
        } => pipeline::stage_ensemble(&cfg, dataset, checkpoint, out, n_workers),
        Command::Treat {
            dataset,
            ensemble,
            treatment,
            out,
        } => pipeline::stage_treat(&cfg, dataset, ensemble, treatment.as_deref(), out),
        Command::Eval {
            dataset,
            checkpoint,
            pilot,
            bounds,
            out,
        } => pipeline::stage_eval(
            &cfg,
            dataset,
            checkpoint,
            pilot.as_deref(),
            bounds.as_deref(),
            out,
        ),
        Command::Report { metrics } => pipeline::stage_report(metrics),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
