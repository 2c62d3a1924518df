//! `ifom` — operator CLI for the de-folding/de-mixing pipeline.
//!
//! Subcommands cover the full loop: `datagen` synthesizes a labeled corpus,
//! `pretrain` runs the self-supervised phase, `finetune` attaches and trains
//! the detector, `evaluate` scores a test manifest and reports metrics,
//! `metrics` recomputes a report from a score file, and `inspect` summarizes
//! a checkpoint. Exit codes: 0 success, 1 usage/config error, 2 runtime
//! failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ifom_core::datagen::ProtocolKind;

use config::{FlagOverrides, RunConfigFile};

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags or config file; exits 1.
    #[error("{0}")]
    Usage(String),
    /// Well-formed config but the run failed (missing inputs, incompatible
    /// checkpoint, training error); exits 2.
    #[error("{0}")]
    Runtime(String),
}

impl From<ifom_core::CoreError> for CliError {
    fn from(e: ifom_core::CoreError) -> CliError {
        CliError::Runtime(e.to_string())
    }
}

fn parse_protocol(s: &str) -> std::result::Result<ProtocolKind, String> {
    ProtocolKind::parse(s).map_err(|e| e.to_string())
}

#[derive(Parser)]
#[command(
    name = "ifom",
    version,
    about = "Self-supervised pretraining and evaluation pipeline for presentation-attack detection"
)]
struct Cli {
    /// TOML run configuration (precedence: file < environment < flags).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run seed; overrides the config file and IFOM_SEED.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Output directory; overrides the config file and IFOM_OUT.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Evaluation protocol; needs [protocol] holdout values in the config.
    #[arg(long, global = true, value_parser = parse_protocol, value_name = "KIND")]
    protocol: Option<ProtocolKind>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic datasets: PNG images plus a labeled manifest.
    Datagen,
    /// Self-supervised pretraining on a manifest (labels are never read).
    Pretrain,
    /// Fine-tune a spoofness detector from a pretraining checkpoint.
    Finetune {
        /// Initialize the trunk fresh instead of loading the checkpoint.
        #[arg(long)]
        from_scratch: bool,
    },
    /// Score a test manifest and write scores, metrics, and the ROC curve.
    Evaluate,
    /// Recompute the metric report from an existing score file.
    Metrics,
    /// Print a checkpoint summary.
    Inspect {
        /// Checkpoint file to summarize.
        checkpoint: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => config::load_file(path)?,
        None => RunConfigFile::default(),
    };
    let flags = FlagOverrides {
        seed: cli.seed,
        out: cli.out.clone(),
        protocol: cli.protocol,
        from_scratch: matches!(cli.command, Command::Finetune { from_scratch: true }),
    };
    let resolved = config::resolve(file, &flags)?;
    match cli.command {
        Command::Datagen => commands::datagen(&resolved),
        Command::Pretrain => commands::pretrain(&resolved),
        Command::Finetune { .. } => commands::finetune(&resolved),
        Command::Evaluate => commands::evaluate(&resolved),
        Command::Metrics => commands::metrics(&resolved),
        Command::Inspect { checkpoint } => commands::inspect(&checkpoint),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version print to stdout and exit 0; parse errors exit 1.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Usage(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e @ CliError::Runtime(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
