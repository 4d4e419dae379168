//! `attn-abft`: propagation studies, correction campaigns, detection
//! frequency optimization and overhead timing from one JSON config.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use attn_abft::AbftError;
use clap::{Parser, Subcommand};

use config::{Format, Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "attn-abft",
    version,
    about = "Checksum-protected attention: fault studies and tuning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run config; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed (and ATTN_ABFT_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides ATTN_ABFT_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Inject single faults into an unprotected forward and tabulate the
    /// patterns they leave downstream.
    Study,
    /// Inject faults into the protected forward and report detection and
    /// correction rates.
    Campaign,
    /// Choose per-section detection frequencies for a coverage target.
    Optimize,
    /// Time protected against unprotected forwards.
    Bench,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] AbftError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Infeasible(String),
    #[error("{0}")]
    Uncorrectable(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Core(AbftError::InvalidConfig(_)) => 2,
            CliError::Infeasible(_) | CliError::Uncorrectable(_) => 3,
            _ => 1,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    cfg.apply(Overrides {
        seed: cli.seed,
        out_dir: cli.out,
        threads: cli.threads,
        format: cli.format,
    })?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Study => commands::study(&cfg),
        Command::Campaign => commands::campaign(&cfg),
        Command::Optimize => commands::optimize(&cfg),
        Command::Bench => commands::bench(&cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("attn-abft: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
