//! Command-line experiment runner around `pinc-core`.
//!
//! Four verbs cover the experimental protocol: `train` fits a surrogate
//! from a config file, `evaluate` measures its self-loop rollout against
//! the RK oracle, `control` closes the loop with the receding-horizon
//! controller, and `sweep` grids training hyperparameters. Every run is
//! driven by one JSON config and leaves a manifest sufficient to reproduce
//! it. Errors leave as machine-readable JSON on stderr with a nonzero exit
//! code (2 for config/usage problems, 1 otherwise).

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use thiserror::Error;

pub mod config;
pub mod manifest;

mod commands;

pub use config::ExperimentConfig;
pub use manifest::Manifest;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("output `{0}` exists; pass --overwrite to replace it")]
    Clobber(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] pinc_core::ModelError),
    #[error(transparent)]
    Network(#[from] pinc_core::NetworkError),
    #[error(transparent)]
    Sampling(#[from] pinc_core::SamplingError),
    #[error(transparent)]
    Train(#[from] pinc_core::TrainError),
    #[error(transparent)]
    Simulator(#[from] pinc_core::SimulatorError),
    #[error(transparent)]
    Mpc(#[from] pinc_core::MpcError),
    #[error(transparent)]
    Metric(#[from] pinc_core::MetricError),
}

impl CliError {
    /// Stable machine-readable category for the error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Clobber(_) => "output-exists",
            CliError::Io { .. } => "io",
            CliError::Model(_) => "model",
            CliError::Network(_) => "network",
            CliError::Sampling(_) => "sampling",
            CliError::Train(_) => "train",
            CliError::Simulator(_) => "simulator",
            CliError::Mpc(_) => "mpc",
            CliError::Metric(_) => "metric",
        }
    }

    /// 2 for config/usage problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "pinc", version, about = "Physics-informed neural control experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every verb.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment config JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Trained network checkpoint (evaluate/control); defaults to
    /// `<output_dir>/checkpoint.json`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory, overriding the config's `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace existing outputs instead of refusing to clobber them.
    #[arg(long)]
    pub overwrite: bool,
    /// Parallel workers for sweep cells.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a surrogate network from a JSON experiment config.
    Train(RunArgs),
    /// Roll a trained network out in self-loop mode against the RK oracle.
    Evaluate(RunArgs),
    /// Run the receding-horizon controller against the simulated plant.
    Control(RunArgs),
    /// Grid-search training hyperparameters, several seeds per cell.
    Sweep(RunArgs),
}

/// Execute a parsed command, returning the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Train(args) => commands::train::run(args),
        Command::Evaluate(args) => commands::evaluate::run(args),
        Command::Control(args) => commands::control::run(args),
        Command::Sweep(args) => commands::sweep::run(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let payload = serde_json::json!({
                "error": { "kind": e.kind(), "message": e.to_string() }
            });
            eprintln!("{payload}");
            e.exit_code()
        }
    }
}
