//! Batch front-end: `mflqg <riccati|solve|simulate|nash> --config run.json --out DIR`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mflqg::RngContract;

mod commands;
mod config;

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Solver(#[from] mflqg::Error),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Solver(e) if e.is_non_convergence() => 4,
            CliError::Solver(mflqg::Error::Model(_) | mflqg::Error::InvalidInput(_)) => 2,
            CliError::Solver(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mflqg", version, about = "Mean-field LQG forward-backward game solver and Monte Carlo harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (does not change results).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Riccati-type functions, Θ tables and the contraction check.
    Riccati,
    /// Consistency fixed point x̄, γ, τ.
    Solve,
    /// N-agent closed-loop replications.
    Simulate,
    /// Convergence sweep and ε-Nash margins.
    Nash,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let path = cli.config.as_deref().ok_or_else(|| CliError::Config("--config is required".into()))?;
    let config = RunConfig::load(path)?;
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot start thread pool: {e}")))?;
    }
    std::fs::create_dir_all(&cli.out).map_err(|e| CliError::Io(format!("cannot create {}: {e}", cli.out.display())))?;
    let rng = RngContract::new(cli.seed.unwrap_or(config.seed));
    match cli.command {
        Command::Riccati => commands::riccati(&config, &cli.out),
        Command::Solve => commands::solve(&config, &cli.out),
        Command::Simulate => commands::simulate(&config, &rng, &cli.out),
        Command::Nash => commands::nash(&config, &rng, &cli.out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mflqg: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
