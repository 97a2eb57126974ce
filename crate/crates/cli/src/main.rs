//! Command-line experiment runner: `hjpi <solve|pi|study|check> --config FILE`.

mod commands;
mod config;
mod error;
mod output;
mod registry;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "hjpi",
    version,
    about = "Monotone schemes and policy iteration for periodic HJB-Isaacs equations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads; affects speed only.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Backward value solve; writes snapshots and a summary.
    Solve,
    /// Policy iteration against the directly computed fixed point.
    Pi,
    /// Convergence-order study against a fine-grid reference.
    Study,
    /// Property suites with a fixed seed.
    Check,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot start thread pool: {e}")))?;
    }
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config PATH is required".into()))?;
    let cfg = RunConfig::load(path)?;
    match cli.command {
        Command::Solve => commands::cmd_solve(&cfg, &cli.out),
        Command::Pi => commands::cmd_pi(&cfg, &cli.out),
        Command::Study => commands::cmd_study(&cfg, &cli.out),
        Command::Check => commands::cmd_check(&cfg, &cli.out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
