//! `quasigee`: fit, diagnose and simulate marginal longitudinal models from JSON configs.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 dataset load error,
//! 3 non-convergence (output files are still written), 4 singular or rank-deficient system.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use quasigee_core::GeeError;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Load(GeeError),
    NotConverged(String),
    Core(GeeError),
}

impl From<GeeError> for CliError {
    fn from(e: GeeError) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(GeeError::Io(e))
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Load(_) => 2,
            CliError::NotConverged(_) => 3,
            CliError::Core(e) => match e {
                GeeError::Singular(_)
                | GeeError::SingularCorrelation { .. }
                | GeeError::RankDeficient { .. }
                | GeeError::LinkSaturated { .. } => 4,
                GeeError::Experiment(_) => 3,
                _ => 1,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Load(e) => write!(f, "failed to load dataset: {e}"),
            CliError::NotConverged(m) => write!(f, "not converged: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

#[derive(Parser)]
#[command(name = "quasigee", version, about = "Estimating equations for marginal longitudinal models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for Monte Carlo replications.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Print a JSON summary on stdout.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Fit one estimating equation to a dataset.
    Fit,
    /// Regularity constants and hypothesis tables for a dataset.
    Diagnose,
    /// Generate a dataset from the simulation model.
    Simulate,
    /// Monte Carlo comparison of several methods.
    Compare,
}

fn run(cli: &Cli) -> Result<serde_json::Value, CliError> {
    let config = cli.config.as_deref().ok_or_else(|| CliError::Config("--config is required".into()))?;
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(CliError::Config("--workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(w).build_global().map_err(|e| CliError::Config(e.to_string()))?;
    }
    let out = cli.out.as_deref();
    match cli.command {
        Command::Fit => commands::fit(config, out),
        Command::Diagnose => commands::diagnose(config, out),
        Command::Simulate => commands::simulate(config, out),
        Command::Compare => commands::compare(config, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(summary) => {
            if cli.json {
                println!("{summary}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("quasigee: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
