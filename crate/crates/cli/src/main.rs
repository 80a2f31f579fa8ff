//! `perfed`: experiment runs, theory verification, the toy example and
//! partition diagnostics.
//!
//! Exit codes: 0 success, 1 theory check failed, 2 configuration or I/O
//! error, 3 runtime divergence.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Status;
use config::{Algorithm, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Diverged(String),
}

impl From<perfed_core::Error> for CliError {
    fn from(e: perfed_core::Error) -> Self {
        use perfed_core::Error;
        match e {
            Error::Diverged { .. } | Error::NonFinite { .. } => CliError::Diverged(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "perfed",
    version,
    about = "Clustered logit co-distillation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// TOML config (or a JSON config / summary.json to replay a run).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the algorithm selected in the config.
    Run(Common),
    /// Compare closed-form weights against the Monte-Carlo grid oracle.
    TheoryCheck {
        #[command(flatten)]
        common: Common,
        /// Scale the evaluated lambda* (negative control).
        #[arg(long, hide = true)]
        lambda_scale: Option<f64>,
    },
    /// Three-client linear toy over ten consecutive seeds.
    Toy(Common),
    /// Label histograms and imbalance metrics of the Dirichlet partition.
    PartitionStats(Common),
}

fn resolve(common: &Common, required: bool) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => config::load(path)?,
        None if required => return Err(CliError::Config("--config is required".into())),
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<Status, CliError> {
    match cli.command {
        Command::Run(c) => commands::run(&resolve(&c, true)?),
        Command::TheoryCheck {
            common,
            lambda_scale,
        } => {
            let mut cfg = resolve(&common, false)?;
            cfg.algorithm = Algorithm::TheoryCheck;
            if let Some(s) = lambda_scale {
                cfg.theory.lambda_scale = s;
            }
            commands::theory_check(&cfg)
        }
        Command::Toy(c) => {
            let mut cfg = resolve(&c, false)?;
            cfg.algorithm = Algorithm::Toy;
            commands::toy(&cfg)
        }
        Command::PartitionStats(c) => commands::partition_stats(&resolve(&c, false)?),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::CheckFailed) => ExitCode::from(1),
        Ok(Status::Diverged) => ExitCode::from(3),
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Diverged(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
