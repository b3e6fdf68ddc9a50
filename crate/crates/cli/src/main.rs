//! `otactive`: solve, gradient-check, run and benchmark active OT alignment
//! from a JSON config.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "otactive", version, about = "Active learning for optimal-transport alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Root seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the round-0 plan once and report its metrics.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Also write the dense plan as `plan.csv`.
        #[arg(long)]
        emit_plan: bool,
    },
    /// Compare adjoint derivatives with finite differences on a random instance.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Run every configured strategy over every seed.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Time per-round scoring, the sparse and dense impact paths and a size sweep.
    Bench {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Convergence(String),
    Gradcheck(String),
    Strategy(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Convergence(_) => 4,
            CliError::Gradcheck(_) => 5,
            CliError::Strategy(_) => 6,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Convergence(m) => write!(f, "convergence failure: {m}"),
            CliError::Gradcheck(m) => write!(f, "gradient check failed: {m}"),
            CliError::Strategy(m) => write!(f, "strategy failures: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

fn prepare(common: &Common) -> Result<(RunConfig, PathBuf), CliError> {
    let mut config = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    config.validate()?;
    let out = config.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    Ok((config, out))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Solve { common, emit_plan } => {
            let (config, out) = prepare(&common)?;
            config.require_data()?;
            commands::solve(&config, &out, emit_plan)
        }
        Command::Gradcheck { common } => {
            let (config, out) = prepare(&common)?;
            commands::gradcheck(&config, &out)
        }
        Command::Run { common } => {
            let (config, out) = prepare(&common)?;
            config.require_data()?;
            commands::run(&config, &out)
        }
        Command::Bench { common } => {
            let (config, out) = prepare(&common)?;
            config.require_data()?;
            commands::bench(&config, &out)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("otactive: {e}");
            ExitCode::from(e.code())
        }
    }
}
