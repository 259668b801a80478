mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Context;
use crate::config::{Command, Config};
use crate::error::CliError;

/// Environment variable holding the worker thread count.
const THREADS_VAR: &str = "POTTS_THREADS";

#[derive(Parser)]
#[command(name = "potts", version, about = "Sampling and exact analysis of Potts models")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Sub {
    /// Build the coupling matrix and report its spectrum.
    Generate(Common),
    /// Run independent chains at each beta.
    Sample(Common),
    /// Run parallel tempering over a ladder.
    Temper(Common),
    /// Exact enumeration of small models.
    Oracle(Common),
    /// Compare samplers across betas.
    Benchmark(Common),
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let threads: usize = value.parse().ok().filter(|&t| t > 0).ok_or_else(|| CliError::Config {
        path: THREADS_VAR.into(),
        message: format!("must be a positive integer, got `{value}`"),
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Config {
            path: THREADS_VAR.into(),
            message: e.to_string(),
        })
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let (command, common) = match cli.command {
        Sub::Generate(c) => (Command::Generate, c),
        Sub::Sample(c) => (Command::Sample, c),
        Sub::Temper(c) => (Command::Temper, c),
        Sub::Oracle(c) => (Command::Oracle, c),
        Sub::Benchmark(c) => (Command::Benchmark, c),
    };
    let mut config = Config::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = common.out {
        config.output = out;
    }
    let ctx = Context::new(config, command)?;
    match command {
        Command::Generate => commands::generate(&ctx),
        Command::Sample => commands::sample(&ctx),
        Command::Temper => commands::temper(&ctx),
        Command::Oracle => commands::oracle(&ctx),
        Command::Benchmark => commands::benchmark(&ctx),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
