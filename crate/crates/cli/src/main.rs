mod commands;
mod config;
mod manifest;

use std::fmt;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{CaseArgs, CompareArgs, EvaluateArgs, LocalizeArgs, PreprocessArgs};
use config::{CommonArgs, RunConfig};

/// Marks an error as bad usage or configuration (exit code 2).
#[derive(Debug)]
pub struct Usage;

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("usage error")
    }
}

/// EEG source localization with certainty-based reduction of the solution
/// space.
#[derive(Debug, Parser)]
#[command(name = "carss", version)]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build (or reuse) the lead field and write the montage and grid.
    Forward,
    /// Simulate a test case: measurement CSV and truth JSON.
    Simulate(CaseArgs),
    /// Estimate sources from a measurement.
    Localize(LocalizeArgs),
    /// Score estimates against a truth file.
    Evaluate(EvaluateArgs),
    /// Clean a multichannel recording.
    Preprocess(PreprocessArgs),
    /// Simulate a test case and score several methods on it.
    Compare(CompareArgs),
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::load(&cli.common).map_err(|e| e.context(Usage))?;
    match &cli.command {
        Command::Forward => commands::forward(&cfg),
        Command::Simulate(a) => commands::simulate(&cfg, a),
        Command::Localize(a) => commands::localize(&cfg, a),
        Command::Evaluate(a) => commands::evaluate(&cfg, a),
        Command::Preprocess(a) => commands::preprocess(&cfg, a),
        Command::Compare(a) => commands::compare(&cfg, a),
    }
}

fn is_usage(e: &anyhow::Error) -> bool {
    e.downcast_ref::<Usage>().is_some()
        || e.chain().any(|c| matches!(c.downcast_ref::<carss::Error>(), Some(carss::Error::Config(_))))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_usage(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
