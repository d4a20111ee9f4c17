//! `lmpcast`: generate market datasets, train forecasters, evaluate and
//! inspect them.
//!
//! Exit codes: 0 success, 1 usage, 2 validation, 3 solver or numerical
//! failure.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "lmpcast", version, about = "Locational marginal price forecasting on synthetic markets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command that writes artifacts.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat `key = value` file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overwrite existing output.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve an hourly market and write a dataset directory.
    GenData(commands::GenData),
    /// Train a forecaster on a dataset.
    Train(commands::Train),
    /// Score a checkpoint on the dataset's test split.
    Eval(commands::Eval),
    /// Forecast LMPs from a load window CSV.
    Predict(commands::Predict),
    /// Write the attention masks of one sample as CSV and SVG heat maps.
    ExportAttention(commands::ExportAttention),
    /// Plot predicted against true LMPs at one node.
    Plot(commands::Plot),
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("LMPCAST_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| error::invalid(format!("LMPCAST_THREADS={v}: expected a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| error::invalid(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::GenData(c) => c.run(),
        Command::Train(c) => c.run(),
        Command::Eval(c) => c.run(),
        Command::Predict(c) => c.run(),
        Command::ExportAttention(c) => c.run(),
        Command::Plot(c) => c.run(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
