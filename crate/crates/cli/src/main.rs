mod commands;
mod config;
mod error;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{AdaptArgs, AnalyzeArgs, GenDataArgs, PretrainArgs};
use error::CliError;

/// Compound-domain test-time adaptation on synthetic segmentation streams.
#[derive(Debug, Parser)]
#[command(name = "cdtta", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate source, stream and evaluation splits.
    GenData(GenDataArgs),
    /// Train the source network.
    Pretrain(PretrainArgs),
    /// Adapt on the stream, then evaluate per domain.
    Adapt(AdaptArgs),
    /// DDR grid, quality-signal correlations and feature dump.
    Analyze(AnalyzeArgs),
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("CDTTA_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Config(format!("CDTTA_THREADS must be a positive integer, got '{raw}'")))?;
    cdtta_core::par::configure_threads(n).map_err(CliError::Config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Pretrain(a) => commands::pretrain_cmd(a),
        Command::Adapt(a) => commands::adapt_cmd(a),
        Command::Analyze(a) => commands::analyze_cmd(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cdtta: {e}");
            e.exit_code()
        }
    }
}
