//! `dat`: translate with model-generated demonstrations, manage
//! demonstration pools and report on run records.
//!
//! Exit status is 0 on success, 1 on runtime failures and 2 on usage or
//! configuration errors.

mod cmd;
mod config;
mod exit;
mod lock;
mod manifest;
mod quality;

use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

#[derive(Debug, Parser)]
#[command(name = "dat", version, about = "Demonstration-augmented translation with LLMs")]
struct Cli {
    /// More log output on stderr (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Translate one sentence and print the result.
    Translate(cmd::translate::TranslateArgs),
    /// Translate a file of queries into a record file.
    Batch(cmd::batch::BatchArgs),
    /// Inspect and maintain a demonstration pool.
    Pool(cmd::pool::PoolArgs),
    /// Relevance, uniformity, quality and length statistics of record files.
    Report(cmd::report::ReportArgs),
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    let result = match cli.command {
        Command::Translate(args) => cmd::translate::run(args),
        Command::Batch(args) => cmd::batch::run(args),
        Command::Pool(args) => cmd::pool::run(args),
        Command::Report(args) => cmd::report::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            failure.exit_code()
        }
    }
}
