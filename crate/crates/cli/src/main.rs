mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use anyhow::Result;
use clap::Parser;
use log::warn;

use args::{Cli, Command};
use commands::UsageError;
use manifest::RunManifest;

const LOG_ENV: &str = "REID_LOG_LEVEL";

fn init_logging() {
    const LEVELS: [&str; 5] = ["error", "warn", "info", "debug", "trace"];
    let requested = std::env::var(LOG_ENV).ok();
    let valid = requested.as_deref().is_none_or(|l| LEVELS.contains(&l));
    let level = if valid { requested.as_deref().unwrap_or("info") } else { "info" };
    env_logger::Builder::new()
        .parse_filters(level)
        .format_timestamp_millis()
        .init();
    if let Some(other) = requested.as_deref().filter(|_| !valid) {
        warn!("ignoring {LOG_ENV}={other}; expected one of error, warn, info, debug, trace");
    }
}

fn configure_workers(workers: Option<usize>) -> Result<()> {
    if let Some(n) = workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_workers(cli.workers)?;
    let manifest = RunManifest::start(cli.command.name(), cli.workers);
    match &cli.command {
        Command::Toygen(a) => commands::toygen(a, manifest),
        Command::Train(a) => commands::train_cmd(a, manifest),
        Command::Eval(a) => commands::eval_cmd(a, manifest),
        Command::Extract(a) => commands::extract_cmd(a, manifest),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
