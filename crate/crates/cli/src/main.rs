mod cli;
mod commands;
mod config;
mod experiment;

use std::process::ExitCode;

use clap::Parser;
use log::LevelFilter;

use crate::cli::{Cli, Command};
use crate::config::UsageError;

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::SamplePatches(a) => commands::sample_patches(a),
        Command::Train(a) => commands::train_cmd(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Denoise(a) => commands::denoise(a),
        Command::Nlm(a) => commands::nlm_cmd(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::RunExperiment(a) => experiment::run(a),
        Command::Synthesize(a) => commands::synthesize(a),
    }
}

/// Usage and configuration problems exit with 2, everything else with 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.chain().any(|e| {
        e.is::<UsageError>()
            || matches!(
                e.downcast_ref::<flowprior::Error>(),
                Some(flowprior::Error::Config(_) | flowprior::Error::Topology(_))
            )
    });
    if usage {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => LevelFilter::Warn,
        1 => LevelFilter::Info,
        _ => LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
