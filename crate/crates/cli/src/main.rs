//! `trans-gcr` command-line driver.
//!
//! Exit codes: 0 on success, 1 when loading data or computing fails, 2 for
//! invalid flags or configuration (nothing is written in that case).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use commands::{CliError, Globals};
use config::{Cli, Command, FileConfig, Merge};

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => config::load_file(p).map_err(CliError::Config)?,
        None => FileConfig::default(),
    };
    let seed = cli.seed.or(file.seed);
    let globals = Globals {
        seed: seed.unwrap_or(0),
        out: cli.out.or(file.out).unwrap_or_else(|| PathBuf::from("out")),
    };
    let threads = cli.threads.or(file.threads).unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {threads} threads: {e}")))?;
    pool.install(|| match cli.command {
        Command::Fit(a) => commands::cmd_fit(a.merge(file.fit.unwrap_or_default()), &globals),
        Command::Transfer(a) => commands::cmd_transfer(a.merge(file.transfer.unwrap_or_default()), &globals),
        Command::Detect(a) => commands::cmd_detect(a.merge(file.detect.unwrap_or_default()), &globals),
        Command::Simulate(a) => {
            commands::cmd_simulate(a.merge(file.simulate.unwrap_or_default()), &globals, seed.is_some())
        }
        Command::Evaluate(a) => commands::cmd_evaluate(a.merge(file.evaluate.unwrap_or_default()), &globals),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            match e {
                CliError::Config(_) => ExitCode::from(2),
                CliError::Run(_) => ExitCode::from(1),
            }
        }
    }
}
