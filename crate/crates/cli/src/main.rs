//! `phishgraph` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

mod args;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use phishgraph::{ErrorKind, Result, RunConfig};

use args::{Cli, Command};
use stages::Workspace;

fn resolve(cli: &Cli) -> Result<Workspace> {
    let mut config = match &cli.common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cli.common.apply(&mut config);
    config.validate()?;
    let dir = config.output_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    Ok(Workspace { dir, config })
}

fn run(cli: &Cli) -> Result<()> {
    let ws = resolve(cli)?;
    match &cli.command {
        Command::Synth(a) => stages::synth(&ws, a),
        Command::Ingest(a) => stages::ingest(&ws, a),
        Command::Sample => stages::sample(&ws),
        Command::Train(a) => stages::train(&ws, a),
        Command::Evaluate => stages::evaluate(&ws),
        Command::Predict(a) => stages::predict(&ws, a),
        Command::Ablate(a) => stages::ablate(&ws, a),
        Command::Sweep(a) => stages::sweep_stage(&ws, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numerical => 3,
            })
        }
    }
}
