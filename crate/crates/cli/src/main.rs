use std::process::ExitCode;

use clap::Parser;
use dpgrad_cli::{run_cli, Cli};

fn main() -> ExitCode {
    match run_cli(Cli::parse()) {
        Ok(outcome) => ExitCode::from(outcome.exit_code()),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
