use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    match sdtr::cli::run(sdtr::cli::Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
