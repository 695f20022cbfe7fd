use std::panic;
use std::process::ExitCode;

use clap::Parser;
use funnel::cli::{run, Cli};

const INTERNAL_ERROR: u8 = 4;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match panic::catch_unwind(|| run(&cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
        Err(_) => ExitCode::from(INTERNAL_ERROR),
    }
}
