mod args;
mod commands;

use std::process::ExitCode;

fn main() -> ExitCode {
    let inv = match args::parse(std::env::args()) {
        Ok(inv) => inv,
        Err(e) => e.exit(),
    };
    match commands::run(inv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
