use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = tgate::cli::Cli::parse();
    match tgate::cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tgate: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
