use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = hft_cli::Cli::parse();
    match hft_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(hft_cli::classify(&err) as u8)
        }
    }
}
