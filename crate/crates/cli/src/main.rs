use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = ralab_cli::Cli::parse();
    match ralab_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(ralab_cli::exit_code(&e))
        }
    }
}
