use std::process::ExitCode;

use clap::Parser;
use rfpnapo_cli::{init_threads, run, Cli};

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse_from(&argv);
    let outcome = init_threads().and_then(|()| run(&cli, &argv));
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
