use std::process::ExitCode;

use clap::Parser;
use himec::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            for d in e.details() {
                eprintln!("  {d}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
