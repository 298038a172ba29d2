use std::process::ExitCode;

use clap::Parser;
use gjeval_core::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(out) => {
            if let Err(e) = out.write_all() {
                eprintln!("gjeval: cannot write outputs: {e}");
                return ExitCode::from(1);
            }
            if !out.summary.is_empty() {
                println!("{}", out.summary);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("gjeval: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
