use std::process::ExitCode;

use clap::Parser;
use flowmo_cli::{init_threads, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| run(&cli));
    match result {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("flowmo: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
