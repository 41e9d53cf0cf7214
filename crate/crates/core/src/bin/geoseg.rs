use std::process::ExitCode;

use clap::Parser;
use geoseg::harness::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli).map_err(anyhow::Error::from) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let category = e
                .downcast_ref::<geoseg::Error>()
                .map_or("internal", geoseg::Error::category);
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{category}]: {msg}");
            ExitCode::FAILURE
        }
    }
}
