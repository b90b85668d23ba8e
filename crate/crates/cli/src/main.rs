use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use rtal_cli::cli::{run, Cli};
use rtal_cli::error::{EXIT_OK, EXIT_USAGE};

/// Maps `RTAL_NUM_THREADS` onto the matrix-product thread pool.
fn apply_thread_cap() -> Result<(), String> {
    match std::env::var("RTAL_NUM_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => {
                std::env::set_var("MATMUL_NUM_THREADS", n.to_string());
                Ok(())
            }
            _ => Err(format!("RTAL_NUM_THREADS must be a positive integer, got `{v}`")),
        },
        Err(_) => {
            if std::env::var_os("MATMUL_NUM_THREADS").is_none() {
                std::env::set_var("MATMUL_NUM_THREADS", "1");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    if let Err(msg) = apply_thread_cap() {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_USAGE as u8);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
