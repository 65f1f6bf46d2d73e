//! `patchconv` command-line tool.
//!
//! Exit codes: 0 success, 1 usage, 2 data or format error, 3 verification
//! failure.

mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;
use patchconv::Error;

use crate::config::Cli;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_VERIFY: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Dimension(_) | Error::Index { .. } => EXIT_USAGE,
        Error::Numeric(_) | Error::Format { .. } | Error::Io { .. } => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_VERIFY),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
