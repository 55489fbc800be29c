//! The `cpdae` command line: one subcommand per pipeline stage, all
//! sharing one layered configuration.

pub mod commands;
pub mod config;
pub mod corpus;
pub mod manifest;

use std::ffi::OsString;

use clap::Parser;

pub use commands::Cli;

/// Exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// A bad invocation that clap cannot detect (conflicting or missing inputs).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<config::ConfigError>().is_some() || err.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<cpdae_core::Error>() {
            return if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_DATA };
        }
    }
    EXIT_DATA
}

/// Parses `argv`, runs the subcommand and maps the outcome to an exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
