//! Front end for `ncs-core`: loads a model, runs one subcommand and writes its
//! artifacts as JSON (CSV for traces) into the output directory.

pub mod args;
pub mod check;
pub mod commands;
pub mod output;

use std::fmt;

pub use args::Cli;

/// Stable process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitCode {
    Success = 0,
    Input = 1,
    Solvability = 2,
    Invariant = 3,
}

#[derive(Debug)]
pub struct CliError {
    pub code: ExitCode,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        CliError {
            code: ExitCode::Input,
            message: message.into(),
        }
    }

    pub fn invariant(message: impl Into<String>) -> Self {
        CliError {
            code: ExitCode::Invariant,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<ncs_core::Error> for CliError {
    fn from(e: ncs_core::Error) -> Self {
        let code = if e.is_solvability() {
            ExitCode::Solvability
        } else {
            ExitCode::Input
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::input(e.to_string())
    }
}

/// Worker count from `NCS_THREADS`; `None` when unset.
pub fn threads_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var("NCS_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(CliError::input(format!(
                "NCS_THREADS must be a positive integer, got {v:?}"
            ))),
        },
        Err(_) => Ok(None),
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = threads_from_env()? {
        // ignore the error when a pool already exists (repeated calls in tests)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    commands::dispatch(cli)
}
