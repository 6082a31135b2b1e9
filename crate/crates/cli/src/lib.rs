//! Command-line front end for `mscos`: config loading, file formats and the
//! four subcommands.

pub mod commands;
pub mod config;
pub mod io;

use std::fmt;

/// Failure classes, each with its own process exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<mscos::Error> for CliError {
    fn from(e: mscos::Error) -> Self {
        match e {
            mscos::Error::Numerical(_) | mscos::Error::ChainFailure { .. } => CliError::Numerical(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}
