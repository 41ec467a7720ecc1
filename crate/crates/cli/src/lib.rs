//! Library surface of the `ducat` command-line harness: run configuration,
//! metric/table formats, and the subcommand implementations. The binary in
//! `main.rs` is a thin argument-parsing shell over this crate.

pub mod commands;
pub mod config;
pub mod formats;

use std::fmt;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }

    pub fn runtime_of(err: impl fmt::Display) -> Self {
        CliError::Runtime(err.to_string())
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }

    /// Exit-code contract: 1 runtime failure, 2 usage or config error.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message())
    }
}

impl std::error::Error for CliError {}
