//! HTTP service and command implementations behind the `scrapline` binary.
//!
//! [`api::router`] is the surface the operator console talks to;
//! [`commands`] holds one function per CLI verb so tests can drive them
//! without a subprocess.

pub mod api;
pub mod commands;
pub mod config;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or config file.
    #[error("config: {0}")]
    Config(String),
    /// Input data missing or malformed.
    #[error("data: {0}")]
    Data(String),
    /// A checkpoint or log failed its hash check.
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Integrity(_) => 4,
        }
    }
}
