//! Library half of the `linmix` command: run configuration, feature
//! sources, length-bucketed batching and the three commands.

pub mod batching;
pub mod bench;
pub mod cli;
pub mod config;
pub mod features;
pub mod pretrain;
pub mod verify;

use std::fmt;

pub use config::{parse_config, RunConfig};
pub use features::{synth_features, FeatureSource, SynthSpec};

/// Failure of a command, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flag, bad config file or bad setting (exit 2).
    Usage(String),
    /// Anything that went wrong while running (exit 1).
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<linmix_core::Error> for CliError {
    fn from(e: linmix_core::Error) -> Self {
        match e {
            linmix_core::Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
