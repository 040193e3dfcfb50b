//! Command-line harness for distortion-invariant training: corpus
//! synthesis, training, evaluation, reporting and the verification suite.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 verification
//! failure, 3 runtime abort.

pub mod commands;
pub mod config;
pub mod verify;

use std::fmt;

pub use config::{DatasetConfig, ExperimentConfig, Overrides, Task};

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Usage(String),
    Verify(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Verify(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    /// Configuration and input problems are usage errors; anything else
    /// raised by the core happened mid-computation.
    pub fn from_core(e: dil_core::Error) -> Self {
        use dil_core::Error as E;
        match e {
            E::InvalidConfig(_) | E::InvalidSpec(_) | E::InvalidImage(_) | E::Format { .. } => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }

    pub(crate) fn from_config(e: dil_core::Error) -> Self {
        CliError::Usage(e.to_string())
    }

    pub(crate) fn io(what: &str, e: impl fmt::Display) -> Self {
        CliError::Runtime(format!("{what}: {e}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "error: {m}"),
            CliError::Verify(m) => write!(f, "verification failed: {m}"),
            CliError::Runtime(m) => write!(f, "aborted: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<dil_core::Error> for CliError {
    fn from(e: dil_core::Error) -> Self {
        CliError::from_core(e)
    }
}
