//! Command-line companion to `tinydistill-core`: run configuration files,
//! checkpoint and metrics formats, IDX file handling and the subcommand
//! implementations.

pub mod checkpoint;
pub mod config;
pub mod external;
pub mod idx_io;
pub mod metrics;
pub mod run;

use std::fmt;

/// Process-level error classes with a fixed exit-code contract, so
/// harnesses can tell configuration, numeric and file failures apart.
#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration or arguments (exit 2).
    Config(String),
    /// A loss or gradient stopped being finite (exit 3).
    Numeric(String),
    /// Unreadable, corrupt or unwritable files (exit 4).
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric error: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<tinydistill_core::Error> for CliError {
    fn from(e: tinydistill_core::Error) -> Self {
        use tinydistill_core::Error as E;
        match e {
            E::NonFinite(_) => CliError::Numeric(e.to_string()),
            E::Format { .. } => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
