use std::path::PathBuf;

/// Top-level command failure. Every variant maps to a fixed process exit
/// code so scripts can branch on the kind of failure without scraping
/// stderr.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Unusable config file, arguments, or referenced artifacts.
    #[error("{0}")]
    Config(String),

    /// Training hit a non-finite loss or parameter and stopped.
    #[error("{message}")]
    NanAbort {
        message: String,
        /// Last checkpoint written before the abort, if any.
        checkpoint: Option<PathBuf>,
    },

    /// The adherence oracle does not meet its accuracy floor.
    #[error("{0}")]
    OracleFloor(String),

    /// Anything else: I/O mid-run, failed writes, lock contention.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::NanAbort { .. } => 3,
            CliError::OracleFloor(_) => 4,
        }
    }
}
