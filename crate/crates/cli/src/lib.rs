//! Library surface of the `duogan` binary: train, generate, evaluate, and
//! inspect paired-digit GAN runs from the command line.
//!
//! Commands live here rather than in `main.rs` so integration tests can
//! drive them in-process and assert on files and error codes instead of
//! scraping stdout.

pub mod commands;
pub mod config;
pub mod error;
pub mod lock;
pub mod pgm;
pub mod sampling;

pub use commands::{
    cmd_eval, cmd_generate, cmd_inspect, cmd_oracle, cmd_train, EvalArgs, GenerateArgs,
    InspectArgs, OracleArgs,
};
pub use config::{ConfigError, RunConfig};
pub use error::CliError;
