//! Experiment driver: configuration, commands and exit codes.

pub mod commands;
pub mod config;

pub use commands::{Command, Run};
pub use config::ExperimentConfig;

use commeta::Error;

/// Process exit code for a failed run.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Ingest { .. } => 3,
        Error::Numeric(_) => 4,
        _ => 1,
    }
}
