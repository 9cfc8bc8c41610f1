//! Command surface of the `fmsd` binary, usable from tests without spawning
//! a process.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{AblationSummary, Layout};
pub use config::RunConfig;
pub use error::CliError;
