//! File formats and subcommands behind the `ktied-vi` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
mod error;
pub mod idx;

pub use error::{CliError, CliResult};
