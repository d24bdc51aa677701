//! Command-line front end for autogp: configuration and checkpoint formats
//! plus the `train`, `evaluate`, `predict`, `gradcheck` and
//! `variance-study` commands. `main.rs` only parses arguments and maps
//! errors to exit codes.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod setup;

pub use error::{CliError, CliResult};
