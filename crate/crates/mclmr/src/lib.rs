//! Configuration, file formats and commands for the `mclmr` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use config::{RawConfig, RunConfig};
pub use error::{CliError, CliResult};
