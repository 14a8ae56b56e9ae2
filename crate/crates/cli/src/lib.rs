//! Command-line driver: run configuration, dataset ingestion and the
//! `advpatch` subcommands.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod plot;

pub use commands::{run, Cli};
pub use error::{CliError, CliResult};
