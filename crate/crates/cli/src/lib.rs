//! Command-line front end: configuration, state files and subcommands.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod state;

pub use cli::{run, Cli};
pub use error::{CliError, CliResult};
