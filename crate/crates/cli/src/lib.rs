//! Library side of the `fbsplit` command-line tool: configuration loading and
//! the `run`, `compare`, `rate` and `validate` subcommands.

pub mod commands;
pub mod config;
pub mod error;

pub use config::{Overrides, RunConfig, Scheme};
pub use error::CliError;
