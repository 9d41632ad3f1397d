//! The `grla` command line: configs, datasets on disk and the subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod repro;
pub mod run;
pub mod world;

pub use error::{exit, CliError, CliResult};
