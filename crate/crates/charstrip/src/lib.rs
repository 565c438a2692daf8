//! Command-line driver for `charstrip-core`: TOML configuration, output
//! formats and the `charstrip` binary's subcommands.

pub mod cli;
pub mod config;
pub mod io;

pub use cli::{main_with_args, run, CliError, Command, Verdict};
pub use config::{ConfigError, Overrides, RunConfig};
