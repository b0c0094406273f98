//! Configuration loading and experiment orchestration for `sa-lab`.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use commands::{run, Command, RunOptions, RunReport};
pub use config::{load_config, parse_config, parse_constants, ConfigError, Experiment};
pub use error::CliError;
