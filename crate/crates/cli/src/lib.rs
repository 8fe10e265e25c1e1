//! Library side of the `nearid` command-line tool.
//!
//! Subcommands:
//!
//! - `gen`: generate a synthetic world (`manifest.jsonl`, `config.toml`,
//!   optionally `grids.nide`).
//! - `train`: fit the attention-pooling head on a world's training split.
//! - `eval`: score a checkpoint or the frozen baseline on one split.
//! - `ablate`: run a grid of configurations and tabulate their reports.
//! - `report`: flatten an evaluation report into CSV tables.
//!
//! Exit codes are listed in [`error::exit`].

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use config::{ConfigLoader, Overrides, RunConfig};
pub use error::{CliError, CliResult};
