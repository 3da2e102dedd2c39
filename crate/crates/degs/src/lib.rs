//! File formats, dataset IO, checkpoints, metrics logs and the `degs`
//! command-line tool built on `degs-core`.

mod bench;
pub mod checkpoint;
pub mod cli;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
mod fsutil;
pub mod imageio;
pub mod metrics;

pub use cli::run_cli;
pub use error::{DegsError, Result};
