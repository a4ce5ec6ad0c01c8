//! Command-line pipeline: mine, precompute, train, eval and report over one
//! experiment directory.

pub mod commands;
pub mod config;

pub use commands::{exit_code, run, Cli};
