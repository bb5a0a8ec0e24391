//! Config-driven experiments behind the `zzedit` command line.

mod commands;
mod config;

pub use commands::*;
pub use config::*;
