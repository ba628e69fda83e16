//! Files and commands around `martnet-core`: the key=value run
//! configuration, the binary path cache and checkpoint formats, metrics and
//! manifest artifacts, and the subcommands the `martnet` binary exposes.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod formats;

pub use commands::{run, Command, Context};
pub use config::{Profile, RunConfig};
