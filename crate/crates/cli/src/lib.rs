//! Command implementations and the HTTP generation service behind the `lksde` binary.

pub mod cli;
pub mod commands;
pub mod error;
pub mod server;

pub use error::{CliError, ExitKind};
