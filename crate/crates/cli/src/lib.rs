//! Configuration-driven front end for `marcus-core`: TOML run files, the
//! subcommands behind the `marcus-spde` binary and their report bundles.

pub mod commands;
pub mod config;
pub mod expr;
pub mod report;

pub use config::{ConfigError, RunConfig};
pub use report::{Check, ReportBundle, Status};
