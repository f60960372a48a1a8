//! Configuration and subcommands of the `dcfl` binary.

pub mod commands;
pub mod config;
