//! Command-line driver: config resolution and the subcommands.

pub mod args;
pub mod commands;
pub mod config;
