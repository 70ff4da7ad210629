//! Command-line front end: run configuration, commands and diagnostics.

pub mod commands;
pub mod config;
pub mod render;
