//! Command implementations behind the `metalora` binary.

pub mod commands;
pub mod config;
