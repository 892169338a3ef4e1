//! Operational shell: on-disk formats, run configuration, and the command
//! implementations behind the `avan` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod formats;
