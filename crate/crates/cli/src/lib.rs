//! Command implementations and the HTTP service behind the `apex` binary.

pub mod commands;
pub mod server;
