//! HTTP gateway and command-line interface over `editgate-core`.

pub mod cli;
pub mod config;
pub mod server;
