//! Operator surface for taskroute: pipeline subcommands and the HTTP
//! routing service.

pub mod commands;
pub mod server;

pub use commands::run;
