//! Ingestion, configuration and the command line.

pub mod cli;
pub mod config;
pub mod io;

pub use config::RunConfig;
