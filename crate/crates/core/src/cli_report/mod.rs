//! Run configuration, experiment orchestration, CSV analysis and report
//! emission behind the `bkprobe` command line.

pub mod analysis;
pub mod cli;
pub mod commands;
pub mod config;
pub mod report;

pub use cli::run_cli;
pub use config::RunConfig;
