//! Experiment harness for the simulated charging cell: rendering, detection,
//! calibration, plug-in runs and reports.

pub mod cli;
pub mod commands;
pub mod config;
pub mod log;

pub use cli::{run, Cli, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};
