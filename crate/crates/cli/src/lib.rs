//! Command-line driver: configuration layering, the data/training/evaluation
//! pipeline, and the subcommands of the `sacl` binary.

pub mod cli;
pub mod commands;
pub mod config;
pub mod output;
pub mod pipeline;
pub mod plot;
