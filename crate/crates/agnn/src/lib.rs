//! File formats, run configuration and the command-line driver for
//! `agnn-core`.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod export;
pub mod runner;
pub mod snapshot;
