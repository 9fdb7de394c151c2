//! Experiment driver for the `dharq` binary.

pub mod commands;
pub mod config;
pub mod output;
