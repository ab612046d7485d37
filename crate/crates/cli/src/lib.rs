//! Experiment runner for the continual-learning library: configuration,
//! run directories, ablation grids and reports.

pub mod commands;
pub mod config;
pub mod store;

pub use config::{ConfigError, ExperimentConfig};
