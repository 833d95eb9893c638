//! Experiment harness: configuration, synthetic data, the training loop and
//! the `spectrum`, `project`, `train`, `linexp` and `figratio` commands.

pub mod commands;
pub mod config;
pub mod data;
pub mod train;
