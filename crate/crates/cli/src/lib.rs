//! Command-line driver for the trevsnn engine: run configuration, dataset
//! loaders, the tensor container used for checkpoints, and the training,
//! gradient-check, memory, energy and gradient-similarity commands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod train;
