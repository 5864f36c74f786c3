//! Synthetic data, training, evaluation and FLOPs benchmarking.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod optim;
pub mod scene;
pub mod train;
