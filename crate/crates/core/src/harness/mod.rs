//! Optimizer, training loop, checkpoints, scoring and the study runner.

pub mod checkpoint;
pub mod config;
pub mod optim;
pub mod study;
pub mod train;
pub mod wer;
