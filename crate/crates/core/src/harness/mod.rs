//! Datasets, metrics, evaluation and benchmarking.

pub mod benchmark;
pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod logs;
pub mod metrics;
