//! Experiment harness: configuration, synthetic datasets, checkpoints,
//! training runs and order sweeps.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod runner;
pub mod sweep;

pub use error::{HarnessError, Result};
