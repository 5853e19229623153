//! Joint quantization and pruning for neural-network training.
//!
//! The crate provides a per-tensor delayed/saturated uniform quantizer
//! ([`quantize`]), a gradual magnitude pruner with a sliding score window
//! ([`prune`]), a small dense/conv network with analytic gradients ([`nn`]),
//! and a [`pipeline`] that composes the operators around layers and
//! schedules them during training. [`metrics`] covers footprint, performance
//! density, PSNR and gradient-spike detection.

pub mod error;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod prune;
pub mod quantize;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
