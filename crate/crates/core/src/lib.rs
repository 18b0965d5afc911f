//! Federated learning under label noise: a two-stage simulator that first
//! detects noisy clients from per-class losses with a two-component Gaussian
//! mixture, then corrects their labels end to end with learnable label
//! logits while aggregating with distance-aware weights.
//!
//! Everything runs on small multilayer perceptrons with hand-written
//! forward/backward passes, so a full experiment fits on a laptop and is
//! bit-reproducible from a single seed.

// Range checks are written as `!(x > 0.0)` on purpose so NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod cli;
pub mod data;
pub mod detection;
pub mod error;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod numerics;
pub mod orchestrator;
pub mod training;

pub use error::{Error, Result};
