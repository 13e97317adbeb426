//! Measuring how sparsely fine-tuning updates model parameters.
//!
//! The crate diffs safetensors checkpoints under absolute tolerances, extracts the
//! updated-parameter subnetwork as a bitmask, measures the numerical rank of
//! per-matrix updates, follows sparsity across a sequence of checkpoints, and ships a
//! small self-contained trainer that reproduces the effect under bfloat16 storage.

pub mod checkpoint;
pub mod diff;
pub mod dynamics;
pub mod mask;
pub mod error;
pub mod parallel;
pub mod rank;
pub mod toy;

pub use error::{Error, ErrorClass, Result};
