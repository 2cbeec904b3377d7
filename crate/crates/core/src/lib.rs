//! Desk-scale laboratory for studying transformer training stability.
//!
//! The crate trains small decoder-only transformers with reverse-mode
//! autodiff, instruments the quantities that go unstable at high learning
//! rates (attention logits, output log-partition, gradient/update norms),
//! and provides sweep and curve-fitting tooling to measure learning-rate
//! sensitivity and extrapolate characteristics across model scales.

pub mod data;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod scalar;
pub mod sweep;
pub mod tensor;
pub mod train;

pub use scalar::Scalar;
