//! RSFormer: rain-by-snow weather removal.
//!
//! A u-shaped restoration network built from Transformer-like convolution
//! blocks, with global-local attention sampling between resolution levels,
//! a spatial-frequency training objective, procedural dataset synthesis, a
//! training/evaluation harness and an analytic cost profiler.
//!
//! Start with the runnable programs under `examples/`; each one exercises a
//! major capability end to end.

pub mod autodiff;
pub mod error;
pub mod kernels;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::FeatureMap;
