//! Post-training quantization toolkit for tinyML CNNs.
//!
//! The crate bundles a small deterministic inference/backprop engine, the
//! simulated quantizer, the four-step PTQ pipeline (cross-layer equalization,
//! quantizer initialization, reconstruction optimization, bias tuning) and a
//! BOP / peak-memory cost model.

pub mod engine;
pub mod metrics;
pub mod error;
pub mod io;
pub mod models;
pub mod pipeline;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
