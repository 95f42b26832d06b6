//! Minimal deterministic reverse-mode autodiff over f64 tensors.
//!
//! Purpose-built for the translation and detection networks: dynamic tape,
//! NCHW convolutions via im2col GEMM, instance normalization, and the
//! handful of activations and losses the training objectives need. Single
//! threaded and allocation-happy on purpose: batches are tiny, determinism
//! and finite-difference-exact gradients matter more than throughput here.

pub mod adam;
pub mod tape;

pub use adam::{Adam, ParamId, ParamStore};
pub use tape::{Tape, TensorId};
