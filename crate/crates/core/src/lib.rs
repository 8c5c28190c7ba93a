// SPDX-License-Identifier: MIT OR Apache-2.0

//! Probing and steering belief representations in small transformers.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`). The aliases
//! below fix the precisions used by the pipeline: model weights and
//! activations in `f32`, probe fitting in `f64`.

pub mod archive;
pub mod cache;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod probing;
pub mod scalar;
pub mod steering;
pub mod taskgen;
pub mod tokenizer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Model parameters at pipeline precision.
pub type Weights = model::ModelWeights<f32>;
/// Captured activations at pipeline precision.
pub type Trace = model::ActivationTrace<f32>;
/// Hook specification at pipeline precision.
pub type Hook = model::HookSpec<f32>;
