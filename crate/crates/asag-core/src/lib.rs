//! Grading student answers against reference answers with a
//! multiway-attention network.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`] — dense tensors with reverse-mode autodiff,
//! * [`nn`] — linear maps, layer norm, feed-forward nets, embeddings,
//!   multi-head attention, transformer encoder blocks,
//! * [`attention`] — per-sequence self-attention plus the four
//!   cross-attention mechanisms (additive, subtractive, multiplicative,
//!   dot-product),
//! * [`model`] — the end-to-end network: encode both answers, relate them,
//!   aggregate, pool, predict,
//! * [`data`] — vocabulary, tokenization, batching, dataset files, and a
//!   synthetic answer-pair generator,
//! * [`train`] — Adam, the training loop, checkpoints, seeding,
//! * [`eval`] — accuracy, AUC, and a logistic-regression overlap baseline,
//! * [`checks`] — the finite-difference verification suite.
//!
//! All numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the aliases below fix the default 64-bit instantiation used by the CLI
//! and the tests.

pub mod attention;
pub mod checks;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Default 64-bit tensor; `Tensor<f32>` remains available for callers that
/// want the narrower width.
pub type Tensor = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
