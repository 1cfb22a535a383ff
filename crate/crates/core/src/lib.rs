//! Out-of-distribution detection via softmax of scaled cosine similarity.
//!
//! The crate provides:
//!
//! - [`tensor`]: a minimal tensor with reverse-mode differentiation;
//! - [`ops`]: dense / conv2d / ReLU / batch-norm / pooling / L2-normalize /
//!   softmax cross-entropy layer operations;
//! - [`heads`]: the four output-head variants (standard softmax, scaled
//!   logits, single-FC cosine with fixed or predicted scale, two-FC cosine);
//! - [`model`]: layer stacks with named parameters bound into per-pass graphs;
//! - [`train`]: SGD with momentum, the step-wise learning-rate schedule, and
//!   selective weight decay that exempts the normalized last layer;
//! - [`checkpoint`]: deterministic, bit-exact model serialization;
//! - [`data`]: synthetic blob / noise / shifted-blob datasets and a binary
//!   dataset file format;
//! - [`detect`]: OOD scoring, thresholding, ensembling, and the
//!   AUROC / AUPR metric family.

pub mod checkpoint;
pub mod data;
pub mod detect;
pub mod error;
pub mod heads;
pub mod model;
pub mod ops;
pub mod rng;
pub mod tensor;
pub mod train;

#[cfg(any(test, feature = "test-oracles"))]
pub mod oracle;

pub use error::{Error, Result};
pub use tensor::{backward, Element, NdArray, Tensor};
