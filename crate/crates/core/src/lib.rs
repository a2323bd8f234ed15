//! Rotary-enhanced transformer operator (RETO) for point-cloud field regression.
//!
//! The crate maps 3D point clouds to per-point physical fields with a transformer
//! whose attention logits are modulated by 3D rotary positional embeddings, on top
//! of a fixed sinusoidal coordinate encoder. Everything needed for desk-scale
//! experiments lives here:
//!
//! - [`encoding`]: spectral sin/cos coordinate encoding and the dataset coordinate normalizer
//! - [`rope`]: rotary phase tables, rotation, and the complex-domain inner-product identity
//! - [`attention`]: scaled dot-product and multi-head attention
//! - [`model`]: parameters, forward evaluation, checkpoints
//! - [`train`]: reverse-mode gradients, finite-difference checks, Adam, StepLR, the training loop
//! - [`data`]: synthetic potential-flow samples, Z-score statistics, binary sample files, splits
//! - [`metrics`]: relative L2, error densities, attention entropy
//! - [`pipeline`]: dataset directories and split evaluation

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
mod binio;
pub mod data;
pub mod encoding;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod rope;
pub mod train;

pub use error::{Result, RetoError};
