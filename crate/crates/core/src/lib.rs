//! Center-based relaxed learning: a small laboratory for training classifiers
//! that resist membership inference, together with the baseline defenses and
//! the adaptive shadow-model attack suite used to measure them.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: dense matrices, softmax variants, entropy, AUC.
//! - [`model`]: ReLU MLP with an explicit encoder/classifier split.
//! - [`losses`]: cross-entropy family, relaxed losses, center losses.
//! - [`trainer`]: the relaxed training loop for every supported defense.
//! - [`data`]: synthetic blobs, CSV datasets, target/shadow splits.
//! - [`attacks`]: entropy, modified-entropy, input-gradient and NN attacks.
//! - [`experiment`]: JSON-configured runs backing the `crl` command line.
//!
//! Independent work items (shadow models, sweep points, per-sample scores)
//! are dispatched through [`exec::Executor`], which uses rayon when the
//! `parallel` feature is enabled and a plain loop otherwise.

// Validation uses `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod attacks;
pub mod data;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Executor;
pub use losses::{Branch, CenterBank, LossResult, RelaxConfig};
pub use model::ModelParams;
pub use numerics::{Matrix, ProbVector};
