//! Numerical laboratory for contrastive representation collapse.
//!
//! The crate provides InfoNCE, DCL, VICreg, Barlow Twins and an orthonormal
//! anchor-regression loss with analytic gradients, a small batch-normalized
//! MLP trained by plain SGD on a synthetic rank-1 cluster benchmark, collapse
//! diagnostics, and constructive checks that equal or sign-collinear
//! embeddings are stationary points of InfoNCE.
//!
//! All numerical code is generic over [`Scalar`]; the `*64` aliases below are
//! the instantiations the tooling and tests use.

// `!(x > eps)` is deliberate: it also rejects NaN. Index loops mirror the
// formulas they implement.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod anchors;
pub mod diagnostics;
pub mod error;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod scalar;
pub mod synthdata;
pub mod theorem;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = linalg::Matrix<f64>;
pub type EmbeddingBatch64 = losses::EmbeddingBatch<f64>;
pub type AnchorSet64 = anchors::AnchorSet<f64>;
pub type MlpModel64 = model::MlpModel<f64>;
