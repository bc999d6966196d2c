//! Fixed orthonormal class anchors and per-class alignment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{orthonormalize, Matrix};
use crate::losses::EmbeddingBatch;
use crate::scalar::{dot, Scalar};

/// `k` mutually orthonormal unit anchors in `d` dimensions, one per class.
///
/// Anchors are drawn once from a seeded ChaCha8 stream and never updated.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet<T> {
    seed: u64,
    anchors: Matrix<T>,
}

impl<T: Scalar> AnchorSet<T> {
    /// Orthonormalizes a seeded standard-Gaussian `k × d` draw.
    pub fn generate(k: usize, d: usize, seed: u64) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::InvalidConfig(format!(
                "anchor set needs k >= 1 and d >= 1 (got k={k}, d={d})"
            )));
        }
        if k > d {
            return Err(Error::TooManyClasses { classes: k, dim: d });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = Matrix::from_fn(k, d, |_, _| T::lit(rng.sample::<f64, _>(StandardNormal)));
        let anchors = orthonormalize(&draw)?;
        Ok(Self { seed, anchors })
    }

    /// Wraps externally supplied anchors (e.g. read back from a manifest).
    ///
    /// Rows must already be orthonormal within `1e-8`.
    pub fn from_matrix(anchors: Matrix<T>, seed: u64) -> Result<Self> {
        let k = anchors.rows();
        if k == 0 || k > anchors.cols() {
            return Err(Error::TooManyClasses {
                classes: k,
                dim: anchors.cols(),
            });
        }
        let gram = anchors.matmul_t(&anchors)?;
        if gram.max_abs_diff(&Matrix::identity(k))?.as_f64() > 1e-8 {
            return Err(Error::InvalidConfig("anchors are not orthonormal".into()));
        }
        Ok(Self { seed, anchors })
    }

    pub fn k(&self) -> usize {
        self.anchors.rows()
    }

    pub fn d(&self) -> usize {
        self.anchors.cols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.anchors
    }

    pub fn anchor(&self, class: usize) -> &[T] {
        self.anchors.row(class)
    }

    /// `‖C Cᵀ − I‖_max`.
    pub fn orthonormality_error(&self) -> T {
        let gram = self.anchors.matmul_t(&self.anchors).expect("anchor gram shape");
        gram.max_abs_diff(&Matrix::identity(self.k()))
            .expect("anchor gram is k x k")
    }
}

/// Mean cosine between each class's unit embeddings and its anchor.
///
/// Classes without samples are `None`.
pub fn anchor_alignment<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    labels: &[usize],
    anchors: &AnchorSet<T>,
) -> Result<Vec<Option<T>>> {
    let unit = batch.unit();
    if labels.len() != unit.rows() {
        return Err(Error::DimensionMismatch {
            context: "anchor_alignment labels",
            expected: unit.rows(),
            found: labels.len(),
        });
    }
    if unit.cols() != anchors.d() {
        return Err(Error::DimensionMismatch {
            context: "anchor_alignment embedding dim",
            expected: anchors.d(),
            found: unit.cols(),
        });
    }
    let k = anchors.k();
    let mut sums = vec![T::zero(); k];
    let mut counts = vec![0usize; k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::LabelOutOfRange {
                index: i,
                label: y,
                classes: k,
            });
        }
        sums[y] += dot(unit.row(i), anchors.anchor(y));
        counts[y] += 1;
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| (c > 0).then(|| s / T::lit(c as f64)))
        .collect())
}
