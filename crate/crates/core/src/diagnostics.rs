//! Collapse and separability statistics of an embedding matrix.

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::error::{Error, Result};
use crate::linalg::{singular_values, Matrix, ZERO_ROW_EPS};
use crate::scalar::{dot, norm, Scalar};

/// Sum over dimensions of the population (1/N) variance.
pub fn embedding_variance<T: Scalar>(z: &Matrix<T>) -> Result<T> {
    let n = z.rows();
    if n < 2 {
        return Err(Error::BatchTooSmall { min: 2, got: n });
    }
    let c = z.mean_centered();
    Ok(c.frobenius_sq() / T::lit(n as f64))
}

/// Effective rank and `σ₂/σ₁` of the mean-centered rows.
///
/// Effective rank is `exp(H(p))` with `p_i = σ_i / Σσ`. A matrix whose
/// centered rows are all zero reports `(1, 0)`.
pub fn effective_rank<T: Scalar>(z: &Matrix<T>) -> Result<(T, T)> {
    let n = z.rows();
    if n < 2 {
        return Err(Error::BatchTooSmall { min: 2, got: n });
    }
    // Rounding noise left after centering (e.g. identical rows whose mean is
    // not exactly representable) is not spread: singular values below the
    // usual numerical-rank tolerance count as zero.
    let tol = T::lit(n.max(z.cols()) as f64) * T::epsilon() * z.frobenius_sq().sqrt();
    let sv: Vec<T> = singular_values(&z.mean_centered())
        .into_iter()
        .map(|s| if s > tol { s } else { T::zero() })
        .collect();
    let total: T = sv.iter().copied().sum();
    if !(total > T::zero()) {
        return Ok((T::one(), T::zero()));
    }
    let entropy = sv
        .iter()
        .filter(|&&s| s > T::zero())
        .map(|&s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum::<T>();
    let ratio = if sv.len() > 1 { sv[1] / sv[0] } else { T::zero() };
    Ok((entropy.exp(), ratio))
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::DimensionMismatch {
            context: "labels",
            expected: rows,
            found: labels.len(),
        });
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
        return Err(Error::LabelOutOfRange { index, label, classes });
    }
    Ok(())
}

/// Index of the largest score; ties go to the lowest index.
fn argmax<T: Scalar>(scores: impl Iterator<Item = T>) -> usize {
    let mut best = 0;
    let mut best_score = T::neg_infinity();
    for (i, s) in scores.enumerate() {
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    best
}

/// Fraction of rows whose most cosine-similar anchor is their label.
pub fn nearest_anchor_accuracy<T: Scalar>(z: &Matrix<T>, labels: &[usize], anchors: &AnchorSet<T>) -> Result<T> {
    check_labels(labels, z.rows(), anchors.k())?;
    if z.cols() != anchors.d() {
        return Err(Error::DimensionMismatch {
            context: "nearest_anchor_accuracy dim",
            expected: anchors.d(),
            found: z.cols(),
        });
    }
    if z.rows() == 0 {
        return Ok(T::zero());
    }
    // anchors are unit and ‖z_i‖ is common to a row, so the dot product ranks
    // anchors exactly like cosine similarity
    let hits = (0..z.rows())
        .filter(|&i| argmax((0..anchors.k()).map(|c| dot(z.row(i), anchors.anchor(c)))) == labels[i])
        .count();
    Ok(T::lit(hits as f64 / z.rows() as f64))
}

fn unit_or_zero<T: Scalar>(row: &[T]) -> Vec<T> {
    let n = norm(row);
    if n > T::lit(ZERO_ROW_EPS) {
        row.iter().map(|&x| x / n).collect()
    } else {
        vec![T::zero(); row.len()]
    }
}

/// Nearest-centroid (cosine) accuracy on the test split. Centroids are the
/// class means of the unit-normalized training rows.
pub fn centroid_probe_accuracy<T: Scalar>(
    z_train: &Matrix<T>,
    labels_train: &[usize],
    z_test: &Matrix<T>,
    labels_test: &[usize],
) -> Result<T> {
    let classes = labels_train.iter().chain(labels_test).max().map_or(0, |m| m + 1);
    check_labels(labels_train, z_train.rows(), classes)?;
    check_labels(labels_test, z_test.rows(), classes)?;
    if z_train.cols() != z_test.cols() {
        return Err(Error::DimensionMismatch {
            context: "centroid probe dim",
            expected: z_train.cols(),
            found: z_test.cols(),
        });
    }
    let d = z_train.cols();
    let mut centroids = vec![vec![T::zero(); d]; classes];
    let mut counts = vec![0usize; classes];
    for (row, &y) in z_train.row_iter().zip(labels_train) {
        for (c, u) in centroids[y].iter_mut().zip(unit_or_zero(row)) {
            *c += u;
        }
        counts[y] += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::MissingClass(missing));
    }
    let centroids: Vec<Vec<T>> = centroids.iter().map(|c| unit_or_zero(c)).collect();
    if z_test.rows() == 0 {
        return Ok(T::zero());
    }
    let hits = z_test
        .row_iter()
        .zip(labels_test)
        .filter(|(row, &y)| argmax(centroids.iter().map(|c| dot(row, c))) == y)
        .count();
    Ok(T::lit(hits as f64 / z_test.rows() as f64))
}

/// Collapse metrics of one embedding matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSnapshot {
    /// Variance of the unit-normalized embeddings.
    pub emb_variance: f64,
    /// Variance of the raw embeddings.
    pub emb_variance_raw: f64,
    pub eff_rank: f64,
    pub sv_ratio: f64,
    pub anchor_acc: Option<f64>,
    pub probe_acc: f64,
    pub per_class_alignment: Vec<Option<f64>>,
}

/// Rows used as the probe's training split: even indices.
pub fn probe_split(n: usize) -> (Vec<usize>, Vec<usize>) {
    ((0..n).step_by(2).collect(), (1..n).step_by(2).collect())
}

/// Computes every snapshot field from raw embeddings.
///
/// Spread statistics use the unit-normalized rows. The centroid probe trains
/// on even-indexed rows and tests on odd-indexed rows. Anchor statistics are
/// reported only when `anchors` is given.
pub fn snapshot<T: Scalar>(
    raw: &Matrix<T>,
    labels: &[usize],
    anchors: Option<&AnchorSet<T>>,
) -> Result<DiagnosticsSnapshot> {
    check_labels(labels, raw.rows(), usize::MAX)?;
    let unit = crate::linalg::normalize_rows(raw)?;
    let emb_variance = embedding_variance(&unit)?.as_f64();
    let emb_variance_raw = embedding_variance(raw)?.as_f64();
    let (eff_rank, sv_ratio) = effective_rank(&unit)?;
    let (tr, te) = probe_split(raw.rows());
    let y_tr: Vec<usize> = tr.iter().map(|&i| labels[i]).collect();
    let y_te: Vec<usize> = te.iter().map(|&i| labels[i]).collect();
    let probe_acc = centroid_probe_accuracy(&unit.select_rows(&tr), &y_tr, &unit.select_rows(&te), &y_te)?.as_f64();
    let (anchor_acc, per_class_alignment) = match anchors {
        Some(a) => {
            let acc = nearest_anchor_accuracy(&unit, labels, a)?.as_f64();
            let k = a.k();
            let mut sums = vec![0.0; k];
            let mut counts = vec![0usize; k];
            for (row, &y) in unit.row_iter().zip(labels) {
                sums[y] += dot(row, a.anchor(y)).as_f64();
                counts[y] += 1;
            }
            let align = sums
                .into_iter()
                .zip(counts)
                .map(|(s, c)| (c > 0).then(|| s / c as f64))
                .collect();
            (Some(acc), align)
        }
        None => (None, Vec::new()),
    };
    Ok(DiagnosticsSnapshot {
        emb_variance,
        emb_variance_raw,
        eff_rank: eff_rank.as_f64(),
        sv_ratio: sv_ratio.as_f64(),
        anchor_acc,
        probe_acc,
        per_class_alignment,
    })
}
