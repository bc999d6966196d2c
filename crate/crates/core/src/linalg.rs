//! Small dense kernels: a row-major matrix, row normalization and its
//! Jacobian action, Gram–Schmidt orthonormalization and Jacobi singular values.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::scalar::{dot, norm, Scalar};

/// Rows with norm at or below this cannot be normalized.
pub const ZERO_ROW_EPS: f64 = 1e-12;

/// Gram–Schmidt pivots at or below this mark the input as rank deficient.
pub const PIVOT_EPS: f64 = 1e-10;

const JACOBI_MAX_SWEEPS: usize = 100;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    /// Wraps row-major `data`; rejects a length mismatch or non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "matrix data length",
                expected: rows * cols,
                found: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("matrix data"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    context: "row length",
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Converts from `f64` rows (used by file readers and tests).
    pub fn from_f64_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let rows: Vec<Vec<T>> = rows
            .iter()
            .map(|r| r.as_ref().iter().map(|&x| T::lit(x)).collect())
            .collect();
        Self::from_rows(&rows)
    }

    pub fn to_f64_rows(&self) -> Vec<Vec<f64>> {
        self.row_iter()
            .map(|r| r.iter().map(|x| x.as_f64()).collect())
            .collect()
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[T]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                context: "matmul inner dimension",
                expected: self.cols,
                found: other.rows,
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                for (o, &b) in orow.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                context: "matmul_t shared dimension",
                expected: self.cols,
                found: other.cols,
            });
        }
        Ok(Self::from_fn(self.rows, other.rows, |i, j| {
            dot(self.row(i), other.row(j))
        }))
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::DimensionMismatch {
                context: "t_matmul shared dimension",
                expected: self.rows,
                found: other.rows,
            });
        }
        let mut out = Self::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &bv) in orow.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(out)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// `self += s · other`, shapes must agree.
    pub fn add_scaled(&mut self, s: T, other: &Self) -> Result<()> {
        self.check_same_shape(other, "add_scaled")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn row_norm(&self, i: usize) -> T {
        norm(self.row(i))
    }

    pub fn frobenius_sq(&self) -> T {
        dot(&self.data, &self.data)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    /// Largest absolute entrywise difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks `top` above `bottom`.
    pub fn vstack(top: &Self, bottom: &Self) -> Result<Self> {
        if top.cols != bottom.cols {
            return Err(Error::DimensionMismatch {
                context: "vstack columns",
                expected: top.cols,
                found: bottom.cols,
            });
        }
        let mut data = top.data.clone();
        data.extend_from_slice(&bottom.data);
        Ok(Self {
            rows: top.rows + bottom.rows,
            cols: top.cols,
            data,
        })
    }

    /// Subtracts the column means from every row.
    pub fn mean_centered(&self) -> Self {
        let mut out = self.clone();
        if self.rows == 0 {
            return out;
        }
        let n = T::lit(self.rows as f64);
        for j in 0..self.cols {
            let mean = (0..self.rows).map(|i| self[(i, j)]).sum::<T>() / n;
            for i in 0..self.rows {
                out[(i, j)] -= mean;
            }
        }
        out
    }

    fn check_same_shape(&self, other: &Self, context: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch {
                context,
                expected: self.rows * self.cols,
                found: other.rows * other.cols,
            });
        }
        Ok(())
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Scales every row to unit Euclidean norm.
pub fn normalize_rows<T: Scalar>(m: &Matrix<T>) -> Result<Matrix<T>> {
    let eps = T::lit(ZERO_ROW_EPS);
    let mut out = m.clone();
    for i in 0..m.rows() {
        let n = m.row_norm(i);
        if !(n > eps) {
            return Err(Error::ZeroRow {
                row: i,
                threshold: ZERO_ROW_EPS,
            });
        }
        for x in out.row_mut(i) {
            *x /= n;
        }
    }
    Ok(out)
}

/// Pulls an upstream gradient `g` (taken with respect to `z / ‖z‖`) back to
/// the raw vector `z`: `(g − z (zᵀg)/(zᵀz)) / ‖z‖`.
///
/// Any component of `g` parallel to `z` is annihilated.
pub fn normalization_jvp<T: Scalar>(z_raw: &[T], g: &[T]) -> Result<Vec<T>> {
    if z_raw.len() != g.len() {
        return Err(Error::DimensionMismatch {
            context: "normalization_jvp",
            expected: z_raw.len(),
            found: g.len(),
        });
    }
    let zz = dot(z_raw, z_raw);
    let n = zz.sqrt();
    if !(n > T::lit(ZERO_ROW_EPS)) {
        return Err(Error::ZeroRow {
            row: 0,
            threshold: ZERO_ROW_EPS,
        });
    }
    let coef = dot(z_raw, g) / zz;
    Ok(z_raw.iter().zip(g).map(|(&z, &gi)| (gi - coef * z) / n).collect())
}

/// Applies [`normalization_jvp`] to every row pair of `raw` and `grad_unit`.
pub fn normalization_jvp_rows<T: Scalar>(raw: &Matrix<T>, grad_unit: &Matrix<T>) -> Result<Matrix<T>> {
    if raw.shape() != grad_unit.shape() {
        return Err(Error::DimensionMismatch {
            context: "normalization_jvp_rows",
            expected: raw.rows() * raw.cols(),
            found: grad_unit.rows() * grad_unit.cols(),
        });
    }
    let mut out = Matrix::zeros(raw.rows(), raw.cols());
    for i in 0..raw.rows() {
        let r = normalization_jvp(raw.row(i), grad_unit.row(i)).map_err(|e| match e {
            Error::ZeroRow { threshold, .. } => Error::ZeroRow { row: i, threshold },
            other => other,
        })?;
        out.row_mut(i).copy_from_slice(&r);
    }
    Ok(out)
}

/// Orthonormalizes the rows of `m` with two-pass modified Gram–Schmidt.
///
/// The row span is preserved and row `i` of the result lies in the span of
/// input rows `0..=i`.
pub fn orthonormalize<T: Scalar>(m: &Matrix<T>) -> Result<Matrix<T>> {
    let pivot_eps = T::lit(PIVOT_EPS);
    let mut q = m.clone();
    for i in 0..m.rows() {
        let mut v = q.row(i).to_vec();
        for _pass in 0..2 {
            for j in 0..i {
                let qj = q.row(j);
                let c = dot(qj, &v);
                for (vk, &qk) in v.iter_mut().zip(qj) {
                    *vk -= c * qk;
                }
            }
        }
        let n = norm(&v);
        if !(n > pivot_eps) {
            return Err(Error::RankDeficient {
                row: i,
                pivot: n.as_f64(),
            });
        }
        for (dst, x) in q.row_mut(i).iter_mut().zip(v) {
            *dst = x / n;
        }
    }
    Ok(q)
}

/// Singular values in descending order (`min(rows, cols)` of them), via
/// one-sided Jacobi rotations.
pub fn singular_values<T: Scalar>(m: &Matrix<T>) -> Vec<T> {
    // Orthogonalize the rows of whichever orientation has fewer rows; the
    // final row norms are the singular values.
    let mut b = if m.rows() >= m.cols() { m.transpose() } else { m.clone() };
    let n = b.rows();
    let tol = T::epsilon();
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(b.row(p), b.row(p));
                let beta = dot(b.row(q), b.row(q));
                let gamma = dot(b.row(p), b.row(q));
                if gamma == T::zero() || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                let cols = b.cols();
                for k in 0..cols {
                    let bp = b[(p, k)];
                    let bq = b[(q, k)];
                    b[(p, k)] = c * bp - s * bq;
                    b[(q, k)] = s * bp + c * bq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<T> = (0..n).map(|i| b.row_norm(i)).collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    sv
}
