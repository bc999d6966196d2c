//! Labeled points scattered along a few lines through the origin inside the
//! unit ball, and the negate-plus-noise augmentation.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{dot, norm, Scalar};

/// Attempts allowed when drawing cluster directions.
pub const MAX_DIRECTION_ATTEMPTS: usize = 1000;

/// Parameters of the cluster benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterParams {
    pub k: usize,
    pub per_cluster: usize,
    pub d: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Minimum angle in degrees between any two cluster lines.
    pub min_angle_deg: f64,
    /// Point magnitudes are uniform in `[lo, hi]`.
    pub magnitude_range: [f64; 2],
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            k: 3,
            per_cluster: 100,
            d: 3,
            noise_sigma: 0.05,
            seed: 0,
            min_angle_deg: 30.0,
            magnitude_range: [0.3, 1.0],
        }
    }
}

impl ClusterParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.k < 1 {
            return bad("data.k must be >= 1".into());
        }
        if self.d < 2 {
            return bad("data.d must be >= 2".into());
        }
        if self.per_cluster < 2 {
            return bad("data.per_cluster must be >= 2".into());
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("data.noise_sigma must be finite and >= 0".into());
        }
        let [lo, hi] = self.magnitude_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!(
                "data.magnitude_range must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]"
            ));
        }
        if !(0.0..=90.0).contains(&self.min_angle_deg) {
            return bad("data.min_angle_deg must be in [0, 90]".into());
        }
        Ok(())
    }
}

/// Points, labels and the unit direction of each cluster line.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset<T> {
    pub points: Matrix<T>,
    pub labels: Vec<usize>,
    pub cluster_dirs: Matrix<T>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl<T: Scalar> SyntheticDataset<T> {
    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    /// Number of classes (`max label + 1`).
    pub fn classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

/// Angle in degrees between the lines spanned by two unit vectors.
fn line_angle_deg(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b).abs().min(1.0).acos().to_degrees()
}

fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Draws `k` cluster lines at least `min_angle_deg` apart, then
/// `per_cluster` points `s·α·dir + ε` per line with random sign `s`,
/// magnitude `α ~ U[lo, hi]` and `ε ~ N(0, σ²I)`. Points that land outside
/// the unit ball are rescaled radially onto it.
pub fn generate_clusters<T: Scalar>(params: &ClusterParams) -> Result<SyntheticDataset<T>> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(params.k);
    let mut attempts = 0;
    while dirs.len() < params.k {
        if attempts >= MAX_DIRECTION_ATTEMPTS {
            return Err(Error::DirectionSamplingFailed { attempts });
        }
        attempts += 1;
        let cand = unit_gaussian(&mut rng, params.d);
        if dirs.iter().all(|d| line_angle_deg(d, &cand) >= params.min_angle_deg) {
            dirs.push(cand);
        }
    }

    let [lo, hi] = params.magnitude_range;
    let noise = Normal::new(0.0, params.noise_sigma).expect("validated sigma");
    let n = params.k * params.per_cluster;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (c, dir) in dirs.iter().enumerate() {
        for _ in 0..params.per_cluster {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let mag = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let mut p: Vec<f64> = dir.iter().map(|&x| sign * mag * x).collect();
            if params.noise_sigma > 0.0 {
                for v in &mut p {
                    *v += noise.sample(&mut rng);
                }
            }
            let pn = norm(&p);
            if pn > 1.0 {
                for v in &mut p {
                    *v /= pn;
                }
            }
            rows.push(p);
            labels.push(c);
        }
    }
    Ok(SyntheticDataset {
        points: Matrix::from_f64_rows(&rows)?,
        labels,
        cluster_dirs: Matrix::from_f64_rows(&dirs)?,
        noise_sigma: params.noise_sigma,
        seed: params.seed,
    })
}

/// `−points[i] + η_i` with `η_i ~ N(0, σ²I)` drawn from `rng`.
pub fn augment_negate_with<T: Scalar>(points: &Matrix<T>, aug_sigma: f64, rng: &mut impl Rng) -> Result<Matrix<T>> {
    if !(aug_sigma.is_finite() && aug_sigma >= 0.0) {
        return Err(Error::InvalidConfig(
            "augmentation sigma must be finite and >= 0".into(),
        ));
    }
    let mut out = points.scale(-T::one());
    if aug_sigma > 0.0 {
        for v in out.as_mut_slice() {
            *v += T::lit(aug_sigma * rng.sample::<f64, _>(StandardNormal));
        }
    }
    Ok(out)
}

/// Seeded [`augment_negate_with`].
pub fn augment_negate<T: Scalar>(points: &Matrix<T>, aug_sigma: f64, seed: u64) -> Result<Matrix<T>> {
    augment_negate_with(points, aug_sigma, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Formats a float with 17 significant digits.
pub(crate) fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes `x0,...,x{d-1},label` rows.
pub fn write_labeled_csv<T: Scalar, W: Write>(points: &Matrix<T>, labels: &[usize], out: W) -> Result<()> {
    if labels.len() != points.rows() {
        return Err(Error::DimensionMismatch {
            context: "csv labels",
            expected: points.rows(),
            found: labels.len(),
        });
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..points.cols()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for (row, &y) in points.row_iter().zip(labels) {
        let mut rec: Vec<String> = row.iter().map(|v| fmt17(v.as_f64())).collect();
        rec.push(y.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `x0,...,x{d-1},label` rows back.
pub fn read_labeled_csv<T: Scalar, R: Read>(input: R) -> Result<(Matrix<T>, Vec<usize>)> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    let d = header.len().saturating_sub(1);
    let expected: Vec<String> = (0..d).map(|j| format!("x{j}")).chain(["label".to_string()]).collect();
    if d == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::InvalidConfig(format!(
            "csv header must be x0,...,x{{d-1}},label; got {}",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let parse_err = |what: &str| Error::InvalidConfig(format!("csv row {}: bad {what}", line + 1));
        let row: Vec<f64> = (0..d)
            .map(|j| rec[j].trim().parse::<f64>().map_err(|_| parse_err("number")))
            .collect::<Result<_>>()?;
        rows.push(row);
        labels.push(rec[d].trim().parse::<usize>().map_err(|_| parse_err("label"))?);
    }
    if rows.is_empty() {
        return Ok((Matrix::zeros(0, d), labels));
    }
    Ok((Matrix::from_f64_rows(&rows)?, labels))
}

impl<T: Scalar> SyntheticDataset<T> {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_labeled_csv(&self.points, &self.labels, out)
    }
}
