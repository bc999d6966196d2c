//! Degenerate embedding configurations (all rows equal, or all rows on one
//! line through the origin) and a check that InfoNCE-type losses have zero
//! gradient there with respect to the raw embeddings.
//!
//! Only stationarity is checked. Whether these points are minima, maxima or
//! saddles is not examined.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::{base_loss, EmbeddingBatch, LossConfig, LossSpec, Objective};
use crate::scalar::{dot, norm, Scalar};

/// Raw row norms are drawn uniformly from this range.
pub const MAGNITUDE_RANGE: (f64, f64) = (0.5, 2.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DegenerateKind {
    /// `raw_i = m_i z*`.
    AllEqual,
    /// `raw_i = m_i α_i z*` with `α_i ∈ {−1, +1}`.
    Rank1Signs,
}

/// How rank-1 rows are arranged into positive pairs `i ↔ i + N/2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    /// Pair rows of equal sign wherever the sign counts allow.
    SameSign,
    /// Every pair joins a `+` row with a `−` row.
    Mixed,
}

/// A degenerate configuration, optionally with one row nudged off the line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegenerateConfig {
    pub kind: DegenerateKind,
    pub z_star: Vec<f64>,
    /// All `+1` for [`DegenerateKind::AllEqual`].
    pub signs: Vec<i8>,
    pub magnitudes: Vec<f64>,
    /// `(row, offset)` added to that raw row.
    pub perturbation: Option<(usize, Vec<f64>)>,
}

impl DegenerateConfig {
    pub fn n(&self) -> usize {
        self.magnitudes.len()
    }

    pub fn d(&self) -> usize {
        self.z_star.len()
    }

    /// Raw rows `m_i α_i z*` (plus the perturbation, if any).
    pub fn raw<T: Scalar>(&self) -> Matrix<T> {
        let mut raw = Matrix::from_fn(self.n(), self.d(), |i, j| {
            T::lit(self.magnitudes[i] * f64::from(self.signs[i]) * self.z_star[j])
        });
        if let Some((row, offset)) = &self.perturbation {
            for (x, &o) in raw.row_mut(*row).iter_mut().zip(offset) {
                *x += T::lit(o);
            }
        }
        raw
    }

    /// The positive pairs are always `i ↔ i + N/2`.
    pub fn batch<T: Scalar>(&self) -> Result<EmbeddingBatch<T>> {
        EmbeddingBatch::paired_halves(self.raw())
    }
}

fn check_shape(n: usize, d: usize) -> Result<()> {
    if n < 4 {
        return Err(Error::BatchTooSmall { min: 4, got: n });
    }
    if !n.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!("N must be even (got {n})")));
    }
    if d < 2 {
        return Err(Error::InvalidConfig(format!("d must be at least 2 (got {d})")));
    }
    Ok(())
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn magnitudes(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.random_range(MAGNITUDE_RANGE.0..=MAGNITUDE_RANGE.1))
        .collect()
}

/// Every raw row a positive multiple of one random unit vector.
pub fn make_equal_config(n: usize, d: usize, seed: u64) -> Result<DegenerateConfig> {
    check_shape(n, d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z_star = random_unit(&mut rng, d);
    Ok(DegenerateConfig {
        kind: DegenerateKind::AllEqual,
        z_star,
        signs: vec![1; n],
        magnitudes: magnitudes(&mut rng, n),
        perturbation: None,
    })
}

/// Rank-1 configuration with same-sign pairing.
pub fn make_rank1_config(n: usize, d: usize, seed: u64) -> Result<DegenerateConfig> {
    make_rank1_config_with(n, d, seed, Pairing::SameSign)
}

/// Rows `±m_i z*` with both signs present, laid out according to `pairing`.
pub fn make_rank1_config_with(n: usize, d: usize, seed: u64, pairing: Pairing) -> Result<DegenerateConfig> {
    check_shape(n, d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z_star = random_unit(&mut rng, d);
    let half = n / 2;
    let mut signs = vec![0i8; n];
    match pairing {
        Pairing::SameSign => {
            // at least one + and one − row; a pair is mixed only when the
            // count of − rows is odd
            let negatives = rng.random_range(1..n);
            let mut pool: Vec<i8> = (0..n).map(|i| if i < negatives { -1 } else { 1 }).collect();
            pool.sort_unstable();
            let mut pairs: Vec<(i8, i8)> = pool.chunks(2).map(|c| (c[0], c[1])).collect();
            pairs.shuffle(&mut rng);
            for (t, (a, b)) in pairs.into_iter().enumerate() {
                signs[t] = a;
                signs[t + half] = b;
            }
        }
        Pairing::Mixed => {
            for t in 0..half {
                let s = if rng.random_bool(0.5) { 1 } else { -1 };
                signs[t] = s;
                signs[t + half] = -s;
            }
        }
    }
    Ok(DegenerateConfig {
        kind: DegenerateKind::Rank1Signs,
        z_star,
        signs,
        magnitudes: magnitudes(&mut rng, n),
        perturbation: None,
    })
}

/// Adds an offset of norm `size`, orthogonal to `z*`, to one seeded row.
pub fn perturb(config: &DegenerateConfig, size: f64, seed: u64) -> DegenerateConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let row = rng.random_range(0..config.n());
    let z = &config.z_star;
    let dir = loop {
        let v: Vec<f64> = (0..config.d()).map(|_| rng.sample(StandardNormal)).collect();
        let p = dot(&v, z);
        let w: Vec<f64> = v.iter().zip(z).map(|(a, b)| a - p * b).collect();
        let n = norm(&w);
        if n > 1e-3 {
            break w.into_iter().map(|x| x / n).collect::<Vec<_>>();
        }
    };
    DegenerateConfig {
        perturbation: Some((row, dir.into_iter().map(|x| size * x).collect())),
        ..config.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

/// Gradient status of one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroGradReport {
    pub loss: String,
    pub n: usize,
    pub d: usize,
    pub temperature: f64,
    pub tol: f64,
    pub loss_value: f64,
    /// Probability each row assigns its positive.
    pub positive_probabilities: Vec<f64>,
    pub grad_unit_max_norm: f64,
    pub grad_raw_max_norm: f64,
    /// `β_i = g_i·z_i / z_i·z_i` on unit rows.
    pub beta_estimates: Vec<f64>,
    /// `max_i ‖g_i − β_i z_i‖`.
    pub parallelism_residual: f64,
    /// `Pass` iff `grad_raw_max_norm ≤ tol`.
    pub verdict: Verdict,
}

fn max_row_norm<T: Scalar>(m: &Matrix<T>) -> f64 {
    (0..m.rows()).map(|i| m.row_norm(i).as_f64()).fold(0.0, f64::max)
}

/// Evaluates `loss` on any paired batch and reports its gradient status.
pub fn zero_gradient_report<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    loss: LossSpec,
    cfg: &LossConfig,
    tol: f64,
) -> Result<ZeroGradReport> {
    if loss.with_anchors || !matches!(loss.objective, Objective::InfoNce | Objective::Dcl) {
        return Err(Error::UnsupportedLoss(loss.to_string()));
    }
    let (breakdown, report) = base_loss(loss.objective, batch, cfg)?;
    let unit = batch.unit();
    let mut beta_estimates = Vec::with_capacity(batch.len());
    let mut residual = 0.0f64;
    for i in 0..batch.len() {
        let z = unit.row(i);
        let g = report.grad_unit.row(i);
        let zz = dot(z, z);
        let beta = if zz > T::zero() { dot(g, z) / zz } else { T::zero() };
        let r: T = g
            .iter()
            .zip(z)
            .map(|(&gv, &zv)| {
                let e = gv - beta * zv;
                e * e
            })
            .sum::<T>()
            .sqrt();
        residual = residual.max(r.as_f64());
        beta_estimates.push(beta.as_f64());
    }
    let grad_raw_max_norm = max_row_norm(&report.grad_raw);
    Ok(ZeroGradReport {
        loss: loss.to_string(),
        n: batch.len(),
        d: batch.dim(),
        temperature: cfg.temperature,
        tol,
        loss_value: breakdown.total.as_f64(),
        positive_probabilities: breakdown.per_sample_prob.iter().map(|p| p.as_f64()).collect(),
        grad_unit_max_norm: max_row_norm(&report.grad_unit),
        grad_raw_max_norm,
        beta_estimates,
        parallelism_residual: residual,
        verdict: if grad_raw_max_norm <= tol {
            Verdict::Pass
        } else {
            Verdict::Fail
        },
    })
}

/// Builds the configuration's batch in `T` and reports its gradient status.
pub fn verify_zero_gradient<T: Scalar>(
    config: &DegenerateConfig,
    loss: LossSpec,
    cfg: &LossConfig,
    tol: f64,
) -> Result<ZeroGradReport> {
    zero_gradient_report(&config.batch::<T>()?, loss, cfg, tol)
}

/// Positive-pair probability of InfoNCE on an all-equal batch of size `n`
/// with unequal raw magnitudes. Always `1/(n−1)`: every logit is `1/τ`.
pub fn uniform_probability_check(n: usize, temperature: f64) -> Result<f64> {
    if n < 4 {
        return Err(Error::BatchTooSmall { min: 4, got: n });
    }
    let raw = Matrix::<f64>::from_fn(n, 2, |i, j| {
        let m = 0.5 + 1.5 * i as f64 / (n - 1) as f64;
        m * [0.6, 0.8][j]
    });
    let batch = EmbeddingBatch::paired_halves(raw)?;
    let cfg = LossConfig {
        temperature,
        ..LossConfig::default()
    };
    let (breakdown, _) = crate::losses::infonce(&batch, &cfg)?;
    Ok(breakdown.per_sample_prob[0])
}
