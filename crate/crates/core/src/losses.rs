//! Contrastive objectives with hand-derived gradients.
//!
//! Cosine losses (InfoNCE, DCL, the anchor regression) read the unit
//! embeddings and report `∂L/∂z` in [`GradientReport::grad_unit`]; the raw
//! gradient follows by the normalization Jacobian. The Euclidean losses
//! (VICreg, Barlow Twins) read the raw embeddings directly, so their
//! `grad_unit` is zero and `grad_raw` carries everything.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::error::{Error, Result};
use crate::linalg::{normalization_jvp_rows, normalize_rows, Matrix};
use crate::scalar::{dot, Scalar};

/// Minimum batch size for the softmax losses (each sample needs a negative).
pub const MIN_CONTRASTIVE_BATCH: usize = 4;

/// Batch std at or below this makes a Barlow Twins dimension degenerate.
pub const BARLOW_STD_EPS: f64 = 1e-8;

/// Raw embeddings, their unit-normalized rows, and the positive-pair map.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch<T> {
    raw: Matrix<T>,
    unit: Matrix<T>,
    pair_map: Vec<usize>,
}

impl<T: Scalar> EmbeddingBatch<T> {
    /// `pair_map[i]` is the positive of row `i`; it must be a fixed-point-free
    /// involution over the rows.
    pub fn new(raw: Matrix<T>, pair_map: Vec<usize>) -> Result<Self> {
        let n = raw.rows();
        if pair_map.len() != n {
            return Err(Error::DimensionMismatch {
                context: "pair_map length",
                expected: n,
                found: pair_map.len(),
            });
        }
        for (i, &j) in pair_map.iter().enumerate() {
            if j >= n {
                return Err(Error::InvalidPairMap(format!("pair_map[{i}] = {j} out of range")));
            }
            if j == i {
                return Err(Error::InvalidPairMap(format!("row {i} is paired with itself")));
            }
            if pair_map[j] != i {
                return Err(Error::InvalidPairMap(format!(
                    "pair_map[{i}] = {j} but pair_map[{j}] = {}",
                    pair_map[j]
                )));
            }
        }
        let unit = normalize_rows(&raw)?;
        Ok(Self { raw, unit, pair_map })
    }

    /// Pairs row `i` with row `i + N/2` (originals stacked above their views).
    pub fn paired_halves(raw: Matrix<T>) -> Result<Self> {
        let n = raw.rows();
        if !n.is_multiple_of(2) {
            return Err(Error::InvalidPairMap(format!("odd row count {n}")));
        }
        let h = n / 2;
        let pair_map = (0..n).map(|i| if i < h { i + h } else { i - h }).collect();
        Self::new(raw, pair_map)
    }

    pub fn raw(&self) -> &Matrix<T> {
        &self.raw
    }

    pub fn unit(&self) -> &Matrix<T> {
        &self.unit
    }

    pub fn pair_map(&self) -> &[usize] {
        &self.pair_map
    }

    pub fn len(&self) -> usize {
        self.raw.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.raw.cols()
    }

    /// Row indices of the two views: `a[t] < b[t] = pair_map[a[t]]`.
    fn view_indices(&self) -> (Vec<usize>, Vec<usize>) {
        let a: Vec<usize> = (0..self.len()).filter(|&i| i < self.pair_map[i]).collect();
        let b = a.iter().map(|&i| self.pair_map[i]).collect();
        (a, b)
    }
}

/// Temperature and weights for every objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    pub cloa_weight: f64,
    /// `(distance, variance, covariance)` weights.
    pub vicreg_weights: [f64; 3],
    pub vicreg_gamma: f64,
    pub vicreg_eps: f64,
    pub bt_lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            cloa_weight: 1.0,
            vicreg_weights: [25.0, 25.0, 1.0],
            vicreg_gamma: 1.0,
            vicreg_eps: 1e-4,
            bt_lambda: 5e-3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(what.to_string()));
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad("temperature must be finite and > 0");
        }
        if !(self.cloa_weight.is_finite() && self.cloa_weight >= 0.0) {
            return bad("cloa_weight must be finite and >= 0");
        }
        if self.vicreg_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("vicreg_weights must be finite and >= 0");
        }
        if !(self.vicreg_gamma.is_finite() && self.vicreg_gamma > 0.0) {
            return bad("vicreg_gamma must be finite and > 0");
        }
        if !(self.vicreg_eps.is_finite() && self.vicreg_eps > 0.0) {
            return bad("vicreg_eps must be finite and > 0");
        }
        if !(self.bt_lambda.is_finite() && self.bt_lambda > 0.0) {
            return bad("bt_lambda must be finite and > 0");
        }
        Ok(())
    }
}

/// Loss value with its per-sample probabilities and named parts.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    pub total: T,
    /// Probability each row assigns its positive (softmax losses only).
    pub per_sample_prob: Vec<T>,
    pub term_values: BTreeMap<String, T>,
}

/// Gradients of a loss with respect to unit and raw embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport<T> {
    /// Partial derivative with respect to the unit rows.
    pub grad_unit: Matrix<T>,
    /// Total derivative with respect to the raw rows.
    pub grad_raw: Matrix<T>,
    pub value: T,
}

pub type LossOutput<T> = (LossBreakdown<T>, GradientReport<T>);

/// Base contrastive objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Objective {
    InfoNce,
    Dcl,
    VicReg,
    BarlowTwins,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::InfoNce => "infonce",
            Objective::Dcl => "dcl",
            Objective::VicReg => "vicreg",
            Objective::BarlowTwins => "barlow",
        }
    }
}

/// A base objective optionally combined with the anchor regression term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LossSpec {
    pub objective: Objective,
    pub with_anchors: bool,
}

impl LossSpec {
    pub const fn plain(objective: Objective) -> Self {
        Self {
            objective,
            with_anchors: false,
        }
    }

    pub const fn anchored(objective: Objective) -> Self {
        Self {
            objective,
            with_anchors: true,
        }
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.with_anchors {
            write!(f, "cloa-{}", self.objective.name())
        } else {
            f.write_str(self.objective.name())
        }
    }
}

impl FromStr for LossSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (with_anchors, base) = match s.strip_prefix("cloa-") {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let objective = match base {
            "infonce" => Objective::InfoNce,
            "dcl" => Objective::Dcl,
            "vicreg" => Objective::VicReg,
            "barlow" => Objective::BarlowTwins,
            _ => return Err(Error::UnsupportedLoss(s.to_string())),
        };
        Ok(Self {
            objective,
            with_anchors,
        })
    }
}

impl Serialize for LossSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LossSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Denominator {
    /// All rows except `i` (positive included).
    WithPositive,
    /// Negatives only.
    Decoupled,
}

fn softmax_contrastive<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    temperature: f64,
    denom: Denominator,
) -> Result<LossOutput<T>> {
    let n = batch.len();
    if n < MIN_CONTRASTIVE_BATCH {
        return Err(Error::BatchTooSmall {
            min: MIN_CONTRASTIVE_BATCH,
            got: n,
        });
    }
    let tau = T::lit(temperature);
    let z = batch.unit();
    let logits = z.matmul_t(z)?.scale(T::one() / tau);

    // weights[i][a] = ∂L_i/∂s_ia, so that ∂L/∂z = (W + Wᵀ) Z / τ
    let mut weights = Matrix::zeros(n, n);
    let mut probs = Vec::with_capacity(n);
    let mut total = T::zero();
    for i in 0..n {
        let j = batch.pair_map[i];
        let li = logits.row(i);
        let in_denominator = |a: usize| a != i && (denom == Denominator::WithPositive || a != j);
        let max = (0..n)
            .filter(|&a| in_denominator(a))
            .map(|a| li[a])
            .fold(T::neg_infinity(), T::max);
        let sum: T = (0..n).filter(|&a| in_denominator(a)).map(|a| (li[a] - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - li[j];
        let wi = weights.row_mut(i);
        for a in (0..n).filter(|&a| in_denominator(a)) {
            wi[a] = (li[a] - lse).exp();
        }
        wi[j] -= T::one();
        probs.push(match denom {
            Denominator::WithPositive => (li[j] - lse).exp(),
            Denominator::Decoupled => T::one() / (T::one() + (lse - li[j]).exp()),
        });
    }
    let sym = Matrix::from_fn(n, n, |i, a| weights[(i, a)] + weights[(a, i)]);
    let grad_unit = sym.matmul(z)?.scale(T::one() / tau);
    let grad_raw = normalization_jvp_rows(batch.raw(), &grad_unit)?;
    if !total.is_finite() {
        return Err(Error::NonFinite("contrastive loss value"));
    }
    Ok((
        LossBreakdown {
            total,
            per_sample_prob: probs,
            term_values: BTreeMap::new(),
        },
        GradientReport {
            grad_unit,
            grad_raw,
            value: total,
        },
    ))
}

/// InfoNCE summed over rows; the denominator runs over every `a ≠ i`,
/// positive included.
pub fn infonce<T: Scalar>(batch: &EmbeddingBatch<T>, cfg: &LossConfig) -> Result<LossOutput<T>> {
    softmax_contrastive(batch, cfg.temperature, Denominator::WithPositive)
}

/// Decoupled contrastive loss: the positive is removed from the denominator.
///
/// `per_sample_prob` still reports the positive's share of the full softmax.
pub fn dcl<T: Scalar>(batch: &EmbeddingBatch<T>, cfg: &LossConfig) -> Result<LossOutput<T>> {
    softmax_contrastive(batch, cfg.temperature, Denominator::Decoupled)
}

struct ViewGrad<T> {
    value: T,
    grad: Matrix<T>,
}

fn column_means<T: Scalar>(x: &Matrix<T>) -> Vec<T> {
    let n = T::lit(x.rows() as f64);
    (0..x.cols())
        .map(|j| (0..x.rows()).map(|i| x[(i, j)]).sum::<T>() / n)
        .collect()
}

fn centered<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let means = column_means(x);
    Matrix::from_fn(x.rows(), x.cols(), |i, j| x[(i, j)] - means[j])
}

/// Hinge on per-dimension std, averaged over dimensions: `mean_j relu(γ − √(var_j + ε))`
/// with the unbiased variance.
fn vicreg_variance<T: Scalar>(x: &Matrix<T>, gamma: T, eps: T) -> ViewGrad<T> {
    let (n, d) = x.shape();
    let xc = centered(x);
    let nm1 = T::lit((n - 1) as f64);
    let dt = T::lit(d as f64);
    let mut value = T::zero();
    let mut grad = Matrix::zeros(n, d);
    for j in 0..d {
        let var = (0..n).map(|i| xc[(i, j)] * xc[(i, j)]).sum::<T>() / nm1;
        let std = (var + eps).sqrt();
        if std < gamma {
            value += (gamma - std) / dt;
            // ∂/∂x_ij of −std/d (the mean of the centering term is zero)
            for i in 0..n {
                grad[(i, j)] = -xc[(i, j)] / (nm1 * std * dt);
            }
        }
    }
    ViewGrad { value, grad }
}

/// `(1/d) Σ_{j≠k} C_jk²` with `C = X_cᵀ X_c / (N−1)`.
fn vicreg_covariance<T: Scalar>(x: &Matrix<T>) -> Result<ViewGrad<T>> {
    let (n, d) = x.shape();
    let xc = centered(x);
    let nm1 = T::lit((n - 1) as f64);
    let dt = T::lit(d as f64);
    let cov = xc.t_matmul(&xc)?.scale(T::one() / nm1);
    let mut value = T::zero();
    let mut off = Matrix::zeros(d, d);
    for a in 0..d {
        for b in 0..d {
            if a != b {
                value += cov[(a, b)] * cov[(a, b)];
                off[(a, b)] = cov[(a, b)];
            }
        }
    }
    value /= dt;
    // ∂/∂X = 4 X_c offdiag(C) / (d (N−1)); already column-centered
    let grad = xc.matmul(&off)?.scale(T::lit(4.0) / (dt * nm1));
    Ok(ViewGrad { value, grad })
}

fn check_views<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, context: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch {
            context,
            expected: a.rows() * a.cols(),
            found: b.rows() * b.cols(),
        });
    }
    if a.rows() < 2 {
        return Err(Error::BatchTooSmall { min: 2, got: a.rows() });
    }
    Ok(())
}

/// VICreg on raw views. Gradient rows are `view_a` stacked above `view_b`.
///
/// Terms: `distance` = mean squared row difference; `variance` = hinge on
/// each view's per-dimension std, averaged over the two views; `covariance`
/// = off-diagonal covariance energy of each view, summed over the views.
pub fn vicreg<T: Scalar>(view_a: &Matrix<T>, view_b: &Matrix<T>, cfg: &LossConfig) -> Result<LossOutput<T>> {
    check_views(view_a, view_b, "vicreg views")?;
    let (n, d) = view_a.shape();
    let nt = T::lit(n as f64);
    let gamma = T::lit(cfg.vicreg_gamma);
    let eps = T::lit(cfg.vicreg_eps);
    let [w_sim, w_var, w_cov] = cfg.vicreg_weights.map(T::lit);
    let half = T::lit(0.5);

    let mut distance = T::zero();
    let mut grad_a = Matrix::zeros(n, d);
    let mut grad_b = Matrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            let diff = view_a[(i, j)] - view_b[(i, j)];
            distance += diff * diff;
            let g = w_sim * T::lit(2.0) * diff / nt;
            grad_a[(i, j)] += g;
            grad_b[(i, j)] -= g;
        }
    }
    distance /= nt;

    let var_a = vicreg_variance(view_a, gamma, eps);
    let var_b = vicreg_variance(view_b, gamma, eps);
    let cov_a = vicreg_covariance(view_a)?;
    let cov_b = vicreg_covariance(view_b)?;
    grad_a.add_scaled(w_var * half, &var_a.grad)?;
    grad_b.add_scaled(w_var * half, &var_b.grad)?;
    grad_a.add_scaled(w_cov, &cov_a.grad)?;
    grad_b.add_scaled(w_cov, &cov_b.grad)?;

    let variance = half * (var_a.value + var_b.value);
    let covariance = cov_a.value + cov_b.value;
    let total = w_sim * distance + w_var * variance + w_cov * covariance;
    let grad_raw = Matrix::vstack(&grad_a, &grad_b)?;
    let terms = BTreeMap::from([
        ("distance".to_string(), distance),
        ("variance".to_string(), variance),
        ("covariance".to_string(), covariance),
    ]);
    Ok(euclidean_output(total, terms, grad_raw))
}

struct Standardized<T> {
    z: Matrix<T>,
    std: Vec<T>,
}

fn standardize<T: Scalar>(x: &Matrix<T>, view: char) -> Result<Standardized<T>> {
    let (n, d) = x.shape();
    let nt = T::lit(n as f64);
    let xc = centered(x);
    let mut std = Vec::with_capacity(d);
    for j in 0..d {
        let s = ((0..n).map(|i| xc[(i, j)] * xc[(i, j)]).sum::<T>() / nt).sqrt();
        if !(s > T::lit(BARLOW_STD_EPS)) {
            return Err(Error::DegenerateDimension {
                view,
                dim: j,
                std: s.as_f64(),
            });
        }
        std.push(s);
    }
    let z = Matrix::from_fn(n, d, |i, j| xc[(i, j)] / std[j]);
    Ok(Standardized { z, std })
}

/// Backward pass of per-column standardization with population std.
fn standardize_backward<T: Scalar>(s: &Standardized<T>, g: &Matrix<T>) -> Matrix<T> {
    let (n, d) = g.shape();
    let nt = T::lit(n as f64);
    let mut out = Matrix::zeros(n, d);
    for j in 0..d {
        let mean_g = (0..n).map(|i| g[(i, j)]).sum::<T>() / nt;
        let mean_gz = (0..n).map(|i| g[(i, j)] * s.z[(i, j)]).sum::<T>() / nt;
        for i in 0..n {
            out[(i, j)] = (g[(i, j)] - mean_g - s.z[(i, j)] * mean_gz) / s.std[j];
        }
    }
    out
}

/// Barlow Twins on raw views: `Σ_i (1 − C_ii)² + λ Σ_{i≠j} C_ij²` where `C`
/// is the cross-correlation of the batch-standardized views (population std).
///
/// `off_diagonal` is reported before the `λ` factor.
pub fn barlow_twins<T: Scalar>(view_a: &Matrix<T>, view_b: &Matrix<T>, cfg: &LossConfig) -> Result<LossOutput<T>> {
    check_views(view_a, view_b, "barlow views")?;
    let (n, d) = view_a.shape();
    let nt = T::lit(n as f64);
    let lambda = T::lit(cfg.bt_lambda);
    let sa = standardize(view_a, 'a')?;
    let sb = standardize(view_b, 'b')?;
    let c = sa.z.t_matmul(&sb.z)?.scale(T::one() / nt);

    let mut on = T::zero();
    let mut off = T::zero();
    let mut dc = Matrix::zeros(d, d);
    for p in 0..d {
        for q in 0..d {
            let v = c[(p, q)];
            if p == q {
                on += (T::one() - v) * (T::one() - v);
                dc[(p, q)] = -T::lit(2.0) * (T::one() - v);
            } else {
                off += v * v;
                dc[(p, q)] = T::lit(2.0) * lambda * v;
            }
        }
    }
    // C = Zaᵀ Zb / N  ⇒  ∂/∂Za = Zb dCᵀ / N,  ∂/∂Zb = Za dC / N
    let g_za = sb.z.matmul_t(&dc)?.scale(T::one() / nt);
    let g_zb = sa.z.matmul(&dc)?.scale(T::one() / nt);
    let grad_raw = Matrix::vstack(&standardize_backward(&sa, &g_za), &standardize_backward(&sb, &g_zb))?;
    let total = on + lambda * off;
    let terms = BTreeMap::from([("on_diagonal".to_string(), on), ("off_diagonal".to_string(), off)]);
    Ok(euclidean_output(total, terms, grad_raw))
}

fn euclidean_output<T: Scalar>(total: T, terms: BTreeMap<String, T>, grad_raw: Matrix<T>) -> LossOutput<T> {
    let (r, c) = grad_raw.shape();
    (
        LossBreakdown {
            total,
            per_sample_prob: Vec::new(),
            term_values: terms,
        },
        GradientReport {
            grad_unit: Matrix::zeros(r, c),
            grad_raw,
            value: total,
        },
    )
}

type TwoViewLoss<T> = fn(&Matrix<T>, &Matrix<T>, &LossConfig) -> Result<LossOutput<T>>;

/// Runs a two-view Euclidean loss on the batch's paired rows and scatters the
/// gradient back to batch order.
fn euclidean_on_batch<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    cfg: &LossConfig,
    loss: TwoViewLoss<T>,
) -> Result<LossOutput<T>> {
    let (ia, ib) = batch.view_indices();
    let a = batch.raw().select_rows(&ia);
    let b = batch.raw().select_rows(&ib);
    let (breakdown, report) = loss(&a, &b, cfg)?;
    let h = ia.len();
    let mut grad_raw = Matrix::zeros(batch.len(), batch.dim());
    for (t, (&i, &j)) in ia.iter().zip(&ib).enumerate() {
        grad_raw.row_mut(i).copy_from_slice(report.grad_raw.row(t));
        grad_raw.row_mut(j).copy_from_slice(report.grad_raw.row(t + h));
    }
    Ok((
        breakdown,
        GradientReport {
            grad_unit: Matrix::zeros(batch.len(), batch.dim()),
            grad_raw,
            value: report.value,
        },
    ))
}

/// Anchor regression `Σ_{masked i} (1 − z_iᵀ c_{y_i})` on unit embeddings.
///
/// Rows outside the mask contribute nothing; an empty mask yields zero loss.
pub fn cloa_anchor<T: Scalar>(
    batch: &EmbeddingBatch<T>,
    labels: &[usize],
    anchors: &AnchorSet<T>,
    label_mask: &[bool],
) -> Result<LossOutput<T>> {
    let n = batch.len();
    for (context, len) in [("cloa labels", labels.len()), ("cloa mask", label_mask.len())] {
        if len != n {
            return Err(Error::DimensionMismatch {
                context,
                expected: n,
                found: len,
            });
        }
    }
    if batch.dim() != anchors.d() {
        return Err(Error::DimensionMismatch {
            context: "cloa anchor dimension",
            expected: anchors.d(),
            found: batch.dim(),
        });
    }
    let z = batch.unit();
    let mut total = T::zero();
    let mut grad_unit = Matrix::zeros(n, batch.dim());
    for i in (0..n).filter(|&i| label_mask[i]) {
        let y = labels[i];
        if y >= anchors.k() {
            return Err(Error::LabelOutOfRange {
                index: i,
                label: y,
                classes: anchors.k(),
            });
        }
        let c = anchors.anchor(y);
        total += T::one() - dot(z.row(i), c);
        for (g, &cv) in grad_unit.row_mut(i).iter_mut().zip(c) {
            *g = -cv;
        }
    }
    let grad_raw = normalization_jvp_rows(batch.raw(), &grad_unit)?;
    Ok((
        LossBreakdown {
            total,
            per_sample_prob: Vec::new(),
            term_values: BTreeMap::from([("cloa".to_string(), total)]),
        },
        GradientReport {
            grad_unit,
            grad_raw,
            value: total,
        },
    ))
}

/// Evaluates a base objective on a paired batch.
pub fn base_loss<T: Scalar>(
    objective: Objective,
    batch: &EmbeddingBatch<T>,
    cfg: &LossConfig,
) -> Result<LossOutput<T>> {
    match objective {
        Objective::InfoNce => infonce(batch, cfg),
        Objective::Dcl => dcl(batch, cfg),
        Objective::VicReg => euclidean_on_batch(batch, cfg, vicreg),
        Objective::BarlowTwins => euclidean_on_batch(batch, cfg, barlow_twins),
    }
}

/// Labels, anchors and mask for the anchor-regression term.
#[derive(Clone, Copy, Debug)]
pub struct AnchorTargets<'a, T> {
    pub labels: &'a [usize],
    pub anchors: &'a AnchorSet<T>,
    pub mask: &'a [bool],
}

/// `base + cloa_weight · L_CLOA`, or the base alone for a plain spec.
///
/// `term_values` of an anchored spec carries `contrastive` and `cloa` next to
/// the base loss's own terms.
pub fn composite<T: Scalar>(
    spec: LossSpec,
    batch: &EmbeddingBatch<T>,
    targets: Option<AnchorTargets<'_, T>>,
    cfg: &LossConfig,
) -> Result<LossOutput<T>> {
    let (mut breakdown, mut report) = base_loss(spec.objective, batch, cfg)?;
    if !spec.with_anchors {
        return Ok((breakdown, report));
    }
    let targets =
        targets.ok_or_else(|| Error::InvalidConfig(format!("loss `{spec}` needs labels, anchors and a mask")))?;
    let (cloa, cloa_grad) = cloa_anchor(batch, targets.labels, targets.anchors, targets.mask)?;
    let w = T::lit(cfg.cloa_weight);
    let contrastive = breakdown.total;
    breakdown.total = contrastive + w * cloa.total;
    breakdown.term_values.insert("contrastive".to_string(), contrastive);
    breakdown.term_values.insert("cloa".to_string(), cloa.total);
    report.grad_unit.add_scaled(w, &cloa_grad.grad_unit)?;
    report.grad_raw.add_scaled(w, &cloa_grad.grad_raw)?;
    report.value = breakdown.total;
    Ok((breakdown, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn cfg_tau(t: f64) -> LossConfig {
        LossConfig {
            temperature: t,
            ..LossConfig::default()
        }
    }

    /// Central differences of `f` over every entry of `x`; max relative error
    /// against `analytic`, with a floor on the denominator.
    fn fd_rel_error(x: &Matrix<f64>, analytic: &Matrix<f64>, f: impl Fn(&Matrix<f64>) -> f64) -> f64 {
        let h = 1e-5;
        let scale = analytic.max_abs().max(1e-6);
        let mut worst = 0.0f64;
        for k in 0..x.as_slice().len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_mut_slice()[k] += h;
            xm.as_mut_slice()[k] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let a = analytic.as_slice()[k];
            worst = worst.max((fd - a).abs() / a.abs().max(1e-2 * scale));
        }
        worst
    }

    /// Aggregated unit gradient assembled term by term from the per-sample
    /// pieces (`∂L_i/∂z_i`, `∂L_i/∂z_{j(i)}`, `∂L_i/∂z_a`).
    fn infonce_unit_grad_from_pieces(z: &Matrix<f64>, pair: &[usize], tau: f64) -> Matrix<f64> {
        let n = z.rows();
        let d = z.cols();
        let s = |i: usize, a: usize| dot(z.row(i), z.row(a)) / tau;
        let mut g = Matrix::zeros(n, d);
        for i in 0..n {
            let j = pair[i];
            let neg: Vec<usize> = (0..n).filter(|&a| a != i && a != j).collect();
            let neg_sum: f64 = neg.iter().map(|&a| s(i, a).exp()).sum();
            let p_i = s(i, j).exp() / (s(i, j).exp() + neg_sum);
            let c = (1.0 - p_i) / tau;
            for k in 0..d {
                // -∂L_i/∂z_i = c (z_j − Σ_a q_a z_a)
                let mix: f64 = neg.iter().map(|&a| s(i, a).exp() / neg_sum * z[(a, k)]).sum();
                g[(i, k)] -= c * (z[(j, k)] - mix);
                // -∂L_i/∂z_j = c z_i
                g[(j, k)] -= c * z[(i, k)];
                // -∂L_i/∂z_a = −c q_a z_i
                for &a in &neg {
                    g[(a, k)] += c * s(i, a).exp() / neg_sum * z[(i, k)];
                }
            }
        }
        g
    }

    fn brute_infonce(z: &Matrix<f64>, pair: &[usize], tau: f64, decoupled: bool) -> f64 {
        let n = z.rows();
        let mut total = 0.0;
        for i in 0..n {
            let j = pair[i];
            let pos = (dot(z.row(i), z.row(j)) / tau).exp();
            let mut den = 0.0;
            for a in 0..n {
                if a == i || (decoupled && a == j) {
                    continue;
                }
                den += (dot(z.row(i), z.row(a)) / tau).exp();
            }
            total -= (pos / den).ln();
        }
        total
    }

    #[test]
    fn pair_map_validation() {
        let raw = gaussian(4, 3, 1);
        assert!(EmbeddingBatch::new(raw.clone(), vec![1, 0, 3, 2]).is_ok());
        assert!(matches!(
            EmbeddingBatch::new(raw.clone(), vec![0, 1, 3, 2]),
            Err(Error::InvalidPairMap(_))
        ));
        assert!(matches!(
            EmbeddingBatch::new(raw.clone(), vec![1, 2, 3, 0]),
            Err(Error::InvalidPairMap(_))
        ));
        assert!(matches!(
            EmbeddingBatch::new(raw, vec![1, 0, 3]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn infonce_all_equal_batch() {
        let raw = Matrix::from_fn(4, 3, |i, j| [0.3, -1.2, 0.5][j] * (1.0 + i as f64));
        let batch = EmbeddingBatch::paired_halves(raw).unwrap();
        let (b, g) = infonce(&batch, &cfg_tau(0.7)).unwrap();
        for p in &b.per_sample_prob {
            assert!((p - 1.0 / 3.0).abs() <= 1e-12);
        }
        assert!(g.grad_raw.max_abs() <= 1e-12);
        assert!((b.total - 4.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn infonce_hand_batch_matches_direct_sum() {
        let raw =
            Matrix::<f64>::from_rows(&[[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]]).unwrap();
        let pair = vec![1, 0, 3, 2];
        let batch = EmbeddingBatch::new(raw.clone(), pair.clone()).unwrap();
        let (b, _) = infonce(&batch, &cfg_tau(1.0)).unwrap();
        // each row: −log(e / (e + 1 + 1))
        let e = std::f64::consts::E;
        let expected = -4.0 * (e / (e + 2.0)).ln();
        assert!((b.total - expected).abs() < 1e-12);
        assert!((b.total - brute_infonce(&raw, &pair, 1.0, false)).abs() < 1e-12);

        let (bd, _) = dcl(&batch, &cfg_tau(1.0)).unwrap();
        // decoupled: −log(e / 2)
        assert!((bd.total - (-4.0 * (e / 2.0).ln())).abs() < 1e-12);
        assert!((bd.total - b.total).abs() > 0.1);
    }

    #[test]
    fn infonce_gradient_matches_per_term_assembly() {
        for seed in 0..5 {
            let raw = gaussian(8, 5, 40 + seed);
            let batch = EmbeddingBatch::paired_halves(raw).unwrap();
            let tau = 0.4;
            let (_, g) = infonce(&batch, &cfg_tau(tau)).unwrap();
            let oracle = infonce_unit_grad_from_pieces(batch.unit(), batch.pair_map(), tau);
            assert!(g.grad_unit.max_abs_diff(&oracle).unwrap() <= 1e-10);
        }
    }

    #[test]
    fn softmax_losses_match_finite_differences() {
        for seed in 0..20u64 {
            let n = 4 + 2 * (seed as usize % 7);
            let d = 2 + seed as usize % 6;
            let raw = gaussian(n, d, 1000 + seed);
            let cfg = cfg_tau(0.3 + 0.1 * (seed % 5) as f64);
            for (name, decoupled) in [("infonce", false), ("dcl", true)] {
                let batch = EmbeddingBatch::paired_halves(raw.clone()).unwrap();
                let (b, g) = if decoupled {
                    dcl(&batch, &cfg).unwrap()
                } else {
                    infonce(&batch, &cfg).unwrap()
                };
                let brute = brute_infonce(batch.unit(), batch.pair_map(), cfg.temperature, decoupled);
                assert!((b.total - brute).abs() <= 1e-10 * brute.abs().max(1.0));
                let err = fd_rel_error(&raw, &g.grad_raw, |x| {
                    let bb = EmbeddingBatch::paired_halves(x.clone()).unwrap();
                    if decoupled {
                        dcl(&bb, &cfg).unwrap().0.total
                    } else {
                        infonce(&bb, &cfg).unwrap().0.total
                    }
                });
                assert!(err <= 1e-4, "{name} seed {seed}: rel err {err}");
            }
        }
    }

    #[test]
    fn dcl_all_equal_value() {
        let raw = Matrix::from_fn(4, 3, |_, j| [1.0, 2.0, 2.0][j]);
        let batch = EmbeddingBatch::paired_halves(raw).unwrap();
        let (b, g) = dcl(&batch, &cfg_tau(1.0)).unwrap();
        assert!((b.total - 4.0 * 2f64.ln()).abs() < 1e-12);
        assert!(g.grad_raw.max_abs() < 1e-12);
    }

    #[test]
    fn softmax_losses_reject_small_batches() {
        let batch = EmbeddingBatch::paired_halves(gaussian(2, 3, 1)).unwrap();
        assert!(matches!(
            infonce(&batch, &LossConfig::default()),
            Err(Error::BatchTooSmall { min: 4, got: 2 })
        ));
        assert!(matches!(
            dcl(&batch, &LossConfig::default()),
            Err(Error::BatchTooSmall { .. })
        ));
    }

    #[test]
    fn softmax_losses_are_scale_invariant() {
        let raw = gaussian(8, 4, 3);
        let cfg = LossConfig::default();
        let base = EmbeddingBatch::paired_halves(raw.clone()).unwrap();
        for c in [0.5, 3.0] {
            let scaled = EmbeddingBatch::paired_halves(raw.scale(c)).unwrap();
            for f in [infonce::<f64>, dcl::<f64>] {
                let v0 = f(&base, &cfg).unwrap().0.total;
                let v1 = f(&scaled, &cfg).unwrap().0.total;
                assert!((v0 - v1).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn infonce_rank1_sign_batch_has_zero_raw_gradient() {
        let zs = [0.6, 0.0, -0.8];
        let signs = [1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0];
        let mags = [0.5, 1.5, 2.0, 0.7, 1.1, 0.9, 1.3, 1.9];
        let raw = Matrix::from_fn(8, 3, |i, j| signs[i] * mags[i] * zs[j]);
        let batch = EmbeddingBatch::paired_halves(raw).unwrap();
        let (_, g) = infonce(&batch, &LossConfig::default()).unwrap();
        assert!(g.grad_unit.max_abs() > 1e-3);
        assert!(g.grad_raw.max_abs() <= 1e-10);
    }

    #[test]
    fn vicreg_identical_spread_views() {
        // columns with std well above γ = 1 and zero covariance
        let a = Matrix::<f64>::from_rows(&[[2.0, 2.0], [2.0, -2.0], [-2.0, 2.0], [-2.0, -2.0]]).unwrap();
        let (b, _) = vicreg(&a, &a, &LossConfig::default()).unwrap();
        assert_eq!(b.term_values["distance"], 0.0);
        assert_eq!(b.term_values["variance"], 0.0);
        assert!(b.term_values["covariance"].abs() < 1e-15);
        assert!(b.total.abs() < 1e-12);
    }

    #[test]
    fn vicreg_constant_batch() {
        let a = Matrix::from_fn(4, 2, |_, j| [0.5, -1.0][j]);
        let cfg = LossConfig::default();
        let (b, _) = vicreg(&a, &a, &cfg).unwrap();
        // each view: mean_j (γ − √ε) = 1 − 0.01; averaged over the two views
        let expected_var = 1.0 - 1e-4f64.sqrt();
        assert!((b.term_values["variance"] - expected_var).abs() < 1e-15);
        assert_eq!(b.term_values["covariance"], 0.0);
        assert!((b.total - 25.0 * expected_var).abs() < 1e-12);
    }

    #[test]
    fn vicreg_and_barlow_match_finite_differences() {
        let cfg = LossConfig {
            bt_lambda: 0.3,
            vicreg_gamma: 1.5,
            ..LossConfig::default()
        };
        for seed in 0..20u64 {
            let n = 4 + seed as usize % 13;
            let d = 2 + seed as usize % 7;
            let both = gaussian(2 * n, d, 500 + seed);
            let split = |x: &Matrix<f64>| {
                let a: Vec<usize> = (0..n).collect();
                let b: Vec<usize> = (n..2 * n).collect();
                (x.select_rows(&a), x.select_rows(&b))
            };
            let (a, b) = split(&both);
            let (_, g) = vicreg(&a, &b, &cfg).unwrap();
            let err = fd_rel_error(&both, &g.grad_raw, |x| {
                let (a, b) = split(x);
                vicreg(&a, &b, &cfg).unwrap().0.total
            });
            assert!(err <= 1e-4, "vicreg seed {seed}: {err}");

            let (_, g) = barlow_twins(&a, &b, &cfg).unwrap();
            let err = fd_rel_error(&both, &g.grad_raw, |x| {
                let (a, b) = split(x);
                barlow_twins(&a, &b, &cfg).unwrap().0.total
            });
            assert!(err <= 1e-4, "barlow seed {seed}: {err}");
        }
    }

    #[test]
    fn vicreg_shape_mismatch() {
        let a = gaussian(4, 3, 1);
        let b = gaussian(4, 2, 2);
        assert!(matches!(
            vicreg(&a, &b, &LossConfig::default()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn barlow_identity_and_negated_views() {
        let a = Matrix::<f64>::from_rows(&[[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]]).unwrap();
        let (b, _) = barlow_twins(&a, &a, &LossConfig::default()).unwrap();
        assert!(b.total.abs() < 1e-15);

        let neg = a.scale(-1.0);
        let (b, _) = barlow_twins(&a, &neg, &LossConfig::default()).unwrap();
        assert!((b.term_values["on_diagonal"] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn barlow_degenerate_dimension() {
        let a = Matrix::<f64>::from_rows(&[[1.0, 3.0], [2.0, 3.0], [3.0, 3.0]]).unwrap();
        let b = gaussian(3, 2, 4);
        assert!(matches!(
            barlow_twins(&a, &b, &LossConfig::default()),
            Err(Error::DegenerateDimension { view: 'a', dim: 1, .. })
        ));
    }

    #[test]
    fn cloa_endpoints_and_bounds() {
        let anchors = AnchorSet::<f64>::generate(3, 3, 8).unwrap();
        let labels = [0, 1, 2, 0];
        let mask = [true; 4];
        let c = |y: usize, s: f64| anchors.anchor(y).iter().map(|x| x * s).collect::<Vec<_>>();
        let cases = [(1.0, 0.0), (-1.0, 2.0)];
        for (s, expected) in cases {
            let raw = Matrix::<f64>::from_rows(&[c(0, s), c(1, s), c(2, s), c(0, s)]).unwrap();
            let batch = EmbeddingBatch::paired_halves(raw.scale(1.7)).unwrap();
            let (b, _) = cloa_anchor(&batch, &labels, &anchors, &mask).unwrap();
            assert!((b.total - 4.0 * expected).abs() < 1e-12);
        }
        // orthogonal to the class anchor: loss 1 per sample
        let raw = Matrix::<f64>::from_rows(&[c(1, 1.0), c(2, 1.0), c(0, 1.0), c(1, 1.0)]).unwrap();
        let batch = EmbeddingBatch::paired_halves(raw).unwrap();
        let (b, _) = cloa_anchor(&batch, &labels, &anchors, &mask).unwrap();
        assert!((b.total - 4.0).abs() < 1e-12);
    }

    #[test]
    fn cloa_empty_mask_and_label_errors() {
        let anchors = AnchorSet::<f64>::generate(2, 4, 8).unwrap();
        let batch = EmbeddingBatch::paired_halves(gaussian(6, 4, 9)).unwrap();
        let labels = [0, 1, 5, 0, 1, 1];
        let (b, g) = cloa_anchor(&batch, &labels, &anchors, &[false; 6]).unwrap();
        assert_eq!(b.total, 0.0);
        assert_eq!(g.grad_raw.max_abs(), 0.0);
        // out-of-range label only matters when masked in
        assert!(cloa_anchor(&batch, &labels, &anchors, &[true, true, false, true, true, true]).is_ok());
        assert!(matches!(
            cloa_anchor(&batch, &labels, &anchors, &[true; 6]),
            Err(Error::LabelOutOfRange {
                index: 2,
                label: 5,
                classes: 2
            })
        ));
    }

    #[test]
    fn cloa_matches_finite_differences() {
        for seed in 0..20u64 {
            let n = 4 + 2 * (seed as usize % 6);
            let d = 3 + seed as usize % 5;
            let k = 1 + seed as usize % d.min(4);
            let anchors = AnchorSet::<f64>::generate(k, d, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
            let raw = gaussian(n, d, 700 + seed);
            let batch = EmbeddingBatch::paired_halves(raw.clone()).unwrap();
            let (_, g) = cloa_anchor(&batch, &labels, &anchors, &mask).unwrap();
            let err = fd_rel_error(&raw, &g.grad_raw, |x| {
                let b = EmbeddingBatch::paired_halves(x.clone()).unwrap();
                cloa_anchor(&b, &labels, &anchors, &mask).unwrap().0.total
            });
            assert!(err <= 1e-4, "cloa seed {seed}: {err}");
        }
    }

    #[test]
    fn composite_reduces_to_base() {
        let anchors = AnchorSet::<f64>::generate(3, 4, 1).unwrap();
        let batch = EmbeddingBatch::paired_halves(gaussian(8, 4, 2)).unwrap();
        let labels = [0, 1, 2, 0, 0, 1, 2, 0];
        let full = [true; 8];
        let none = [false; 8];
        for obj in [
            Objective::InfoNce,
            Objective::Dcl,
            Objective::VicReg,
            Objective::BarlowTwins,
        ] {
            let (bb, gb) = base_loss(obj, &batch, &LossConfig::default()).unwrap();
            let zero_w = LossConfig {
                cloa_weight: 0.0,
                ..LossConfig::default()
            };
            for (cfg, mask) in [(&zero_w, &full), (&LossConfig::default(), &none)] {
                let t = AnchorTargets {
                    labels: &labels,
                    anchors: &anchors,
                    mask,
                };
                let (bc, gc) = composite(LossSpec::anchored(obj), &batch, Some(t), cfg).unwrap();
                assert_eq!(bc.total, bb.total);
                assert_eq!(bc.per_sample_prob, bb.per_sample_prob);
                assert_eq!(gc.grad_raw, gb.grad_raw);
                assert_eq!(gc.grad_unit, gb.grad_unit);
            }
        }
    }

    #[test]
    fn composite_is_additive() {
        let anchors = AnchorSet::<f64>::generate(3, 5, 4).unwrap();
        let cfg = LossConfig {
            cloa_weight: 0.7,
            ..LossConfig::default()
        };
        let labels = [0, 1, 2, 1, 0, 1, 2, 1, 0, 2];
        let mask = [true, false, true, true, false, false, true, false, true, true];
        let batch = EmbeddingBatch::paired_halves(gaussian(10, 5, 6)).unwrap();
        let t = AnchorTargets {
            labels: &labels,
            anchors: &anchors,
            mask: &mask,
        };
        let (_, gc) = cloa_anchor(&batch, &labels, &anchors, &mask).unwrap();
        for obj in [
            Objective::InfoNce,
            Objective::Dcl,
            Objective::VicReg,
            Objective::BarlowTwins,
        ] {
            let (_, gb) = base_loss(obj, &batch, &cfg).unwrap();
            let (b, g) = composite(LossSpec::anchored(obj), &batch, Some(t), &cfg).unwrap();
            let mut expected = gb.grad_raw.clone();
            expected.add_scaled(0.7, &gc.grad_raw).unwrap();
            assert!(g.grad_raw.max_abs_diff(&expected).unwrap() <= 1e-12);
            assert!((b.total - b.term_values["contrastive"] - 0.7 * b.term_values["cloa"]).abs() < 1e-12);
        }
    }

    #[test]
    fn composite_needs_targets() {
        let batch = EmbeddingBatch::paired_halves(gaussian(8, 4, 2)).unwrap();
        assert!(matches!(
            composite(
                LossSpec::anchored(Objective::InfoNce),
                &batch,
                None,
                &LossConfig::default()
            ),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn loss_spec_names_round_trip() {
        for name in [
            "infonce",
            "dcl",
            "vicreg",
            "barlow",
            "cloa-infonce",
            "cloa-dcl",
            "cloa-vicreg",
            "cloa-barlow",
        ] {
            let spec: LossSpec = name.parse().unwrap();
            assert_eq!(spec.to_string(), name);
        }
        assert!(matches!("simclr".parse::<LossSpec>(), Err(Error::UnsupportedLoss(_))));
    }

    #[test]
    fn euclidean_losses_follow_pair_map_order() {
        // interleaved pairing (0↔1, 2↔3, ...) must agree with the stacked layout
        let n = 6;
        let stacked = gaussian(2 * n, 3, 77);
        let mut inter = Matrix::zeros(2 * n, 3);
        let mut pair = vec![0; 2 * n];
        for t in 0..n {
            inter.row_mut(2 * t).copy_from_slice(stacked.row(t));
            inter.row_mut(2 * t + 1).copy_from_slice(stacked.row(t + n));
            pair[2 * t] = 2 * t + 1;
            pair[2 * t + 1] = 2 * t;
        }
        let a = EmbeddingBatch::paired_halves(stacked).unwrap();
        let b = EmbeddingBatch::new(inter, pair).unwrap();
        for obj in [Objective::VicReg, Objective::BarlowTwins] {
            let (la, ga) = base_loss(obj, &a, &LossConfig::default()).unwrap();
            let (lb, gb) = base_loss(obj, &b, &LossConfig::default()).unwrap();
            assert!((la.total - lb.total).abs() < 1e-12);
            for t in 0..n {
                assert_eq!(ga.grad_raw.row(t), gb.grad_raw.row(2 * t));
                assert_eq!(ga.grad_raw.row(t + n), gb.grad_raw.row(2 * t + 1));
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn infonce_probabilities_in_unit_interval(seed in 0u64..10_000, half in 2usize..8, d in 2usize..6) {
                let batch = EmbeddingBatch::paired_halves(gaussian(2 * half, d, seed)).unwrap();
                let (b, g) = infonce(&batch, &LossConfig::default()).unwrap();
                prop_assert!(b.per_sample_prob.iter().all(|&p| p > 0.0 && p <= 1.0));
                prop_assert!(b.total.is_finite() && g.grad_raw.is_finite());
            }

            #[test]
            fn cloa_per_sample_bounded(seed in 0u64..10_000) {
                let anchors = AnchorSet::<f64>::generate(3, 4, seed).unwrap();
                let batch = EmbeddingBatch::paired_halves(gaussian(6, 4, seed + 1)).unwrap();
                let labels = [0, 1, 2, 2, 1, 0];
                for i in 0..6 {
                    let mut mask = [false; 6];
                    mask[i] = true;
                    let (b, _) = cloa_anchor(&batch, &labels, &anchors, &mask).unwrap();
                    prop_assert!(b.total >= 0.0 && b.total <= 2.0);
                }
            }
        }
    }
}
