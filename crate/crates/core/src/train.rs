//! Seeded SGD training of the encoder on paired `[originals ‖ augmentations]`
//! batches, with per-epoch diagnostics.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::diagnostics::{self, DiagnosticsSnapshot};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::{composite, AnchorTargets, EmbeddingBatch, LossBreakdown, LossConfig, LossSpec, Objective};
use crate::model::{MlpGradients, MlpModel, MlpSnapshot, Mode};
use crate::scalar::Scalar;
use crate::synthdata::{augment_negate_with, fmt17};

/// Header of the metrics CSV.
pub const METRICS_HEADER: [&str; 10] = [
    "epoch",
    "loss_total",
    "loss_contrastive",
    "loss_cloa",
    "emb_variance",
    "eff_rank",
    "sv_ratio",
    "anchor_acc",
    "probe_acc",
    "wall_ms",
];

// Independent ChaCha streams under the run seed.
const SHUFFLE_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;
const MASK_STREAM: u64 = 3;

/// Hidden and output widths; the input width comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub h1: usize,
    pub h2: usize,
    pub out_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            h1: 64,
            h2: 64,
            out_dim: 3,
        }
    }
}

/// Everything a run needs besides the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    /// Total SGD steps.
    pub steps: usize,
    /// Rows per batch: `batch_size / 2` originals plus their augmentations.
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossSpec,
    pub loss_config: LossConfig,
    /// Fraction of each class whose labels the anchor term may use.
    pub label_fraction: f64,
    pub anchor_seed: u64,
    /// Noise added by the negation augmentation.
    pub aug_sigma: f64,
    pub reduction: Reduction,
}

/// How per-row losses combine into the batch objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Mean,
    Sum,
}

impl Reduction {
    fn factor(self, rows: usize) -> f64 {
        match self {
            Reduction::Mean => 1.0 / rows as f64,
            Reduction::Sum => 1.0,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            learning_rate: 1.0,
            steps: 2000,
            batch_size: 64,
            seed: 0,
            loss: LossSpec::plain(Objective::InfoNce),
            loss_config: LossConfig::default(),
            label_fraction: 0.1,
            anchor_seed: 0,
            aug_sigma: 0.05,
            reduction: Reduction::Mean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("train.lr must be finite and > 0, got {}", self.learning_rate));
        }
        if self.batch_size < 4 || !self.batch_size.is_multiple_of(2) {
            return bad(format!(
                "train.batch_size must be even and >= 4, got {}",
                self.batch_size
            ));
        }
        if !(0.0..=1.0).contains(&self.label_fraction) {
            return bad(format!(
                "train.label_fraction must be in [0, 1], got {}",
                self.label_fraction
            ));
        }
        if !(self.aug_sigma.is_finite() && self.aug_sigma >= 0.0) {
            return bad("train.aug_sigma must be finite and >= 0".into());
        }
        let m = &self.model;
        if m.h1 == 0 || m.h2 == 0 || m.out_dim == 0 {
            return bad("model widths must be >= 1".into());
        }
        self.loss_config.validate()
    }
}

/// One line of the metrics CSV. Loss columns are the mean of the pre-step
/// batch losses over the epoch and are absent for the untrained row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub loss_total: Option<f64>,
    pub loss_contrastive: Option<f64>,
    pub loss_cloa: Option<f64>,
    pub emb_variance: f64,
    pub eff_rank: f64,
    pub sv_ratio: f64,
    pub anchor_acc: Option<f64>,
    pub probe_acc: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Failed { epoch: usize, step: usize, message: String },
}

/// History and end state of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub rows: Vec<MetricRow>,
    pub status: RunStatus,
    pub steps_completed: usize,
    pub anchors: Option<Vec<Vec<f64>>>,
    /// Indices of the samples whose labels the anchor term used.
    pub labeled_indices: Vec<usize>,
    /// Diagnostics of the final model (absent after a failure).
    pub final_snapshot: Option<DiagnosticsSnapshot>,
    pub model: MlpSnapshot,
    /// Raw embeddings of the dataset at the end of the run (whole-dataset
    /// batchnorm statistics, as for the diagnostics).
    pub final_embeddings: Vec<Vec<f64>>,
}

impl RunRecord {
    pub fn is_completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    pub fn first_row(&self) -> &MetricRow {
        &self.rows[0]
    }

    pub fn last_row(&self) -> &MetricRow {
        self.rows.last().expect("a record always holds the epoch-0 row")
    }

    /// Writes the metrics CSV (empty cells for absent values).
    pub fn write_metrics_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(METRICS_HEADER)?;
        let opt = |v: Option<f64>| v.map(fmt17).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.epoch.to_string(),
                opt(r.loss_total),
                opt(r.loss_contrastive),
                opt(r.loss_cloa),
                fmt17(r.emb_variance),
                fmt17(r.eff_rank),
                fmt17(r.sv_ratio),
                opt(r.anchor_acc),
                fmt17(r.probe_acc),
                format!("{:.3}", r.wall_ms),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Seeded per-class stratified choice of labeled samples:
/// `round(fraction · class size)` per class, at least one when the
/// fraction is positive. Returns a per-sample mask.
pub fn stratified_label_mask(labels: &[usize], fraction: f64, seed: u64) -> Vec<bool> {
    let mut mask = vec![false; labels.len()];
    if fraction <= 0.0 {
        return mask;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(MASK_STREAM);
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        let take = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len());
        members.shuffle(&mut rng);
        for &i in &members[..take] {
            mask[i] = true;
        }
    }
    mask
}

/// Loss terms of one step, before the update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub contrastive: f64,
    pub cloa: Option<f64>,
}

/// Per-row labels and mask of a paired batch, plus the anchors.
#[derive(Clone, Copy, Debug)]
pub struct BatchTargets<'a, T> {
    pub labels: &'a [usize],
    pub mask: &'a [bool],
    pub anchors: &'a AnchorSet<T>,
}

/// Training-mode loss of a paired batch `x` (rows `i ↔ i + N/2`), reduced
/// over the rows, and its parameter gradient.
pub fn batch_gradient<T: Scalar>(
    model: &MlpModel<T>,
    x: &Matrix<T>,
    spec: LossSpec,
    targets: Option<BatchTargets<'_, T>>,
    cfg: &LossConfig,
    reduction: Reduction,
) -> Result<(StepLoss, MlpGradients<T>, crate::model::ForwardCache<T>)> {
    let (out, cache) = model.forward(x, Mode::Train)?;
    let batch = EmbeddingBatch::paired_halves(out)?;
    let anchor_targets = targets.map(|t| AnchorTargets {
        labels: t.labels,
        anchors: t.anchors,
        mask: t.mask,
    });
    let (breakdown, report) = composite(spec, &batch, anchor_targets, cfg)?;
    let scale = T::lit(reduction.factor(x.rows()));
    let grads = model.backward(&cache, &report.grad_raw.scale(scale))?;
    Ok((step_loss(&breakdown, spec, scale), grads, cache))
}

fn step_loss<T: Scalar>(b: &LossBreakdown<T>, spec: LossSpec, scale: T) -> StepLoss {
    let total = (b.total * scale).as_f64();
    if spec.with_anchors {
        StepLoss {
            total,
            contrastive: (b.term_values["contrastive"] * scale).as_f64(),
            cloa: Some((b.term_values["cloa"] * scale).as_f64()),
        }
    } else {
        StepLoss {
            total,
            contrastive: total,
            cloa: None,
        }
    }
}

/// Reduced loss of a paired batch in training mode (no update).
pub fn batch_loss<T: Scalar>(
    model: &MlpModel<T>,
    x: &Matrix<T>,
    spec: LossSpec,
    targets: Option<BatchTargets<'_, T>>,
    cfg: &LossConfig,
    reduction: Reduction,
) -> Result<StepLoss> {
    let (out, _) = model.forward(x, Mode::Train)?;
    let batch = EmbeddingBatch::paired_halves(out)?;
    let anchor_targets = targets.map(|t| AnchorTargets {
        labels: t.labels,
        anchors: t.anchors,
        mask: t.mask,
    });
    let (breakdown, _) = composite(spec, &batch, anchor_targets, cfg)?;
    Ok(step_loss(&breakdown, spec, T::lit(reduction.factor(x.rows()))))
}

/// One SGD step: `θ ← θ − lr·∇θ L`, running statistics folded in.
/// Returns the pre-step loss.
pub fn train_step<T: Scalar>(
    model: &mut MlpModel<T>,
    x: &Matrix<T>,
    spec: LossSpec,
    targets: Option<BatchTargets<'_, T>>,
    cfg: &LossConfig,
    reduction: Reduction,
    learning_rate: f64,
) -> Result<StepLoss> {
    let (loss, grads, cache) = batch_gradient(model, x, spec, targets, cfg, reduction)?;
    if !loss.total.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    model.update_running_stats(&cache);
    model.sgd_step(&grads, T::lit(learning_rate));
    Ok(loss)
}

fn is_numeric_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::NonFinite(_) | Error::ZeroRow { .. } | Error::DegenerateDimension { .. }
    )
}

struct EpochAccumulator {
    steps: usize,
    total: f64,
    contrastive: f64,
    cloa: f64,
}

impl EpochAccumulator {
    fn new() -> Self {
        Self {
            steps: 0,
            total: 0.0,
            contrastive: 0.0,
            cloa: 0.0,
        }
    }

    fn add(&mut self, l: &StepLoss) {
        self.steps += 1;
        self.total += l.total;
        self.contrastive += l.contrastive;
        self.cloa += l.cloa.unwrap_or(0.0);
    }

    fn means(&self, with_anchors: bool) -> (Option<f64>, Option<f64>, Option<f64>) {
        if self.steps == 0 {
            return (None, None, None);
        }
        let n = self.steps as f64;
        (
            Some(self.total / n),
            Some(self.contrastive / n),
            with_anchors.then(|| self.cloa / n),
        )
    }
}

/// Raw embeddings of a whole dataset, with batchnorm using that dataset's
/// own statistics. Pure: running averages are not touched.
pub fn embed_dataset<T: Scalar>(model: &MlpModel<T>, points: &Matrix<T>) -> Result<Matrix<T>> {
    Ok(model.forward(points, Mode::Train)?.0)
}

fn diagnose_model<T: Scalar>(
    model: &MlpModel<T>,
    points: &Matrix<T>,
    labels: &[usize],
    anchors: Option<&AnchorSet<T>>,
) -> Result<(DiagnosticsSnapshot, Matrix<T>)> {
    let out = embed_dataset(model, points)?;
    let snap = diagnostics::snapshot(&out, labels, anchors)?;
    Ok((snap, out))
}

fn row_from(
    epoch: usize,
    acc: &EpochAccumulator,
    with_anchors: bool,
    s: &DiagnosticsSnapshot,
    wall_ms: f64,
) -> MetricRow {
    let (loss_total, loss_contrastive, loss_cloa) = acc.means(with_anchors);
    MetricRow {
        epoch,
        loss_total,
        loss_contrastive,
        loss_cloa,
        emb_variance: s.emb_variance,
        eff_rank: s.eff_rank,
        sv_ratio: s.sv_ratio,
        anchor_acc: s.anchor_acc,
        probe_acc: s.probe_acc,
        wall_ms,
    }
}

/// Trains a fresh model on `points`/`labels` and records per-epoch
/// diagnostics.
///
/// An epoch is one shuffled pass in batches of `batch_size / 2` originals
/// (a short final batch is dropped); training stops after `config.steps`
/// steps, possibly mid-epoch, in which case that partial epoch still gets a
/// row. Row 0 describes the untrained model.
///
/// Diagnostics run the un-augmented points through the encoder as one batch,
/// so batchnorm uses the exact statistics of the whole dataset. Running
/// averages would lag the weights and start from `(0, 1)`, which makes an
/// untrained encoder look like it moved.
///
/// A numerical failure ends the run early with `RunStatus::Failed`; the
/// rows recorded up to then are kept.
pub fn train<T: Scalar>(points: &Matrix<T>, labels: &[usize], config: &TrainConfig) -> Result<RunRecord> {
    config.validate()?;
    let n = points.rows();
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            context: "train labels",
            expected: n,
            found: labels.len(),
        });
    }
    let half = config.batch_size / 2;
    if n < half {
        return Err(Error::InvalidConfig(format!(
            "dataset has {n} samples, fewer than the {half} originals one batch needs"
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let spec = config.loss;
    let anchors = if spec.with_anchors {
        Some(AnchorSet::<T>::generate(
            classes,
            config.model.out_dim,
            config.anchor_seed,
        )?)
    } else {
        None
    };
    let mask = if spec.with_anchors {
        stratified_label_mask(labels, config.label_fraction, config.seed)
    } else {
        vec![false; n]
    };

    let start = Instant::now();
    let elapsed_ms = || start.elapsed().as_secs_f64() * 1e3;
    let m = &config.model;
    let mut model = MlpModel::<T>::init(points.cols(), m.h1, m.h2, m.out_dim, config.seed)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(config.seed);
    aug_rng.set_stream(AUGMENT_STREAM);

    let mut rows = Vec::new();
    let (snap0, _) = diagnose_model(&model, points, labels, anchors.as_ref())?;
    rows.push(row_from(
        0,
        &EpochAccumulator::new(),
        spec.with_anchors,
        &snap0,
        elapsed_ms(),
    ));

    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    let mut epoch = 0;
    let mut status = RunStatus::Completed;
    let mut batch_labels = vec![0usize; 2 * half];
    let mut batch_mask = vec![false; 2 * half];
    'epochs: while step < config.steps {
        epoch += 1;
        order.shuffle(&mut shuffle_rng);
        let mut acc = EpochAccumulator::new();
        for chunk in order.chunks_exact(half) {
            if step == config.steps {
                break;
            }
            let originals = points.select_rows(chunk);
            let augmented = augment_negate_with(&originals, config.aug_sigma, &mut aug_rng)?;
            let x = Matrix::vstack(&originals, &augmented)?;
            for (t, &i) in chunk.iter().enumerate() {
                batch_labels[t] = labels[i];
                batch_labels[t + half] = labels[i];
                batch_mask[t] = mask[i];
                batch_mask[t + half] = mask[i];
            }
            let targets = anchors.as_ref().map(|a| BatchTargets {
                labels: &batch_labels,
                mask: &batch_mask,
                anchors: a,
            });
            step += 1;
            let result = train_step(
                &mut model,
                &x,
                spec,
                targets,
                &config.loss_config,
                config.reduction,
                config.learning_rate,
            )
            .and_then(|loss| {
                if model.is_finite() {
                    Ok(loss)
                } else {
                    Err(Error::NonFinite("model parameters"))
                }
            });
            match result {
                Ok(loss) => acc.add(&loss),
                Err(e) if is_numeric_failure(&e) => {
                    status = RunStatus::Failed {
                        epoch,
                        step,
                        message: Error::NonFiniteLoss { epoch, step }.to_string(),
                    };
                    step -= 1;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let (snap, _) = match diagnose_model(&model, points, labels, anchors.as_ref()) {
            Ok(s) => s,
            Err(e) if is_numeric_failure(&e) => {
                status = RunStatus::Failed {
                    epoch,
                    step,
                    message: e.to_string(),
                };
                break;
            }
            Err(e) => return Err(e),
        };
        rows.push(row_from(epoch, &acc, spec.with_anchors, &snap, elapsed_ms()));
    }

    // A failed run's model may hold non-finite values: no final snapshot.
    let (final_snapshot, final_out) = if status == RunStatus::Completed {
        let (snap, out) = diagnose_model(&model, points, labels, anchors.as_ref())?;
        (Some(snap), out)
    } else {
        (None, Matrix::zeros(0, config.model.out_dim))
    };
    Ok(RunRecord {
        config: config.clone(),
        rows,
        status,
        steps_completed: step,
        anchors: anchors.map(|a| a.matrix().to_f64_rows()),
        labeled_indices: (0..n).filter(|&i| mask[i]).collect(),
        final_snapshot,
        model: model.snapshot(),
        final_embeddings: final_out.to_f64_rows(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_clusters, ClusterParams};

    fn data() -> (Matrix<f64>, Vec<usize>) {
        let ds = generate_clusters::<f64>(&ClusterParams::default()).unwrap();
        (ds.points, ds.labels)
    }

    fn small(loss: &str, steps: usize) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                h1: 8,
                h2: 8,
                out_dim: 3,
            },
            steps,
            batch_size: 16,
            loss: loss.parse().unwrap(),
            ..TrainConfig::default()
        }
    }

    fn strip_wall(rows: &[MetricRow]) -> Vec<MetricRow> {
        rows.iter()
            .map(|r| MetricRow {
                wall_ms: 0.0,
                ..r.clone()
            })
            .collect()
    }

    #[test]
    fn zero_steps_gives_only_the_untrained_row() {
        let (x, y) = data();
        let r = train(&x, &y, &small("infonce", 0)).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.rows[0].epoch, 0);
        assert!(r.rows[0].loss_total.is_none());
        assert!(r.is_completed());
        assert_eq!(r.steps_completed, 0);
    }

    #[test]
    fn partial_final_epoch_gets_a_row() {
        let (x, y) = data();
        // 300 samples, 8 originals per batch: 37 steps per epoch
        let r = train(&x, &y, &small("infonce", 80)).unwrap();
        let epochs: Vec<usize> = r.rows.iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, vec![0, 1, 2, 3]);
        assert_eq!(r.steps_completed, 80);
    }

    #[test]
    fn runs_are_deterministic() {
        let (x, y) = data();
        let cfg = small("cloa-infonce", 50);
        let a = train(&x, &y, &cfg).unwrap();
        let b = train(&x, &y, &cfg).unwrap();
        assert_eq!(strip_wall(&a.rows), strip_wall(&b.rows));
        assert_eq!(a.model, b.model);
        assert_eq!(a.final_embeddings, b.final_embeddings);
        let c = train(&x, &y, &TrainConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.model, c.model);
    }

    #[test]
    fn anchor_columns_only_for_anchored_runs() {
        let (x, y) = data();
        let plain = train(&x, &y, &small("infonce", 5)).unwrap();
        assert!(plain
            .rows
            .iter()
            .all(|r| r.anchor_acc.is_none() && r.loss_cloa.is_none()));
        assert!(plain.anchors.is_none() && plain.labeled_indices.is_empty());
        let anchored = train(&x, &y, &small("cloa-infonce", 5)).unwrap();
        assert!(anchored.rows.iter().all(|r| r.anchor_acc.is_some()));
        assert!(anchored.rows[1].loss_cloa.is_some());
        assert_eq!(anchored.labeled_indices.len(), 30);
    }

    #[test]
    fn zero_label_fraction_matches_base_loss() {
        let (x, y) = data();
        let base = train(&x, &y, &small("infonce", 40)).unwrap();
        let anchored = train(
            &x,
            &y,
            &TrainConfig {
                label_fraction: 0.0,
                ..small("cloa-infonce", 40)
            },
        )
        .unwrap();
        for (a, b) in base.rows.iter().zip(&anchored.rows) {
            assert_eq!(a.loss_total, b.loss_total);
            assert_eq!(a.emb_variance, b.emb_variance);
            assert_eq!(a.sv_ratio, b.sv_ratio);
            assert_eq!(a.probe_acc, b.probe_acc);
            assert_eq!(
                b.loss_cloa.map(|v| v == 0.0),
                if b.epoch == 0 { None } else { Some(true) }
            );
        }
        assert_eq!(base.model, anchored.model);
    }

    #[test]
    fn stratified_mask_counts() {
        let labels: Vec<usize> = (0..300).map(|i| i / 100).collect();
        let m = stratified_label_mask(&labels, 0.1, 4);
        for c in 0..3 {
            assert_eq!((0..300).filter(|&i| m[i] && labels[i] == c).count(), 10);
        }
        let tiny = stratified_label_mask(&labels, 0.001, 4);
        assert_eq!(tiny.iter().filter(|&&b| b).count(), 3);
        assert!(stratified_label_mask(&labels, 0.0, 4).iter().all(|&b| !b));
        assert_eq!(m, stratified_label_mask(&labels, 0.1, 4));
    }

    fn paired_batch(seed: u64) -> (Matrix<f64>, Vec<usize>, Vec<bool>) {
        let (x, y) = data();
        let idx: Vec<usize> = (0..8).map(|t| (t * 37 + seed as usize * 11) % 300).collect();
        let orig = x.select_rows(&idx);
        let aug = crate::synthdata::augment_negate(&orig, 0.05, seed).unwrap();
        let labels: Vec<usize> = idx.iter().chain(&idx).map(|&i| y[i]).collect();
        let mask: Vec<bool> = (0..16).map(|i| i % 3 == 0).collect();
        (Matrix::vstack(&orig, &aug).unwrap(), labels, mask)
    }

    #[test]
    fn small_step_decreases_loss() {
        let cfg = LossConfig::default();
        let anchors = AnchorSet::<f64>::generate(3, 3, 0).unwrap();
        for seed in 0..10 {
            let (x, labels, mask) = paired_batch(seed);
            for spec in ["infonce", "cloa-infonce", "vicreg", "barlow", "dcl"] {
                let spec: LossSpec = spec.parse().unwrap();
                let targets = spec.with_anchors.then_some(BatchTargets {
                    labels: &labels,
                    mask: &mask,
                    anchors: &anchors,
                });
                let mut model = MlpModel::<f64>::init(3, 32, 32, 3, seed).unwrap();
                let before = batch_loss(&model, &x, spec, targets, &cfg, Reduction::Mean).unwrap();
                let step = train_step(&mut model, &x, spec, targets, &cfg, Reduction::Mean, 1e-4).unwrap();
                assert_eq!(step, before);
                let after = batch_loss(&model, &x, spec, targets, &cfg, Reduction::Mean).unwrap();
                assert!(
                    after.total <= before.total,
                    "{spec} seed {seed}: {} -> {}",
                    before.total,
                    after.total
                );
            }
        }
    }

    #[test]
    fn zero_learning_rate_step_is_identity() {
        let (x, _, _) = paired_batch(1);
        let mut model = MlpModel::<f64>::init(3, 8, 8, 3, 1).unwrap();
        let before = model.parameters().iter().map(|p| p.to_vec()).collect::<Vec<_>>();
        train_step(
            &mut model,
            &x,
            LossSpec::plain(Objective::InfoNce),
            None,
            &LossConfig::default(),
            Reduction::Mean,
            0.0,
        )
        .unwrap();
        let after = model.parameters().iter().map(|p| p.to_vec()).collect::<Vec<_>>();
        assert_eq!(before, after);
    }

    #[test]
    fn all_equal_output_has_zero_parameter_gradient() {
        let (x, _, _) = paired_batch(2);
        let mut model = MlpModel::<f64>::init(3, 8, 8, 3, 2).unwrap();
        model.dense[2].weight = Matrix::zeros(3, 8);
        model.dense[2].bias = vec![0.3, -0.2, 0.9];
        let (_, grads, _) = batch_gradient(
            &model,
            &x,
            LossSpec::plain(Objective::InfoNce),
            None,
            &LossConfig::default(),
            Reduction::Sum,
        )
        .unwrap();
        let worst = grads.flatten().iter().fold(0.0f64, |m, g| m.max(g.abs()));
        assert!(worst <= 1e-8, "max |grad| {worst}");
    }

    #[test]
    fn divergent_run_keeps_partial_rows() {
        let (x, y) = data();
        let cfg = TrainConfig {
            learning_rate: 1e300,
            reduction: Reduction::Sum,
            loss_config: LossConfig {
                temperature: 1e-3,
                ..LossConfig::default()
            },
            ..small("vicreg", 200)
        };
        let r = train(&x, &y, &cfg).unwrap();
        match &r.status {
            RunStatus::Failed { epoch, step, .. } => {
                assert!(*step >= 1);
                assert_eq!(r.rows.last().unwrap().epoch + 1, *epoch);
            }
            RunStatus::Completed => panic!("expected a numerical failure"),
        }
        assert!(r.final_snapshot.is_none());
        assert!(!r.rows.is_empty());
    }

    #[test]
    fn invalid_configs_rejected() {
        let (x, y) = data();
        for cfg in [
            TrainConfig {
                batch_size: 6 + 1,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 2,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                label_fraction: 1.5,
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(train(&x, &y, &cfg), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn metrics_csv_layout() {
        let (x, y) = data();
        let r = train(&x, &y, &small("infonce", 3)).unwrap();
        let mut buf = Vec::new();
        r.write_metrics_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,loss_total,loss_contrastive,loss_cloa,emb_variance,eff_rank,sv_ratio,anchor_acc,probe_acc,wall_ms"
        );
        let row0: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row0[0], "0");
        assert_eq!(row0[1], "");
        assert_eq!(row0[7], "");
        assert_eq!(text.lines().count(), 1 + r.rows.len());
    }
}
