use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anchor_contrast::anchors::AnchorSet;
use anchor_contrast::diagnostics::{snapshot, DiagnosticsSnapshot};
use anchor_contrast::linalg::Matrix;
use anchor_contrast::losses::{LossConfig, LossSpec, Objective};
use anchor_contrast::synthdata::{generate_clusters, read_labeled_csv, write_labeled_csv};
use anchor_contrast::theorem::{
    make_equal_config, make_rank1_config_with, perturb, verify_zero_gradient, Pairing, Verdict, ZeroGradReport,
};
use anchor_contrast::train::{train, MetricRow, RunRecord, RunStatus};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfigFile;
use crate::error::{at_path, CliError};

/// Bumped whenever the layout of the run outputs changes.
pub const ARTIFACT_VERSION: u32 = 1;

pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::io(path, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::io(path, e.into()))?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(path, e))
}

/// Where a run's samples came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSource {
    /// Drawn from the config's `data` section.
    Generated,
    File {
        path: PathBuf,
    },
}

/// Loaded samples and their origin.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub points: Matrix<f64>,
    pub labels: Vec<usize>,
    pub source: DataSource,
}

impl Dataset {
    pub fn resolve(config: &RunConfigFile, file: Option<&Path>) -> Result<Self, CliError> {
        match file {
            Some(path) => {
                let (points, labels) = read_labeled_csv(open(path)?).map_err(at_path(path))?;
                if points.rows() == 0 {
                    return Err(CliError::Config(format!("{}: no samples", path.display())));
                }
                Ok(Self {
                    points,
                    labels,
                    source: DataSource::File {
                        path: path.to_path_buf(),
                    },
                })
            }
            None => {
                let ds = generate_clusters::<f64>(&config.data)?;
                Ok(Self {
                    points: ds.points,
                    labels: ds.labels,
                    source: DataSource::Generated,
                })
            }
        }
    }
}

/// Writes the config's synthetic dataset as `x0,...,label` CSV.
pub fn cmd_gen_data(config: &RunConfigFile, out: &Path) -> Result<Dataset, CliError> {
    let data = Dataset::resolve(config, None)?;
    let mut w = create(out)?;
    write_labeled_csv(&data.points, &data.labels, &mut w).map_err(at_path(out))?;
    w.flush().map_err(|e| CliError::io(out, e))?;
    Ok(data)
}

/// Everything needed to reproduce and audit a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifact_version: u32,
    pub package_version: String,
    pub config: RunConfigFile,
    pub data: DataSource,
    pub samples: usize,
    pub status: RunStatus,
    pub steps_completed: usize,
    pub epochs: usize,
    pub final_metrics: MetricRow,
    pub final_snapshot: Option<DiagnosticsSnapshot>,
    pub anchors: Option<Vec<Vec<f64>>>,
    pub labeled_indices: Vec<usize>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        serde_json::from_reader(open(path)?).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

/// Trains on `data` and writes `metrics.csv`, `manifest.json` and, for a
/// completed run, `embeddings.csv` into `out_dir`.
///
/// A run that diverges still writes its partial metrics and manifest; the
/// returned record's status says so.
pub fn train_into(config: &RunConfigFile, data: &Dataset, out_dir: &Path) -> Result<RunRecord, CliError> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let record = train(&data.points, &data.labels, &config.train_config())?;

    let metrics = out_dir.join(METRICS_FILE);
    let mut w = create(&metrics)?;
    record.write_metrics_csv(&mut w).map_err(at_path(&metrics))?;
    w.flush().map_err(|e| CliError::io(&metrics, e))?;

    if record.is_completed() {
        let path = out_dir.join(EMBEDDINGS_FILE);
        let z = Matrix::<f64>::from_f64_rows(&record.final_embeddings)?;
        let mut w = create(&path)?;
        write_labeled_csv(&z, &data.labels, &mut w).map_err(at_path(&path))?;
        w.flush().map_err(|e| CliError::io(&path, e))?;
    }

    let manifest = Manifest {
        artifact_version: ARTIFACT_VERSION,
        package_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        data: data.source.clone(),
        samples: data.points.rows(),
        status: record.status.clone(),
        steps_completed: record.steps_completed,
        epochs: record.rows.len() - 1,
        final_metrics: record.last_row().clone(),
        final_snapshot: record.final_snapshot.clone(),
        anchors: record.anchors.clone(),
        labeled_indices: record.labeled_indices.clone(),
    };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(record)
}

pub fn cmd_train(config: &RunConfigFile, data_file: Option<&Path>, out_dir: &Path) -> Result<RunRecord, CliError> {
    let data = Dataset::resolve(config, data_file)?;
    train_into(config, &data, out_dir)
}

/// One line of `summary.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lr: f64,
    pub final_variance: f64,
    pub final_sv_ratio: f64,
    pub final_probe_acc: f64,
    pub final_anchor_acc: Option<f64>,
    /// Variance of the untrained encoder, for judging whether a run moved.
    pub initial_variance: f64,
    /// `completed`, `failed` or `error`.
    pub status: String,
    pub message: String,
}

pub const SUMMARY_HEADER: [&str; 8] = [
    "lr",
    "final_variance",
    "final_sv_ratio",
    "final_probe_acc",
    "final_anchor_acc",
    "initial_variance",
    "status",
    "message",
];

/// Directory name of one sweep run: `lr-1e-3`.
pub fn lr_dir_name(lr: f64) -> String {
    format!("lr-{lr:e}")
}

/// Worker count: the explicit value, else `ANCHOR_CONTRAST_THREADS`, else
/// every available core.
pub fn resolve_jobs(explicit: Option<usize>) -> Result<usize, CliError> {
    let jobs = match explicit {
        Some(j) => j,
        None => match std::env::var("ANCHOR_CONTRAST_THREADS") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("ANCHOR_CONTRAST_THREADS must be a count, got {v:?}")))?,
            Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
        },
    };
    if jobs == 0 {
        return Err(CliError::Config("job count must be >= 1".into()));
    }
    Ok(jobs)
}

/// Runs the config once per learning rate, `jobs` runs at a time, each in
/// its own `lr-*` directory, then writes `summary.csv`. A failing run is
/// recorded in the summary and does not stop the others.
pub fn cmd_sweep_lr(
    config: &RunConfigFile,
    lrs: &[f64],
    data_file: Option<&Path>,
    out_dir: &Path,
    jobs: usize,
) -> Result<Vec<SweepRow>, CliError> {
    if lrs.len() < 2 {
        return Err(CliError::Config(format!(
            "a sweep needs at least 2 learning rates, got {}",
            lrs.len()
        )));
    }
    let mut names: Vec<String> = lrs.iter().map(|&lr| lr_dir_name(lr)).collect();
    names.sort();
    names.dedup();
    if names.len() != lrs.len() {
        return Err(CliError::Config("learning rates must be distinct".into()));
    }
    let configs = lrs
        .iter()
        .map(|&lr| {
            let mut c = config.clone();
            c.train.lr = lr;
            c.validate().map(|_| c)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let data = Dataset::resolve(config, data_file)?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {jobs} workers: {e}")))?;
    let rows: Vec<SweepRow> = pool.install(|| {
        configs
            .par_iter()
            .map(|c| {
                let lr = c.train.lr;
                let dir = out_dir.join(lr_dir_name(lr));
                match train_into(c, &data, &dir) {
                    Ok(r) => {
                        let last = r.last_row();
                        let (status, message) = match &r.status {
                            RunStatus::Completed => ("completed", String::new()),
                            RunStatus::Failed { message, .. } => ("failed", message.clone()),
                        };
                        SweepRow {
                            lr,
                            final_variance: last.emb_variance,
                            final_sv_ratio: last.sv_ratio,
                            final_probe_acc: last.probe_acc,
                            final_anchor_acc: last.anchor_acc,
                            initial_variance: r.first_row().emb_variance,
                            status: status.into(),
                            message,
                        }
                    }
                    Err(e) => SweepRow {
                        lr,
                        final_variance: f64::NAN,
                        final_sv_ratio: f64::NAN,
                        final_probe_acc: f64::NAN,
                        final_anchor_acc: None,
                        initial_variance: f64::NAN,
                        status: "error".into(),
                        message: e.to_string(),
                    },
                }
            })
            .collect()
    });

    let path = out_dir.join(SUMMARY_FILE);
    let io = |e: csv::Error| CliError::io(&path, e.into());
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(SUMMARY_HEADER).map_err(io)?;
    let num = |v: f64| format!("{v:.16e}");
    for r in &rows {
        w.write_record([
            format!("{:e}", r.lr),
            num(r.final_variance),
            num(r.final_sv_ratio),
            num(r.final_probe_acc),
            r.final_anchor_acc.map(num).unwrap_or_default(),
            num(r.initial_variance),
            r.status.clone(),
            r.message.clone(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerifyKind {
    AllEqual,
    Rank1,
    /// A rank-1 configuration with one row pushed off the line.
    Perturbed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyArgs {
    pub kind: VerifyKind,
    pub loss: Objective,
    pub n: usize,
    pub d: usize,
    pub tol: f64,
    pub seed: u64,
    pub temperature: f64,
    pub pairing: Pairing,
    /// Off-line offset for [`VerifyKind::Perturbed`].
    pub perturbation: f64,
}

impl Default for VerifyArgs {
    fn default() -> Self {
        Self {
            kind: VerifyKind::AllEqual,
            loss: Objective::InfoNce,
            n: 8,
            d: 3,
            tol: 1e-8,
            seed: 0,
            temperature: LossConfig::default().temperature,
            pairing: Pairing::SameSign,
            perturbation: 1e-2,
        }
    }
}

/// Builds the degenerate batch and reports whether the loss gradient
/// vanishes on it. A failing verdict is still `Ok`; callers map it to the
/// exit code.
pub fn cmd_verify(args: &VerifyArgs) -> Result<ZeroGradReport, CliError> {
    if !matches!(args.loss, Objective::InfoNce | Objective::Dcl) {
        return Err(CliError::Config(format!(
            "verify supports infonce and dcl, not {}",
            args.loss.name()
        )));
    }
    if !(args.tol.is_finite() && args.tol >= 0.0) {
        return Err(CliError::Config(format!(
            "tol must be finite and >= 0, got {}",
            args.tol
        )));
    }
    let config = match args.kind {
        VerifyKind::AllEqual => make_equal_config(args.n, args.d, args.seed)?,
        VerifyKind::Rank1 => make_rank1_config_with(args.n, args.d, args.seed, args.pairing)?,
        VerifyKind::Perturbed => {
            if args.d < 2 {
                return Err(CliError::Config("a perturbed configuration needs d >= 2".into()));
            }
            let base = make_rank1_config_with(args.n, args.d, args.seed, args.pairing)?;
            perturb(&base, args.perturbation, args.seed)
        }
    };
    let cfg = LossConfig {
        temperature: args.temperature,
        ..LossConfig::default()
    };
    cfg.validate()?;
    Ok(verify_zero_gradient::<f64>(
        &config,
        LossSpec::plain(args.loss),
        &cfg,
        args.tol,
    )?)
}

pub fn verdict_error(report: &ZeroGradReport) -> Option<CliError> {
    (report.verdict == Verdict::Fail).then(|| {
        CliError::Verification(format!(
            "max raw-gradient row norm {:e} exceeds tol {:e}",
            report.grad_raw_max_norm, report.tol
        ))
    })
}

/// Anchors as a JSON array of rows, or any JSON object with an `anchors`
/// field holding one (such as a run manifest).
pub fn load_anchors(path: &Path) -> Result<AnchorSet<f64>, CliError> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum AnchorFile {
        Rows(Vec<Vec<f64>>),
        Wrapped { anchors: Option<Vec<Vec<f64>>> },
    }
    let bad = |m: String| CliError::Config(format!("{}: {m}", path.display()));
    let rows = match serde_json::from_reader(open(path)?).map_err(|e| bad(e.to_string()))? {
        AnchorFile::Rows(r) => r,
        AnchorFile::Wrapped { anchors: Some(r) } => r,
        AnchorFile::Wrapped { anchors: None } => return Err(bad("holds no anchors".into())),
    };
    let m = Matrix::<f64>::from_f64_rows(&rows).map_err(at_path(path))?;
    AnchorSet::from_matrix(m, 0).map_err(at_path(path))
}

/// Collapse diagnostics of a labeled embedding CSV.
pub fn cmd_diagnose(embeddings: &Path, anchors: Option<&Path>) -> Result<DiagnosticsSnapshot, CliError> {
    let (z, labels) = read_labeled_csv::<f64, _>(open(embeddings)?).map_err(at_path(embeddings))?;
    if z.rows() < 2 {
        return Err(CliError::Config(format!(
            "{}: need at least 2 embeddings, got {}",
            embeddings.display(),
            z.rows()
        )));
    }
    let anchors = anchors.map(load_anchors).transpose()?;
    if let Some(a) = &anchors {
        if a.d() != z.cols() {
            return Err(CliError::Config(format!(
                "anchors have dimension {}, embeddings {}",
                a.d(),
                z.cols()
            )));
        }
    }
    snapshot(&z, &labels, anchors.as_ref()).map_err(at_path(embeddings))
}
