use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anchor_contrast::losses::Objective;
use anchor_contrast::theorem::Pairing;
use anchor_contrast::train::RunStatus;
use anchor_contrast_cli::commands::{self, VerifyArgs, VerifyKind};
use anchor_contrast_cli::{CliError, RunConfigFile};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Contrastive-collapse laboratory: synthetic data, training runs,
/// learning-rate sweeps, zero-gradient verification and diagnostics.
#[derive(Debug, Parser)]
#[command(name = "anchor-contrast", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the configured synthetic dataset as CSV.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one encoder; writes metrics.csv, manifest.json, embeddings.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Use this `x0,...,label` CSV instead of generating data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train once per learning rate and summarize.
    SweepLr {
        #[command(flatten)]
        common: Common,
        /// Comma-separated learning rates (at least two).
        #[arg(long, value_delimiter = ',', required = true)]
        lrs: Vec<f64>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Concurrent runs [default: ANCHOR_CONTRAST_THREADS, else all cores].
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Check that the loss gradient vanishes on a degenerate batch (exit 5 if not).
    Verify {
        #[arg(long, value_enum, default_value = "all-equal")]
        kind: KindArg,
        #[arg(long, value_enum, default_value = "infonce")]
        loss: LossArg,
        /// Batch rows (even, >= 4).
        #[arg(short = 'n', long, default_value_t = 8)]
        n: usize,
        /// Embedding dimension.
        #[arg(short = 'd', long, default_value_t = 3)]
        d: usize,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        temperature: f64,
        #[arg(long, value_enum, default_value = "same-sign")]
        pairing: PairingArg,
        /// Off-line offset of the perturbed row.
        #[arg(long, default_value_t = 1e-2)]
        perturbation: f64,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Collapse diagnostics of an `x0,...,label` embedding CSV.
    Diagnose {
        #[arg(long)]
        embeddings: PathBuf,
        /// Anchor rows as JSON, or a run manifest.
        #[arg(long)]
        anchors: Option<PathBuf>,
        /// Also write the JSON snapshot here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run config; all keys optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the seed (data seed for gen-data, run seed otherwise).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    AllEqual,
    Rank1,
    Perturbed,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossArg {
    Infonce,
    Dcl,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PairingArg {
    SameSign,
    Mixed,
}

fn print_json<S: serde::Serialize>(value: &S, out: Option<&Path>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    println!("{text}");
    if let Some(path) = out {
        std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))?;
    }
    Ok(())
}

fn run_failed(status: &RunStatus) -> Result<(), CliError> {
    match status {
        RunStatus::Completed => Ok(()),
        RunStatus::Failed { message, .. } => Err(CliError::Numeric(format!("{message} (partial metrics kept)"))),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { common, out } => {
            let mut cfg = RunConfigFile::load_or_default(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.data.seed = s;
            }
            let data = commands::cmd_gen_data(&cfg, &out)?;
            eprintln!("wrote {} samples to {}", data.points.rows(), out.display());
        }
        Command::Train { common, data, out } => {
            let mut cfg = RunConfigFile::load_or_default(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            let record = commands::cmd_train(&cfg, data.as_deref(), &out)?;
            let last = record.last_row();
            eprintln!(
                "{} steps; final variance {:.4}, sv_ratio {:.4}, probe {:.3}{}",
                record.steps_completed,
                last.emb_variance,
                last.sv_ratio,
                last.probe_acc,
                last.anchor_acc.map(|a| format!(", anchor {a:.3}")).unwrap_or_default()
            );
            run_failed(&record.status)?;
        }
        Command::SweepLr {
            common,
            lrs,
            data,
            out,
            jobs,
        } => {
            let mut cfg = RunConfigFile::load_or_default(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            let jobs = commands::resolve_jobs(jobs)?;
            let rows = commands::cmd_sweep_lr(&cfg, &lrs, data.as_deref(), &out, jobs)?;
            for r in &rows {
                eprintln!(
                    "lr {:e}: variance {:.4} (initial {:.4}), sv_ratio {:.4} [{}]",
                    r.lr, r.final_variance, r.initial_variance, r.final_sv_ratio, r.status
                );
            }
        }
        Command::Verify {
            kind,
            loss,
            n,
            d,
            tol,
            seed,
            temperature,
            pairing,
            perturbation,
            out,
        } => {
            let args = VerifyArgs {
                kind: match kind {
                    KindArg::AllEqual => VerifyKind::AllEqual,
                    KindArg::Rank1 => VerifyKind::Rank1,
                    KindArg::Perturbed => VerifyKind::Perturbed,
                },
                loss: match loss {
                    LossArg::Infonce => Objective::InfoNce,
                    LossArg::Dcl => Objective::Dcl,
                },
                n,
                d,
                tol,
                seed,
                temperature,
                pairing: match pairing {
                    PairingArg::SameSign => Pairing::SameSign,
                    PairingArg::Mixed => Pairing::Mixed,
                },
                perturbation,
            };
            let report = commands::cmd_verify(&args)?;
            print_json(&report, out.as_deref())?;
            if let Some(e) = commands::verdict_error(&report) {
                return Err(e);
            }
        }
        Command::Diagnose {
            embeddings,
            anchors,
            out,
        } => {
            let snap = commands::cmd_diagnose(&embeddings, anchors.as_deref())?;
            print_json(&snap, out.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
