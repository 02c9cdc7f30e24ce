//! Command implementations behind the `aikd` binary.

pub mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use aikd::divergence::{parallel_lines_case, DEFAULT_GRID};
use aikd::metrics::evaluate_predictions;
use aikd::models::Checkpoint;
use aikd::training::{distill, pretrain, predictions, Ablation, Phase, RunOptions};
use aikd::util::{read_file, to_json_pretty, write_file};
use aikd::{Error, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::{Resolved, RunDocument, DATA_ROOT_ENV};

#[derive(Debug, Parser)]
#[command(name = "aikd", version, about = "Self-distillation with an adversarial critic on logits")]
pub struct Cli {
    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// TOML run document; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the superior model with cross-entropy into `<out>/phase1`.
    Pretrain {
        #[command(flatten)]
        resume: ResumeArgs,
    },
    /// Distill a fresh student into `<out>/phase2`.
    Distill {
        /// Phase-1 checkpoint of the superior model.
        #[arg(long)]
        superior: Option<PathBuf>,
        /// full, no_adv, only_progressive, only_guide or baseline.
        #[arg(long)]
        ablation: Option<String>,
        #[command(flatten)]
        resume: ResumeArgs,
    },
    /// Evaluate a checkpoint on the validation split into `<out>`.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Fit a temperature and report the calibrated ECE.
        #[arg(long)]
        calibrate: bool,
    },
    /// Mean and sample standard deviation of metrics across run directories.
    Aggregate {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Distances between two parallel line segments `theta` apart.
    DivergenceDemo {
        #[arg(long, allow_hyphen_values = true)]
        theta: f64,
        #[arg(long, default_value_t = DEFAULT_GRID)]
        grid: usize,
    },
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct ResumeArgs {
    /// Epoch checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many completed epochs.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::SpecMismatch(_) => 2,
        Error::NonFinite { .. } => 3,
        Error::Io { .. } | Error::Corrupt { .. } | Error::Dataset(_) => 4,
        _ => 1,
    }
}

fn resolve(cli: &Cli, ablation: Option<&str>) -> Result<Resolved> {
    let mut doc = match &cli.config {
        Some(path) => RunDocument::load(path)?,
        None => RunDocument::default(),
    };
    if let Some(name) = ablation {
        doc.train.ablation = Ablation::parse(name)?;
    }
    let env_root = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from);
    doc.resolve(cli.seed, env_root)
}

fn train_phase(cli: &Cli, resolved: &Resolved, phase: Phase, superior: Option<&Path>, resume: &ResumeArgs) -> Result<String> {
    let dir = cli.out.join(match phase {
        Phase::Pretrain => "phase1",
        Phase::Distill => "phase2",
    });
    let cfg = resolved.train_config(phase);
    write_file(&dir.join("config.snapshot"), resolved.snapshot()?)?;
    let data = resolved.dataset()?;
    let opts = RunOptions {
        out_dir: dir,
        config_digest: resolved.digest()?,
        resume_from: resume.resume.clone(),
        stop_after: resume.stop_after,
    };
    let outcome = match phase {
        Phase::Pretrain => pretrain(&cfg, resolved.spec, &data, &opts)?,
        Phase::Distill => distill(&cfg, resolved.spec, &data, superior, &opts)?,
    };
    Ok(format!("{}\n{}", outcome.checkpoint.display(), to_json_pretty(&outcome.metrics)?))
}

fn eval(cli: &Cli, ckpt_path: &Path, calibrate: bool) -> Result<String> {
    let resolved = resolve(cli, None)?;
    let ckpt = Checkpoint::load(ckpt_path)?;
    if ckpt.spec != resolved.spec {
        return Err(Error::SpecMismatch(format!(
            "checkpoint holds {:?}, configuration describes {:?}",
            ckpt.spec, resolved.spec
        )));
    }
    let mut model = ckpt.to_classifier()?;
    model.freeze();
    let data = resolved.dataset()?;
    let preds = predictions(&model, &data.val, &resolved.manifest.normalization)?;
    let (metrics, bins) = evaluate_predictions(&preds, resolved.document.metrics.n_bins, calibrate)?;
    let report = to_json_pretty(&metrics)?;
    write_file(&cli.out.join("config.snapshot"), resolved.snapshot()?)?;
    write_file(&cli.out.join("metrics.json"), &report)?;
    write_file(&cli.out.join("reliability.csv"), bins.to_csv())?;
    Ok(report)
}

/// Directory holding a run's `metrics.json`: the run itself, else its
/// distillation phase, else its pretraining phase.
fn metrics_dir(run: &Path) -> Result<PathBuf> {
    [run.to_path_buf(), run.join("phase2"), run.join("phase1")]
        .into_iter()
        .find(|d| d.join("metrics.json").is_file())
        .ok_or_else(|| Error::Io {
            path: run.join("metrics.json"),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no metrics.json in run directory"),
        })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub runs: Vec<PathBuf>,
    pub n: usize,
    /// Always "sample (n-1)"; undefined (null) for a single run.
    pub std_convention: &'static str,
    pub metrics: BTreeMap<String, MeanStd>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: Option<f64>,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    MeanStd { mean, std }
}

fn comparable_snapshot(dir: &Path) -> Result<toml::Table> {
    let path = dir.join("config.snapshot");
    let text = String::from_utf8_lossy(&read_file(&path)?).into_owned();
    let mut table: toml::Table = toml::from_str(&text).map_err(|e| Error::Corrupt { path: path.clone(), message: e.to_string() })?;
    if let Some(toml::Value::Table(train)) = table.get_mut("train") {
        train.remove("seed");
    }
    Ok(table)
}

pub fn aggregate(runs: &[PathBuf]) -> Result<Summary> {
    let mut reference: Option<(PathBuf, toml::Table)> = None;
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for run in runs {
        let dir = metrics_dir(run)?;
        let snap = comparable_snapshot(&dir)?;
        match &reference {
            None => reference = Some((run.clone(), snap)),
            Some((first, r)) if *r != snap => {
                return Err(Error::Config {
                    key: "aggregate".into(),
                    message: format!("{} and {} were run under different configurations", first.display(), run.display()),
                })
            }
            _ => {}
        }
        let path = dir.join("metrics.json");
        let value: serde_json::Value = serde_json::from_slice(&read_file(&path)?)?;
        let obj = value.as_object().ok_or_else(|| Error::Corrupt { path: path.clone(), message: "expected a JSON object".into() })?;
        for (k, v) in obj {
            if let Some(x) = v.as_f64() {
                columns.entry(k.clone()).or_default().push(x);
            }
        }
    }
    let metrics = columns.into_iter().filter(|(_, v)| v.len() == runs.len()).map(|(k, v)| (k, mean_std(&v))).collect();
    Ok(Summary { runs: runs.to_vec(), n: runs.len(), std_convention: "sample (n-1)", metrics })
}

/// Runs one command and returns what it prints on success.
pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Pretrain { resume } => {
            let resolved = resolve(cli, None)?;
            train_phase(cli, &resolved, Phase::Pretrain, None, resume)
        }
        Command::Distill { superior, ablation, resume } => {
            let resolved = resolve(cli, ablation.as_deref())?;
            train_phase(cli, &resolved, Phase::Distill, superior.as_deref(), resume)
        }
        Command::Eval { ckpt, calibrate } => eval(cli, ckpt, *calibrate),
        Command::Aggregate { runs } => {
            let summary = to_json_pretty(&aggregate(runs)?)?;
            write_file(&cli.out.join("summary.json"), &summary)?;
            Ok(summary)
        }
        Command::DivergenceDemo { theta, grid } => to_json_pretty(&parallel_lines_case(*theta, *grid)?),
    }
}
