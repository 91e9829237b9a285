//! Command implementations behind the `tkc` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use tkc::checkpoint::{Checkpoint, CheckpointError};
use tkc::config::{parse_assignment, ConfigError, TrainConfig};
use tkc::data::{make_gaussian_mixture, DataError, Dataset, MixtureSpec};
use tkc::eval::{self, ProbeConfig};
use tkc::io::write_atomic;
use tkc::trainer::{load_dataset, stability_csv, CheckpointState, TrainError, Trainer};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.tkck";
pub const CONFIG_FILE: &str = "config.resolved";
pub const STABILITY_FILE: &str = "stability.csv";

/// Failure classes, each with its own process exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Divergence(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Internal(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Divergence(m) | CliError::Internal(m) => m,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.message())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(format!("config error: {e}"))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Io(format!("dataset: {e}"))
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Io(format!("checkpoint: {e}"))
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(e) => e.into(),
            TrainError::Divergence { .. } => CliError::Divergence(format!("numeric divergence: {e}")),
            TrainError::Data(e) => e.into(),
            TrainError::Checkpoint(e) => e.into(),
            other => CliError::Internal(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Parses `--set` arguments.
pub fn parse_overrides(sets: &[String]) -> Result<Vec<(String, String)>, CliError> {
    sets.iter()
        .map(|s| {
            parse_assignment(s)
                .ok_or_else(|| CliError::Config(format!("config error: `--set {s}` is not key=value")))
        })
        .collect()
}

/// Defaults, then the config file, then the overrides.
pub fn load_config(path: Option<&Path>, sets: &[String]) -> Result<TrainConfig, CliError> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| io_err(p, e))?,
        None => String::new(),
    };
    Ok(TrainConfig::from_text(&text, &parse_overrides(sets)?)?)
}

/// Files written by a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunArtifacts {
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub config: PathBuf,
    pub stability: Option<PathBuf>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Stop once this many epochs are complete.
    pub stop_after: Option<usize>,
    pub stability_dump: bool,
}

/// Renders every artifact before writing any, so a failed run leaves
/// nothing behind; each file is replaced atomically.
fn write_artifacts(trainer: &Trainer, out: &Path, stability_dump: bool) -> Result<RunArtifacts, CliError> {
    let files = RunArtifacts {
        metrics: out.join(METRICS_FILE),
        checkpoint: out.join(CHECKPOINT_FILE),
        config: out.join(CONFIG_FILE),
        stability: stability_dump.then(|| out.join(STABILITY_FILE)),
    };
    let mut contents = vec![
        (files.metrics.clone(), trainer.metrics_csv().into_bytes()),
        (files.checkpoint.clone(), trainer.checkpoint().to_bytes()),
        (files.config.clone(), trainer.config().resolved().to_text().into_bytes()),
    ];
    if let Some(p) = &files.stability {
        contents.push((p.clone(), trainer.stability_csv().into_bytes()));
    }
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    for (path, bytes) in contents {
        write_atomic(&path, &bytes).map_err(|e| io_err(&path, e))?;
    }
    Ok(files)
}

fn finish(mut trainer: Trainer, out: &Path, opts: &TrainOptions) -> Result<(Trainer, RunArtifacts), CliError> {
    match opts.stop_after {
        Some(n) => trainer.run_until(n)?,
        None => trainer.run()?,
    }
    let artifacts = write_artifacts(&trainer, out, opts.stability_dump)?;
    Ok((trainer, artifacts))
}

pub fn cmd_train(cfg: TrainConfig, out: &Path, opts: &TrainOptions) -> Result<(Trainer, RunArtifacts), CliError> {
    let data = load_dataset(&cfg.data)?;
    finish(Trainer::new(cfg, data)?, out, opts)
}

/// Loads a checkpoint together with the dataset its config names.
pub fn load_run(checkpoint: &Path) -> Result<Trainer, CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let text = std::str::from_utf8(ck.require("config")?)
        .map_err(|_| CliError::Io("checkpoint: config section is not UTF-8".into()))?;
    let cfg = TrainConfig::from_text(text, &[])?;
    let data = load_dataset(&cfg.data)?;
    Ok(Trainer::from_checkpoint(&ck, data)?)
}

pub fn cmd_resume(checkpoint: &Path, out: &Path, opts: &TrainOptions) -> Result<(Trainer, RunArtifacts), CliError> {
    finish(load_run(checkpoint)?, out, opts)
}

/// Mean of the last (up to) five per-epoch stability means.
pub fn final_stability(trainer: &Trainer) -> Option<f64> {
    let values: Vec<f64> = trainer.records().iter().filter_map(|r| r.mean_stability).collect();
    eval::mean(&values[values.len().saturating_sub(5)..])
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub h: usize,
    pub knn_top1: Option<f64>,
    pub mean_stability: Option<f64>,
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let fmt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    let mut out = String::from("h,knn_top1,mean_stability\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.h, fmt(r.knn_top1), fmt(r.mean_stability));
    }
    out
}

/// One run per `h`, each in `out/h<h>`, plus `out/sweep.csv`.
pub fn cmd_sweep_h(base: &TrainConfig, hs: &[usize], out: &Path) -> Result<Vec<SweepRow>, CliError> {
    if hs.is_empty() {
        return Err(CliError::Config("config error: empty h list".into()));
    }
    let mut rows = Vec::new();
    for &h in hs {
        let cfg = TrainConfig { h, ..base.clone() };
        let (trainer, _) = cmd_train(cfg, &out.join(format!("h{h}")), &TrainOptions::default())?;
        rows.push(SweepRow {
            h,
            knn_top1: trainer.records().last().map(|r| r.knn_top1),
            mean_stability: final_stability(&trainer),
        });
    }
    let path = out.join("sweep.csv");
    write_atomic(&path, sweep_table(&rows).as_bytes()).map_err(|e| io_err(&path, e))?;
    Ok(rows)
}

fn load_dataset_file(path: &Path) -> Result<Dataset, CliError> {
    Dataset::load(path).map_err(|e| match e {
        DataError::Io(e) => io_err(path, e),
        other => io_err(path, other),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub knn_top1: f64,
    pub linear_top1: Option<f64>,
}

/// Scores the student stored in `checkpoint` on `data` (or on the run's own
/// dataset) with a kNN probe and, optionally, a linear probe.
pub fn cmd_eval(checkpoint: &Path, data: Option<&Path>, k: usize, probe: bool) -> Result<EvalReport, CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let state = CheckpointState::decode(&ck)?;
    let dataset = match data {
        Some(p) => load_dataset_file(p)?,
        None => load_dataset(&state.config.data)?,
    };
    if dataset.in_dim() != state.student.in_dim() {
        return Err(CliError::Config(format!(
            "config error: dataset has {} features, the encoder expects {}",
            dataset.in_dim(),
            state.student.in_dim()
        )));
    }
    let emb = state
        .student
        .embed(&dataset.all())
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let split = eval::Split::new(
        dataset.n_samples(),
        state.config.eval_fraction,
        &mut tkc::rng::stream(state.config.seed, tkc::trainer::STREAM_SPLIT),
    );
    let labels = dataset.labels();
    let pick = |idx: &[usize]| -> Result<(tkc::autodiff::Tensor, Vec<u32>), CliError> {
        let t = emb.select_rows(idx).map_err(|e| CliError::Internal(e.to_string()))?;
        Ok((t, idx.iter().map(|&i| labels[i]).collect()))
    };
    let (train, train_labels) = pick(&split.train)?;
    let (test, test_labels) = pick(&split.test)?;
    let knn_top1 = eval::knn_eval(&train, &train_labels, &test, &test_labels, k)
        .map_err(|e| CliError::Config(format!("config error: {e}")))?;
    let linear_top1 = if probe {
        let cfg = ProbeConfig {
            test_fraction: state.config.eval_fraction,
            seed: state.config.seed,
            ..ProbeConfig::default()
        };
        let r = eval::linear_probe(&emb, labels, &cfg).map_err(|e| CliError::Config(format!("config error: {e}")))?;
        Some(r.accuracy)
    } else {
        None
    };
    Ok(EvalReport {
        knn_top1,
        linear_top1,
    })
}

/// Per-sample, per-epoch stability recorded in `checkpoint`.
pub fn cmd_stability_report(checkpoint: &Path, data: Option<&Path>) -> Result<String, CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    if ck.get("bank").is_none() {
        return Err(CheckpointError::MissingSection("bank".into()).into());
    }
    let state = CheckpointState::decode(&ck)?;
    let n = state.bank.n_samples();
    if let Some(p) = data {
        let d = load_dataset_file(p)?;
        if d.n_samples() != n {
            return Err(CliError::Config(format!(
                "config error: dataset has {} samples, the checkpoint's bank holds {n}",
                d.n_samples()
            )));
        }
    }
    Ok(stability_csv(&state.stability, n))
}

pub fn cmd_gen_data(spec: &MixtureSpec, out: &Path) -> Result<Dataset, CliError> {
    let data = make_gaussian_mixture(spec).map_err(|e| CliError::Config(format!("config error: {e}")))?;
    data.save(out).map_err(|e| match e {
        DataError::Io(e) => io_err(out, e),
        other => io_err(out, other),
    })?;
    Ok(data)
}
