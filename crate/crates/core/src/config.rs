//! Run configuration and its `key = value` text form.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. [`TrainConfig::to_text`] writes every key with its resolved
//! value, so a run can be reproduced from that file alone.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::data::{AugmentSpec, MixtureSpec};
use crate::nn::KtStructure;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, found `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{0}` given more than once")]
    Duplicate(String),
    #[error("key `{key}`: cannot parse `{value}`: {reason}")]
    Value {
        key: String,
        value: String,
        reason: String,
    },
    #[error("key `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

impl ConfigError {
    pub fn invalid(key: &str, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            key: key.to_string(),
            reason: reason.into(),
        }
    }
}

/// Splits config text into `(key, value)` pairs in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = parse_assignment(line).ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            text: line.to_string(),
        })?;
        if pairs.iter().any(|(k, _)| *k == key) {
            return Err(ConfigError::Duplicate(key));
        }
        pairs.push((key, value));
    }
    Ok(pairs)
}

/// Parses one `key=value` assignment, as given to `--set`.
pub fn parse_assignment(s: &str) -> Option<(String, String)> {
    let (k, v) = s.split_once('=')?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() || k.chars().any(char::is_whitespace) {
        return None;
    }
    Some((k.to_string(), v.to_string()))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossVariant {
    #[default]
    InfoNce,
    L2,
}

impl LossVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            LossVariant::InfoNce => "infonce",
            LossVariant::L2 => "l2",
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "infonce" => Ok(LossVariant::InfoNce),
            "l2" => Ok(LossVariant::L2),
            _ => Err("expected `infonce` or `l2`".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(MixtureSpec),
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Number of temporal teachers; 0 trains the plain EMA-teacher baseline.
    pub h: usize,
    pub alpha: f64,
    pub tau: f64,
    /// Queue length for the current-teacher term.
    pub negatives: usize,
    /// Negatives per temporal term; `None` uses `negatives`.
    pub bank_negatives: Option<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub seed: u64,
    pub loss: LossVariant,
    pub kt_structure: KtStructure,
    pub kt_hidden: usize,
    /// `None` enables the predictor for the L2 loss only.
    pub predictor: Option<bool>,
    pub predictor_hidden: usize,
    pub embed_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub data: DataSource,
    pub augment: AugmentSpec,
    pub knn_k: usize,
    pub eval_fraction: f64,
    pub linear_probe: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            h: 2,
            alpha: 0.999,
            tau: 0.2,
            negatives: 1024,
            bank_negatives: None,
            batch_size: 64,
            epochs: 40,
            lr: 0.03,
            warmup_epochs: 2,
            weight_decay: 1e-4,
            momentum: 0.9,
            seed: 0,
            loss: LossVariant::InfoNce,
            kt_structure: KtStructure::TwoLayer,
            kt_hidden: 32,
            predictor: None,
            predictor_hidden: 64,
            embed_dim: 16,
            encoder_hidden: vec![256, 128],
            data: DataSource::Synthetic(MixtureSpec::default()),
            augment: AugmentSpec::default(),
            knn_k: 5,
            eval_fraction: 0.2,
            linear_probe: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn parse_auto_bool(key: &str, value: &str) -> Result<Option<bool>, ConfigError> {
    match value {
        "auto" => Ok(None),
        _ => parse(key, value).map(Some),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>, ConfigError> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn mixture(data: &mut DataSource) -> &mut MixtureSpec {
    if !matches!(data, DataSource::Synthetic(_)) {
        *data = DataSource::Synthetic(MixtureSpec::default());
    }
    match data {
        DataSource::Synthetic(m) => m,
        DataSource::File(_) => unreachable!(),
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "h",
        "alpha",
        "tau",
        "negatives",
        "bank_negatives",
        "batch_size",
        "epochs",
        "lr",
        "warmup_epochs",
        "weight_decay",
        "momentum",
        "seed",
        "loss",
        "kt_structure",
        "kt_hidden",
        "predictor",
        "predictor_hidden",
        "embed_dim",
        "encoder_hidden",
        "data.path",
        "data.classes",
        "data.per_class",
        "data.dim",
        "data.spread",
        "data.seed",
        "aug.sigma",
        "aug.mask_fraction",
        "knn_k",
        "eval_fraction",
        "linear_probe",
    ];

    /// Sets one key. `data.path` and the `data.*` mixture keys replace each
    /// other.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "h" => self.h = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "negatives" => self.negatives = parse(key, value)?,
            "bank_negatives" => {
                self.bank_negatives = match value {
                    "auto" => None,
                    _ => Some(parse(key, value)?),
                }
            }
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "loss" => self.loss = parse(key, value)?,
            "kt_structure" => self.kt_structure = parse(key, value)?,
            "kt_hidden" => self.kt_hidden = parse(key, value)?,
            "predictor" => self.predictor = parse_auto_bool(key, value)?,
            "predictor_hidden" => self.predictor_hidden = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "encoder_hidden" => self.encoder_hidden = parse_list(key, value)?,
            "data.path" => {
                if value.is_empty() {
                    return Err(ConfigError::invalid(key, "empty path"));
                }
                self.data = DataSource::File(PathBuf::from(value));
            }
            "data.classes" => mixture(&mut self.data).classes = parse(key, value)?,
            "data.per_class" => mixture(&mut self.data).per_class = parse(key, value)?,
            "data.dim" => mixture(&mut self.data).dim = parse(key, value)?,
            "data.spread" => mixture(&mut self.data).spread = parse(key, value)?,
            "data.seed" => mixture(&mut self.data).seed = parse(key, value)?,
            "aug.sigma" => self.augment.sigma = parse(key, value)?,
            "aug.mask_fraction" => self.augment.mask_fraction = parse(key, value)?,
            "knn_k" => self.knn_k = parse(key, value)?,
            "eval_fraction" => self.eval_fraction = parse(key, value)?,
            "linear_probe" => self.linear_probe = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Defaults, then the file's pairs, then `overrides` in order.
    pub fn from_text(text: &str, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (k, v) in parse_pairs(text)?.iter().chain(overrides) {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn use_predictor(&self) -> bool {
        self.predictor.unwrap_or(self.loss == LossVariant::L2)
    }

    pub fn temporal_negatives(&self) -> usize {
        self.bank_negatives.unwrap_or(self.negatives)
    }

    /// Layer widths of the encoder for inputs of width `in_dim`.
    pub fn encoder_dims(&self, in_dim: usize) -> Vec<usize> {
        let mut dims = vec![in_dim];
        dims.extend(&self.encoder_hidden);
        dims.push(self.embed_dim);
        dims
    }

    /// Checks everything that does not depend on the dataset.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |key: &str, reason: &str| Err(ConfigError::invalid(key, reason));
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail("alpha", "must lie in [0, 1]");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail("tau", "must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail("lr", "must be finite and non-negative");
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return fail("warmup_epochs", "must be smaller than epochs");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight_decay", "must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum", "must lie in [0, 1)");
        }
        if self.kt_hidden == 0 {
            return fail("kt_hidden", "must be positive");
        }
        if self.predictor_hidden == 0 {
            return fail("predictor_hidden", "must be positive");
        }
        if self.embed_dim == 0 {
            return fail("embed_dim", "must be positive");
        }
        if self.encoder_hidden.contains(&0) {
            return fail("encoder_hidden", "widths must be positive");
        }
        if let DataSource::Synthetic(m) = &self.data {
            if m.classes < 2 {
                return fail("data.classes", "needs at least 2 classes");
            }
            if m.per_class == 0 {
                return fail("data.per_class", "must be positive");
            }
            if m.dim == 0 {
                return fail("data.dim", "must be positive");
            }
            if !(m.spread >= 0.0 && m.spread.is_finite()) {
                return fail("data.spread", "must be finite and non-negative");
            }
        }
        if !(self.augment.sigma >= 0.0 && self.augment.sigma.is_finite()) {
            return fail("aug.sigma", "must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.augment.mask_fraction) {
            return fail("aug.mask_fraction", "must lie in [0, 1)");
        }
        if self.knn_k == 0 || self.knn_k.is_multiple_of(2) {
            return fail("knn_k", "must be odd");
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return fail("eval_fraction", "must lie in (0, 1)");
        }
        Ok(())
    }

    /// Every key with its resolved value, one per line.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut lines = vec![
            format!("h = {}", self.h),
            format!("alpha = {}", self.alpha),
            format!("tau = {}", self.tau),
            format!("negatives = {}", self.negatives),
            format!("bank_negatives = {}", self.temporal_negatives()),
            format!("batch_size = {}", self.batch_size),
            format!("epochs = {}", self.epochs),
            format!("lr = {}", self.lr),
            format!("warmup_epochs = {}", self.warmup_epochs),
            format!("weight_decay = {}", self.weight_decay),
            format!("momentum = {}", self.momentum),
            format!("seed = {}", self.seed),
            format!("loss = {}", self.loss),
            format!("kt_structure = {}", self.kt_structure),
            format!("kt_hidden = {}", self.kt_hidden),
            format!("predictor = {}", self.use_predictor()),
            format!("predictor_hidden = {}", self.predictor_hidden),
            format!("embed_dim = {}", self.embed_dim),
            format!("encoder_hidden = {}", list(&self.encoder_hidden)),
        ];
        match &self.data {
            DataSource::File(p) => lines.push(format!("data.path = {}", p.display())),
            DataSource::Synthetic(m) => lines.extend([
                format!("data.classes = {}", m.classes),
                format!("data.per_class = {}", m.per_class),
                format!("data.dim = {}", m.dim),
                format!("data.spread = {}", m.spread),
                format!("data.seed = {}", m.seed),
            ]),
        }
        lines.extend([
            format!("aug.sigma = {}", self.augment.sigma),
            format!("aug.mask_fraction = {}", self.augment.mask_fraction),
            format!("knn_k = {}", self.knn_k),
            format!("eval_fraction = {}", self.eval_fraction),
            format!("linear_probe = {}", self.linear_probe),
        ]);
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    /// Same run with the predictor and negative count made explicit.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        cfg.predictor = Some(self.use_predictor());
        cfg.bank_negatives = Some(self.temporal_negatives());
        cfg
    }
}
