//! Frozen-feature evaluation: kNN and linear probes, and per-sample
//! stability between consecutive epochs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{dot, Tape, Tensor, TensorError};
use crate::checkpoint::{put_f64s, put_u64, CheckpointError, Reader};
use crate::losses::LossBreakdown;
use crate::nn::{Linear, Mlp};
use crate::trainer::Sgd;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("k = {k} exceeds the {n_train} training points")]
    KTooLarge { k: usize, n_train: usize },
    #[error("k must be odd and positive, got {0}")]
    EvenK(usize),
    #[error("{features} feature rows but {labels} labels")]
    LabelCount { features: usize, labels: usize },
    #[error("probe needs at least two classes")]
    SingleClass,
    #[error("nothing to evaluate")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn check_labels(x: &Tensor, labels: &[u32]) -> Result<(usize, usize), EvalError> {
    let (n, d) = x.dims2()?;
    if n != labels.len() {
        return Err(EvalError::LabelCount {
            features: n,
            labels: labels.len(),
        });
    }
    Ok((n, d))
}

/// Indices of the `k` most similar training rows to `query`, most similar
/// first; equal similarities rank the lower index first.
fn nearest(train: &Tensor, query: &[f64], k: usize) -> Vec<usize> {
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for i in 0..train.shape()[0] {
        let s = dot(train.row(i), query);
        if best.len() == k && s <= best[k - 1].0 {
            continue;
        }
        let at = best.partition_point(|&(b, _)| b >= s);
        best.insert(at, (s, i));
        best.truncate(k);
    }
    best.into_iter().map(|(_, i)| i).collect()
}

/// Majority label among `neighbors`; ties go to the label seen first.
fn vote(neighbors: &[usize], labels: &[u32]) -> u32 {
    let mut counts: Vec<(u32, usize)> = Vec::new();
    for &n in neighbors {
        match counts.iter_mut().find(|(l, _)| *l == labels[n]) {
            Some(c) => c.1 += 1,
            None => counts.push((labels[n], 1)),
        }
    }
    let top = counts.iter().map(|c| c.1).max().unwrap_or(0);
    counts.iter().find(|c| c.1 == top).map(|c| c.0).unwrap_or(0)
}

/// kNN label for every test row, by dot-product similarity.
pub fn knn_predict(
    train: &Tensor,
    train_labels: &[u32],
    test: &Tensor,
    k: usize,
) -> Result<Vec<u32>, EvalError> {
    let (n_train, d) = check_labels(train, train_labels)?;
    let (n_test, d_test) = test.dims2()?;
    if d != d_test {
        return Err(TensorError::ShapeMismatch {
            left: train.shape().to_vec(),
            right: test.shape().to_vec(),
        }
        .into());
    }
    if k == 0 || k.is_multiple_of(2) {
        return Err(EvalError::EvenK(k));
    }
    if k > n_train {
        return Err(EvalError::KTooLarge { k, n_train });
    }
    Ok((0..n_test)
        .map(|i| vote(&nearest(train, test.row(i), k), train_labels))
        .collect())
}

/// Top-1 accuracy of the `k`-nearest-neighbor vote.
pub fn knn_eval(
    train: &Tensor,
    train_labels: &[u32],
    test: &Tensor,
    test_labels: &[u32],
    k: usize,
) -> Result<f64, EvalError> {
    check_labels(test, test_labels)?;
    if test_labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let pred = knn_predict(train, train_labels, test, k)?;
    let hits = pred.iter().zip(test_labels).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / test_labels.len() as f64)
}

/// Rows scaled to unit length; zero rows stay zero.
pub fn normalize_rows(x: &Tensor) -> Result<Tensor, TensorError> {
    let (n, d) = x.dims2()?;
    let mut out = x.clone();
    for i in 0..n {
        let row = &mut out.data_mut()[i * d..(i + 1) * d];
        let norm = dot(row, row).sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok(out)
}

/// Seeded train/test split: a permutation of `0..n` whose first
/// `round(n·test_fraction)` entries (at least one) form the test set.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn new(n: usize, test_fraction: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1.min(n), n);
        let train = order.split_off(n_test);
        Self { train, test: order }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.5,
            momentum: 0.9,
            batch_size: 256,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub classifier: Linear,
}

/// Softmax linear classifier on frozen `embeds`, trained by mini-batch SGD on
/// a seeded split and scored on the held-out rows.
pub fn linear_probe(embeds: &Tensor, labels: &[u32], cfg: &ProbeConfig) -> Result<ProbeResult, EvalError> {
    let (n, d) = check_labels(embeds, labels)?;
    let classes = labels.iter().max().map_or(0, |&m| m as usize + 1);
    let distinct = {
        let mut seen = vec![false; classes];
        labels.iter().for_each(|&l| seen[l as usize] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(EvalError::SingleClass);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let split = Split::new(n, cfg.test_fraction, &mut rng);
    if split.train.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut model = Mlp::zeros(&[d, classes]);
    let mut sgd = Sgd::new(cfg.momentum, 0.0, &[model.num_params()]);
    let mut order = split.train.clone();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let x = embeds.select_rows(batch)?;
            let y: Vec<usize> = batch.iter().map(|&i| labels[i] as usize).collect();
            let mut tape = Tape::new();
            let vars = model.register(&mut tape, true);
            let xv = tape.constant(x);
            let (w, b) = (vars.vars().next().unwrap(), vars.vars().nth(1).unwrap());
            let logits = tape.linear(xv, w, b)?;
            let ce = tape.cross_entropy_rows(logits, &y)?;
            let loss = tape.mean(ce)?;
            tape.backward(loss)?;
            let grad = vars.flat_grad(&tape);
            sgd.step(0, &mut model, &grad, cfg.lr);
        }
    }
    let classifier = model.layers()[0].clone();
    let x = embeds.select_rows(&split.test)?;
    let mut hits = 0;
    for (r, &i) in split.test.iter().enumerate() {
        let row = x.row(r);
        let mut best = (f64::NEG_INFINITY, 0);
        for c in 0..classes {
            let s = dot(classifier.weight.row(c), row) + classifier.bias.data()[c];
            if s > best.0 {
                best = (s, c);
            }
        }
        hits += usize::from(best.1 == labels[i] as usize);
    }
    Ok(ProbeResult {
        accuracy: hits as f64 / split.test.len() as f64,
        classifier,
    })
}

/// Per-row cosine similarity between two epochs' features, clamped to
/// `[-1, 1]`. Identical rows give exactly `1.0`.
pub fn stability(curr: &Tensor, prev: &Tensor) -> Result<Vec<f64>, EvalError> {
    if curr.shape() != prev.shape() {
        return Err(TensorError::ShapeMismatch {
            left: curr.shape().to_vec(),
            right: prev.shape().to_vec(),
        }
        .into());
    }
    let (n, _) = curr.dims2()?;
    Ok((0..n)
        .map(|i| {
            let (a, b) = (curr.row(i), prev.row(i));
            let denom = (dot(a, a) * dot(b, b)).sqrt();
            if denom == 0.0 {
                0.0
            } else {
                (dot(a, b) / denom).clamp(-1.0, 1.0)
            }
        })
        .collect())
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    Some(values.iter().sum::<f64>() / values.len() as f64)
}

/// One row of the metrics table.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub epoch: usize,
    /// Mean over the epoch's steps.
    pub loss: LossBreakdown,
    pub knn_top1: f64,
    pub linear_top1: Option<f64>,
    /// Absent for the first epoch, which has nothing to compare against.
    pub mean_stability: Option<f64>,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

pub fn csv_header(h: usize) -> String {
    let mut cols = vec!["epoch".to_string(), "loss_total".into(), "loss_current".into()];
    cols.extend((0..h).map(|j| format!("loss_temporal_{j}")));
    cols.extend(["knn_top1".into(), "mean_stability".into(), "lr".into()]);
    cols.join(",")
}

impl MetricRecord {
    /// CSV row with `h` temporal columns, blank while warming up.
    pub fn csv_row(&self, h: usize) -> String {
        let mut cols = vec![
            self.epoch.to_string(),
            self.loss.total.to_string(),
            self.loss.current.to_string(),
        ];
        cols.extend((0..h).map(|j| self.loss.temporal.get(j).map_or(String::new(), f64::to_string)));
        cols.push(self.knn_top1.to_string());
        cols.push(self.mean_stability.map_or(String::new(), |s| s.to_string()));
        cols.push(self.lr.to_string());
        cols.join(",")
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        put_u64(out, self.epoch as u64);
        put_f64s(out, &[self.loss.total, self.loss.current]);
        put_u64(out, self.loss.temporal.len() as u64);
        put_f64s(out, &self.loss.temporal);
        put_f64s(out, &[self.knn_top1]);
        for v in [self.linear_top1, self.mean_stability] {
            out.push(v.is_some() as u8);
            put_f64s(out, &[v.unwrap_or(0.0)]);
        }
        put_f64s(out, &[self.lr]);
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, CheckpointError> {
        let epoch = r.usize()?;
        let (total, current) = (r.f64()?, r.f64()?);
        let n = r.usize()?;
        let temporal = r.f64s(n)?;
        let knn_top1 = r.f64()?;
        let mut opt = || -> Result<Option<f64>, CheckpointError> {
            let flag = r.u8()?;
            let v = r.f64()?;
            match flag {
                0 => Ok(None),
                1 => Ok(Some(v)),
                _ => Err(CheckpointError::Format("flag byte is not 0 or 1".into())),
            }
        };
        let linear_top1 = opt()?;
        let mean_stability = opt()?;
        let lr = r.f64()?;
        Ok(Self {
            epoch,
            loss: LossBreakdown {
                total,
                current,
                temporal,
            },
            knn_top1,
            linear_top1,
            mean_stability,
            lr,
        })
    }
}
