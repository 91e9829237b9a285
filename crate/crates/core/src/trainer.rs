//! The training loop.
//!
//! Each step draws two views of every batch sample, embeds one with the
//! student and the other with the EMA teacher, adds one term per temporal
//! teacher once the history bank holds `h` complete epochs, takes an SGD step
//! on the student and the knowledge transformers, updates the teacher, and
//! records the teacher outputs in the queue and the bank.
//!
//! Random streams (all derived from `seed`):
//! 0 student init, 1 knowledge transformers, 2 predictor, 3 visit order,
//! 4 augmentation, 5 bank negatives, 6 queue prefill, 7 evaluation split.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::bank::{BankError, HistoryBank};
use crate::checkpoint::{
    decode_mlp, encode_mlp, put_f64s, put_u64, Checkpoint, CheckpointError, Reader,
};
use crate::config::{ConfigError, DataSource, LossVariant, TrainConfig};
use crate::data::{augment, make_gaussian_mixture, DataError, Dataset};
use crate::ema::{EmaError, EmaState};
use crate::eval::{self, EvalError, MetricRecord, ProbeConfig, Split};
use crate::losses::{info_nce, l2_distance, LossBreakdown, LossError, NegativeQueue};
use crate::nn::{KnowledgeTransformer, KtStructure, Mlp, Predictor};
use crate::rng;

pub const STREAM_STUDENT: u64 = 0;
pub const STREAM_KT: u64 = 1;
pub const STREAM_PREDICTOR: u64 = 2;
pub const STREAM_ORDER: u64 = 3;
pub const STREAM_AUGMENT: u64 = 4;
pub const STREAM_BANK: u64 = 5;
pub const STREAM_QUEUE: u64 = 6;
pub const STREAM_SPLIT: u64 = 7;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("loss became non-finite at epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Ema(#[from] EmaError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Linear warm-up from `lr_base/10` to `lr_base` over `warmup_steps`, then
/// cosine decay towards zero at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, lr_base: f64) -> f64 {
    if step < warmup_steps {
        let start = lr_base / 10.0;
        return start + (lr_base - start) * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1) as f64;
    let t = (step - warmup_steps) as f64 / span;
    lr_base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// SGD with momentum and L2 weight decay, one buffer per parameter group.
///
/// `buf ← μ·buf + (g + λ·p)`, `p ← p − lr·buf`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    buffers: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64, group_sizes: &[usize]) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn buffers(&self) -> &[Vec<f64>] {
        &self.buffers
    }

    /// Updates `params` in place from its flat gradient.
    pub fn step(&mut self, group: usize, params: &mut Mlp, grad: &[f64], lr: f64) {
        let buf = &mut self.buffers[group];
        assert_eq!(buf.len(), grad.len(), "optimizer group size");
        let mut at = 0;
        for slice in params.param_slices_mut() {
            for p in slice.iter_mut() {
                let g = grad[at] + self.weight_decay * *p;
                buf[at] = self.momentum * buf[at] + g;
                *p -= lr * buf[at];
                at += 1;
            }
        }
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        put_f64s(out, &[self.momentum, self.weight_decay]);
        put_u64(out, self.buffers.len() as u64);
        for b in &self.buffers {
            put_u64(out, b.len() as u64);
            put_f64s(out, b);
        }
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, CheckpointError> {
        let (momentum, weight_decay) = (r.f64()?, r.f64()?);
        let groups = r.usize()?;
        let mut buffers = Vec::new();
        for _ in 0..groups {
            let n = r.usize()?;
            buffers.push(r.f64s(n)?);
        }
        Ok(Self {
            momentum,
            weight_decay,
            buffers,
        })
    }
}

/// Reads or generates the dataset a config names.
pub fn load_dataset(source: &DataSource) -> Result<Dataset, DataError> {
    match source {
        DataSource::Synthetic(spec) => make_gaussian_mixture(spec),
        DataSource::File(path) => Dataset::load(path),
    }
}

/// Output of one epoch.
#[derive(Clone, Debug)]
pub struct EpochReport {
    pub record: MetricRecord,
    pub steps: Vec<LossBreakdown>,
}

pub struct Trainer {
    cfg: TrainConfig,
    data: Dataset,
    split: Split,
    student: Mlp,
    teacher: EmaState,
    kts: Vec<KnowledgeTransformer>,
    predictor: Option<Predictor>,
    optimizer: Sgd,
    queue: NegativeQueue,
    bank: HistoryBank,
    order_rng: ChaCha8Rng,
    aug_rng: ChaCha8Rng,
    epoch: usize,
    global_step: usize,
    records: Vec<MetricRecord>,
    stability: Vec<(usize, Vec<f64>)>,
}

fn group_sizes(student: &Mlp, kts: &[KnowledgeTransformer], predictor: Option<&Predictor>) -> Vec<usize> {
    let mut sizes = vec![student.num_params()];
    sizes.extend(kts.iter().map(|k| k.mlp().num_params()));
    sizes.extend(predictor.map(|p| p.mlp().num_params()));
    sizes
}

fn check_against_data(cfg: &TrainConfig, data: &Dataset) -> Result<Split, TrainError> {
    cfg.validate()?;
    let n = data.n_samples();
    if cfg.h > 0 && cfg.loss == LossVariant::InfoNce {
        let k = cfg.temporal_negatives();
        if k + cfg.batch_size > n {
            return Err(ConfigError::invalid(
                "bank_negatives",
                format!("{k} negatives plus a batch of {} exceed {n} samples", cfg.batch_size),
            )
            .into());
        }
    }
    let split = Split::new(n, cfg.eval_fraction, &mut rng::stream(cfg.seed, STREAM_SPLIT));
    if cfg.knn_k > split.train.len() {
        return Err(ConfigError::invalid(
            "knn_k",
            format!("exceeds the {} evaluation training points", split.train.len()),
        )
        .into());
    }
    Ok(split)
}

impl Trainer {
    pub fn new(cfg: TrainConfig, data: Dataset) -> Result<Self, TrainError> {
        let split = check_against_data(&cfg, &data)?;
        let d = cfg.embed_dim;
        let student = Mlp::init(
            &cfg.encoder_dims(data.in_dim()),
            &mut rng::stream(cfg.seed, STREAM_STUDENT),
        );
        let teacher = EmaState::new(student.clone(), cfg.alpha)?;
        let mut kt_rng = rng::stream(cfg.seed, STREAM_KT);
        let kts: Vec<KnowledgeTransformer> = (0..cfg.h)
            .map(|_| KnowledgeTransformer::init(cfg.kt_structure, d, cfg.kt_hidden, &mut kt_rng))
            .collect();
        let predictor = (cfg.loss == LossVariant::L2 && cfg.use_predictor()).then(|| {
            Predictor::init(d, cfg.predictor_hidden, &mut rng::stream(cfg.seed, STREAM_PREDICTOR))
        });
        let optimizer = Sgd::new(
            cfg.momentum,
            cfg.weight_decay,
            &group_sizes(&student, &kts, predictor.as_ref()),
        );
        let bank = HistoryBank::new(
            data.n_samples(),
            cfg.h.max(1),
            d,
            rng::stream(cfg.seed, STREAM_BANK),
        )?;
        let mut trainer = Self {
            queue: NegativeQueue::new(cfg.negatives, d),
            order_rng: rng::stream(cfg.seed, STREAM_ORDER),
            aug_rng: rng::stream(cfg.seed, STREAM_AUGMENT),
            cfg,
            data,
            split,
            student,
            teacher,
            kts,
            predictor,
            optimizer,
            bank,
            epoch: 0,
            global_step: 0,
            records: Vec::new(),
            stability: Vec::new(),
        };
        if trainer.cfg.loss == LossVariant::InfoNce {
            trainer.prefill_queue()?;
        }
        Ok(trainer)
    }

    /// Fills the queue with teacher outputs of randomly drawn views.
    fn prefill_queue(&mut self) -> Result<(), TrainError> {
        let mut prng = rng::stream(self.cfg.seed, STREAM_QUEUE);
        let n = self.data.n_samples();
        let rows: Vec<Vec<f64>> = (0..self.queue.capacity())
            .map(|_| {
                let i = prng.random_range(0..n);
                augment(&self.data.row_f64(i), &self.cfg.augment, &mut prng)
            })
            .collect();
        if rows.is_empty() {
            return Ok(());
        }
        let x = Tensor::from_rows(&rows, self.data.in_dim())?;
        let out = self.teacher.teacher().embed(&x)?;
        self.queue.push(&out)?;
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn split(&self) -> &Split {
        &self.split
    }

    pub fn student(&self) -> &Mlp {
        &self.student
    }

    pub fn into_student(self) -> Mlp {
        self.student
    }

    pub fn teacher(&self) -> &EmaState {
        &self.teacher
    }

    pub fn knowledge_transformers(&self) -> &[KnowledgeTransformer] {
        &self.kts
    }

    pub fn predictor(&self) -> Option<&Predictor> {
        self.predictor.as_ref()
    }

    pub fn optimizer(&self) -> &Sgd {
        &self.optimizer
    }

    pub fn queue(&self) -> &NegativeQueue {
        &self.queue
    }

    pub fn bank(&self) -> &HistoryBank {
        &self.bank
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn global_step(&self) -> usize {
        self.global_step
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    /// Per-sample stability for every epoch after the first.
    pub fn stability_history(&self) -> &[(usize, Vec<f64>)] {
        &self.stability
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.n_samples().div_ceil(self.cfg.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.epochs * self.steps_per_epoch()
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    fn lr_at(&self, step: usize) -> f64 {
        lr_schedule(
            step,
            self.total_steps(),
            self.cfg.warmup_epochs * self.steps_per_epoch(),
            self.cfg.lr,
        )
    }

    /// True when the temporal terms are part of the loss.
    pub fn temporal_active(&self) -> bool {
        self.cfg.h > 0 && self.bank.has_full_history()
    }

    /// One optimization step on the samples `batch`.
    pub fn train_step(&mut self, batch: &[usize]) -> Result<LossBreakdown, TrainError> {
        let lr = self.lr_at(self.global_step);
        let in_dim = self.data.in_dim();
        let mut x0 = Vec::with_capacity(batch.len() * in_dim);
        let mut xn = Vec::with_capacity(batch.len() * in_dim);
        for &i in batch {
            let row = self.data.row_f64(i);
            x0.extend(augment(&row, &self.cfg.augment, &mut self.aug_rng));
            xn.extend(augment(&row, &self.cfg.augment, &mut self.aug_rng));
        }
        let x0 = Tensor::matrix(batch.len(), in_dim, x0)?;
        let xn = Tensor::matrix(batch.len(), in_dim, xn)?;

        let mut tape = Tape::new();
        let svars = self.student.register(&mut tape, true);
        let x0v = tape.constant(x0);
        let r0 = svars.forward(&mut tape, x0v)?;
        let rn = self.teacher.teacher().embed(&xn)?;
        let rnv = tape.constant(rn.clone());

        let pvars = self.predictor.as_ref().map(|p| p.mlp().register(&mut tape, true));
        let query = match &pvars {
            Some(pv) => pv.forward(&mut tape, r0)?,
            None => r0,
        };
        let tau = self.cfg.tau;
        let current = match self.cfg.loss {
            LossVariant::InfoNce => {
                let negs = tape.constant(self.queue.view());
                info_nce(&mut tape, query, rnv, negs, tau)?
            }
            LossVariant::L2 => l2_distance(&mut tape, query, rnv)?,
        };

        let temporal_active = self.temporal_active();
        let mut terms: Vec<Var> = Vec::new();
        let mut kt_vars = Vec::new();
        if temporal_active {
            for j in 0..self.cfg.h {
                let kv = self.kts[j].mlp().register(&mut tape, true);
                let z = tape.constant(self.bank.gather(j, batch)?);
                let pos = kv.forward(&mut tape, z)?;
                let term = match self.cfg.loss {
                    LossVariant::InfoNce => {
                        let (_, raw) = self.bank.sample_negatives_excluding(
                            j,
                            batch,
                            self.cfg.temporal_negatives(),
                        )?;
                        let raw = tape.constant(raw);
                        let negs = kv.forward(&mut tape, raw)?;
                        info_nce(&mut tape, query, pos, negs, tau)?
                    }
                    LossVariant::L2 => l2_distance(&mut tape, query, pos)?,
                };
                terms.push(term);
                kt_vars.push(kv);
            }
        }
        let mut total = current;
        for &t in &terms {
            total = tape.add(total, t)?;
        }
        let breakdown = LossBreakdown {
            total: tape.value(total).item()?,
            current: tape.value(current).item()?,
            temporal: terms
                .iter()
                .map(|&t| tape.value(t).item())
                .collect::<Result<_, _>>()?,
        };
        if !breakdown.total.is_finite() {
            return Err(TrainError::Divergence {
                epoch: self.epoch,
                step: self.global_step,
            });
        }
        tape.backward(total)?;

        let grad = svars.flat_grad(&tape);
        self.optimizer.step(0, &mut self.student, &grad, lr);
        if temporal_active {
            for (j, kv) in kt_vars.iter().enumerate() {
                let grad = kv.flat_grad(&tape);
                self.optimizer.step(1 + j, self.kts[j].mlp_mut(), &grad, lr);
            }
        }
        if let (Some(p), Some(pv)) = (self.predictor.as_mut(), &pvars) {
            let grad = pv.flat_grad(&tape);
            self.optimizer.step(1 + self.cfg.h, p.mlp_mut(), &grad, lr);
        }
        self.teacher.update(&self.student)?;
        if self.cfg.loss == LossVariant::InfoNce {
            self.queue.push(&rn)?;
        }
        for (r, &i) in batch.iter().enumerate() {
            self.bank.write(i, rn.row(r))?;
        }
        self.global_step += 1;
        Ok(breakdown)
    }

    /// One pass over a fresh permutation of the dataset, followed by the
    /// epoch-end measurements and the bank rotation.
    pub fn run_epoch(&mut self) -> Result<EpochReport, TrainError> {
        self.run_epoch_with(|_, _| {})
    }

    /// [`Trainer::run_epoch`], calling `on_step` after every step.
    pub fn run_epoch_with(
        &mut self,
        mut on_step: impl FnMut(&Trainer, &LossBreakdown),
    ) -> Result<EpochReport, TrainError> {
        let mut order: Vec<usize> = (0..self.data.n_samples()).collect();
        order.shuffle(&mut self.order_rng);
        let mut steps = Vec::with_capacity(self.steps_per_epoch());
        for batch in order.chunks(self.cfg.batch_size) {
            let b = self.train_step(batch)?;
            on_step(self, &b);
            steps.push(b);
        }
        let lr = self.lr_at(self.global_step.saturating_sub(1));

        let mean_stability = match (self.bank.current_column(), self.bank.column(self.bank.retained() - 1)) {
            (Some(curr), Ok(prev)) => {
                let values = eval::stability(&curr, &prev)?;
                let m = eval::mean(&values);
                self.stability.push((self.epoch, values));
                m
            }
            _ => None,
        };
        let knn_top1 = self.knn_top1()?;
        let linear_top1 = if self.cfg.linear_probe && self.epoch + 1 == self.cfg.epochs {
            Some(self.linear_top1()?)
        } else {
            None
        };
        let record = MetricRecord {
            epoch: self.epoch,
            loss: mean_breakdown(&steps),
            knn_top1,
            linear_top1,
            mean_stability,
            lr,
        };
        self.bank.advance_epoch();
        self.epoch += 1;
        self.records.push(record.clone());
        Ok(EpochReport { record, steps })
    }

    /// Student kNN accuracy on the held-out split of the raw data.
    pub fn knn_top1(&self) -> Result<f64, TrainError> {
        let emb = self.student.embed(&self.data.all())?;
        let labels = self.data.labels();
        let pick = |idx: &[usize]| -> Result<(Tensor, Vec<u32>), TensorError> {
            Ok((emb.select_rows(idx)?, idx.iter().map(|&i| labels[i]).collect()))
        };
        let (train, train_labels) = pick(&self.split.train)?;
        let (test, test_labels) = pick(&self.split.test)?;
        Ok(eval::knn_eval(&train, &train_labels, &test, &test_labels, self.cfg.knn_k)?)
    }

    /// Linear-probe accuracy of the student's embeddings.
    pub fn linear_top1(&self) -> Result<f64, TrainError> {
        let emb = self.student.embed(&self.data.all())?;
        let cfg = ProbeConfig {
            test_fraction: self.cfg.eval_fraction,
            seed: self.cfg.seed,
            ..ProbeConfig::default()
        };
        Ok(eval::linear_probe(&emb, self.data.labels(), &cfg)?.accuracy)
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self) -> Result<(), TrainError> {
        self.run_until(self.cfg.epochs)
    }

    /// Runs epochs until `epoch` are complete (capped at the configured count).
    pub fn run_until(&mut self, epoch: usize) -> Result<(), TrainError> {
        while self.epoch < epoch.min(self.cfg.epochs) {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = eval::csv_header(self.cfg.h);
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.csv_row(self.cfg.h));
            out.push('\n');
        }
        out
    }

    /// `sample_id,epoch,stability`, one row per sample and compared epoch.
    pub fn stability_csv(&self) -> String {
        stability_csv(&self.stability, self.data.n_samples())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert("config", self.cfg.resolved().to_text().into_bytes());
        let mut b = Vec::new();
        put_u64(&mut b, self.epoch as u64);
        put_u64(&mut b, self.global_step as u64);
        ck.insert("progress", b);

        let mut b = Vec::new();
        encode_mlp(&self.student, &mut b);
        ck.insert("student", b);

        let mut b = Vec::new();
        put_f64s(&mut b, &[self.teacher.alpha()]);
        put_u64(&mut b, self.teacher.step());
        encode_mlp(self.teacher.teacher(), &mut b);
        ck.insert("teacher", b);

        let mut b = Vec::new();
        put_u64(&mut b, self.kts.len() as u64);
        for kt in &self.kts {
            b.push(kt_tag(kt.structure()));
            encode_mlp(kt.mlp(), &mut b);
        }
        ck.insert("knowledge_transformers", b);

        let mut b = Vec::new();
        b.push(self.predictor.is_some() as u8);
        if let Some(p) = &self.predictor {
            encode_mlp(p.mlp(), &mut b);
        }
        ck.insert("predictor", b);

        let mut b = Vec::new();
        self.optimizer.encode(&mut b);
        ck.insert("optimizer", b);

        let mut b = Vec::new();
        self.queue.encode(&mut b);
        ck.insert("queue", b);

        let mut b = Vec::new();
        self.bank.encode(&mut b);
        ck.insert("bank", b);

        let mut b = Vec::new();
        rng::encode(&self.order_rng, &mut b);
        rng::encode(&self.aug_rng, &mut b);
        ck.insert("rng", b);

        let mut b = Vec::new();
        put_u64(&mut b, self.records.len() as u64);
        self.records.iter().for_each(|r| r.encode(&mut b));
        ck.insert("metrics", b);

        ck.insert("stability", encode_stability(&self.stability));
        ck
    }

    /// Restores a run from `ck`; `data` must be the dataset the run used.
    pub fn from_checkpoint(ck: &Checkpoint, data: Dataset) -> Result<Self, TrainError> {
        let state = CheckpointState::decode(ck)?;
        let cfg = state.config;
        let split = check_against_data(&cfg, &data)?;
        let fail = |section: &str, msg: &str| -> TrainError { CheckpointError::section(section, msg).into() };
        if state.student.layer_dims() != cfg.encoder_dims(data.in_dim()) {
            return Err(fail("student", "layer widths disagree with the config and dataset"));
        }
        if !state.teacher.teacher().same_dims(&state.student) {
            return Err(fail("teacher", "layer widths differ from the student"));
        }
        if state.kts.len() != cfg.h
            || state.kts.iter().any(|k| k.structure() != cfg.kt_structure || k.dim() != cfg.embed_dim)
        {
            return Err(fail("knowledge_transformers", "do not match the config"));
        }
        let want_predictor = cfg.loss == LossVariant::L2 && cfg.use_predictor();
        if state.predictor.is_some() != want_predictor {
            return Err(fail("predictor", "presence disagrees with the config"));
        }
        let sizes = group_sizes(&state.student, &state.kts, state.predictor.as_ref());
        let buf_sizes: Vec<usize> = state.optimizer.buffers().iter().map(Vec::len).collect();
        if buf_sizes != sizes {
            return Err(fail("optimizer", "buffer sizes disagree with the parameters"));
        }
        let bank = &state.bank;
        if bank.n_samples() != data.n_samples()
            || bank.retained() != cfg.h.max(1)
            || bank.dim() != cfg.embed_dim
            || bank.completed_epochs() != state.epoch
        {
            return Err(fail("bank", "shape disagrees with the config and dataset"));
        }
        if state.queue.capacity() != cfg.negatives {
            return Err(fail("queue", "capacity disagrees with the config"));
        }
        if state.records.len() != state.epoch {
            return Err(fail("metrics", "row count disagrees with progress"));
        }
        if state.stability.iter().any(|(_, v)| v.len() != data.n_samples()) {
            return Err(fail("stability", "sample count disagrees with the dataset"));
        }
        Ok(Self {
            cfg,
            data,
            split,
            student: state.student,
            teacher: state.teacher,
            kts: state.kts,
            predictor: state.predictor,
            optimizer: state.optimizer,
            queue: state.queue,
            bank: state.bank,
            order_rng: state.order_rng,
            aug_rng: state.aug_rng,
            epoch: state.epoch,
            global_step: state.global_step,
            records: state.records,
            stability: state.stability,
        })
    }
}

fn mean_breakdown(steps: &[LossBreakdown]) -> LossBreakdown {
    let n = steps.len().max(1) as f64;
    let avg = |f: &dyn Fn(&LossBreakdown) -> f64| steps.iter().map(f).sum::<f64>() / n;
    let h = steps.first().map_or(0, |s| s.temporal.len());
    let temporal = if steps.iter().all(|s| s.temporal.len() == h) {
        (0..h).map(|j| avg(&|s| s.temporal[j])).collect()
    } else {
        Vec::new()
    };
    LossBreakdown {
        total: avg(&|s| s.total),
        current: avg(&|s| s.current),
        temporal,
    }
}

fn kt_tag(s: KtStructure) -> u8 {
    match s {
        KtStructure::TwoLayer => 0,
        KtStructure::FourLayer => 1,
        KtStructure::Bottleneck => 2,
    }
}

fn kt_from_tag(tag: u8) -> Option<KtStructure> {
    match tag {
        0 => Some(KtStructure::TwoLayer),
        1 => Some(KtStructure::FourLayer),
        2 => Some(KtStructure::Bottleneck),
        _ => None,
    }
}

pub fn stability_csv(history: &[(usize, Vec<f64>)], n_samples: usize) -> String {
    let mut out = String::from("sample_id,epoch,stability\n");
    for s in 0..n_samples {
        for (epoch, values) in history {
            out.push_str(&format!("{s},{epoch},{}\n", values[s]));
        }
    }
    out
}

fn encode_stability(history: &[(usize, Vec<f64>)]) -> Vec<u8> {
    let mut b = Vec::new();
    put_u64(&mut b, history.len() as u64);
    for (epoch, values) in history {
        put_u64(&mut b, *epoch as u64);
        put_u64(&mut b, values.len() as u64);
        put_f64s(&mut b, values);
    }
    b
}

fn decode_stability(bytes: &[u8]) -> Result<Vec<(usize, Vec<f64>)>, CheckpointError> {
    let mut r = Reader::new(bytes);
    let n = r.usize()?;
    let mut out = Vec::new();
    for _ in 0..n {
        let epoch = r.usize()?;
        let len = r.usize()?;
        out.push((epoch, r.f64s(len)?));
    }
    r.finish()?;
    Ok(out)
}

/// Every section of a training checkpoint, decoded but not yet checked
/// against a dataset.
pub struct CheckpointState {
    pub config: TrainConfig,
    pub epoch: usize,
    pub global_step: usize,
    pub student: Mlp,
    pub teacher: EmaState,
    pub kts: Vec<KnowledgeTransformer>,
    pub predictor: Option<Predictor>,
    pub optimizer: Sgd,
    pub queue: NegativeQueue,
    pub bank: HistoryBank,
    pub order_rng: ChaCha8Rng,
    pub aug_rng: ChaCha8Rng,
    pub records: Vec<MetricRecord>,
    pub stability: Vec<(usize, Vec<f64>)>,
}

fn section<'a, T>(
    ck: &'a Checkpoint,
    name: &str,
    f: impl FnOnce(&mut Reader<'a>) -> Result<T, CheckpointError>,
) -> Result<T, CheckpointError> {
    let mut r = Reader::new(ck.require(name)?);
    let v = f(&mut r).map_err(|e| CheckpointError::section(name, e))?;
    r.finish().map_err(|e| CheckpointError::section(name, e))?;
    Ok(v)
}

impl CheckpointState {
    pub fn decode(ck: &Checkpoint) -> Result<Self, TrainError> {
        let text = std::str::from_utf8(ck.require("config")?)
            .map_err(|_| CheckpointError::section("config", "not UTF-8"))?;
        let config = TrainConfig::from_text(text, &[])?;
        let (epoch, global_step) = section(ck, "progress", |r| Ok((r.usize()?, r.usize()?)))?;
        let student = section(ck, "student", decode_mlp)?;
        let teacher = section(ck, "teacher", |r| {
            let alpha = r.f64()?;
            let step = r.u64()?;
            let mlp = decode_mlp(r)?;
            EmaState::with_step(mlp, alpha, step).map_err(|e| CheckpointError::Format(e.to_string()))
        })?;
        let kts = section(ck, "knowledge_transformers", |r| {
            let n = r.usize()?;
            let mut kts = Vec::new();
            for _ in 0..n {
                let s = kt_from_tag(r.u8()?)
                    .ok_or_else(|| CheckpointError::Format("unknown structure tag".into()))?;
                let mlp = decode_mlp(r)?;
                kts.push(
                    KnowledgeTransformer::from_mlp(s, mlp)
                        .map_err(|e| CheckpointError::Format(e.to_string()))?,
                );
            }
            Ok(kts)
        })?;
        let predictor = section(ck, "predictor", |r| match r.u8()? {
            0 => Ok(None),
            1 => Ok(Some(Predictor::from_mlp(decode_mlp(r)?))),
            _ => Err(CheckpointError::Format("flag byte is not 0 or 1".into())),
        })?;
        let optimizer = section(ck, "optimizer", Sgd::decode)?;
        let queue = section(ck, "queue", NegativeQueue::decode)?;
        let bank = HistoryBank::decode(ck.require("bank")?)
            .map_err(|e| CheckpointError::section("bank", e))?;
        let (order_rng, aug_rng) = section(ck, "rng", |r| {
            let bad = || CheckpointError::Format("generator state".into());
            let a = rng::decode(r.take(rng::RNG_STATE_LEN)?).ok_or_else(bad)?;
            let b = rng::decode(r.take(rng::RNG_STATE_LEN)?).ok_or_else(bad)?;
            Ok((a, b))
        })?;
        let records = section(ck, "metrics", |r| {
            let n = r.usize()?;
            let mut out = Vec::new();
            for _ in 0..n {
                out.push(MetricRecord::decode(r)?);
            }
            Ok(out)
        })?;
        let stability = decode_stability(ck.require("stability")?)
            .map_err(|e| CheckpointError::section("stability", e))?;
        Ok(Self {
            config,
            epoch,
            global_step,
            student,
            teacher,
            kts,
            predictor,
            optimizer,
            queue,
            bank,
            order_rng,
            aug_rng,
            records,
            stability,
        })
    }
}

/// Generates or loads the configured dataset and trains to completion.
pub fn run_training(cfg: TrainConfig) -> Result<(Mlp, Trainer), TrainError> {
    let data = load_dataset(&cfg.data)?;
    let mut trainer = Trainer::new(cfg, data)?;
    trainer.run()?;
    Ok((trainer.student().clone(), trainer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AugmentSpec, MixtureSpec};

    fn tiny(h: usize) -> TrainConfig {
        TrainConfig {
            h,
            negatives: 32,
            batch_size: 16,
            epochs: 4,
            warmup_epochs: 1,
            embed_dim: 8,
            encoder_hidden: vec![16],
            kt_hidden: 8,
            data: DataSource::Synthetic(MixtureSpec {
                classes: 3,
                per_class: 30,
                dim: 6,
                spread: 4.0,
                seed: 1,
            }),
            ..TrainConfig::default()
        }
    }

    fn trainer(cfg: TrainConfig) -> Trainer {
        let data = load_dataset(&cfg.data).unwrap();
        Trainer::new(cfg, data).unwrap()
    }

    #[test]
    fn schedule_endpoints() {
        let base = 0.03;
        assert_eq!(lr_schedule(0, 2560, 128, base), base / 10.0);
        assert_eq!(lr_schedule(128, 2560, 128, base), base);
        let last = lr_schedule(2559, 2560, 128, base);
        let closed = base * 0.5 * (1.0 + (std::f64::consts::PI * 2431.0 / 2432.0).cos());
        assert_eq!(last, closed);
        assert!(last < 1e-6 * base);
        let mid = lr_schedule(64, 2560, 128, base);
        assert!((mid - (0.003 + 0.027 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn sgd_matches_hand_arithmetic() {
        let mut p = Mlp::zeros(&[1, 1]);
        p.param_slices_mut().next().unwrap()[0] = 1.0;
        let mut sgd = Sgd::new(0.9, 0.1, &[2]);
        sgd.step(0, &mut p, &[0.5, 0.0], 0.1);
        // g = 0.5 + 0.1·1 = 0.6, buf = 0.6, p = 1 − 0.06
        assert!((p.flatten()[0] - 0.94).abs() < 1e-15);
        sgd.step(0, &mut p, &[0.5, 0.0], 0.1);
        // g = 0.5 + 0.094, buf = 0.54 + 0.594
        assert!((p.flatten()[0] - (0.94 - 0.1134)).abs() < 1e-15);
    }

    #[test]
    fn zero_epochs_leave_params_unchanged() {
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny(2)
        };
        let mut t = trainer(cfg.clone());
        let init = t.student().clone();
        t.run().unwrap();
        assert_eq!(t.student(), &init);
        assert!(t.records().is_empty());
        assert_eq!(t.metrics_csv().lines().count(), 1);
    }

    #[test]
    fn zero_lr_only_moves_the_teacher() {
        let cfg = TrainConfig {
            lr: 0.0,
            alpha: 0.5,
            ..tiny(1)
        };
        let mut t = trainer(cfg);
        let student = t.student().clone();
        let teacher = t.teacher().teacher().clone();
        t.run_until(3).unwrap();
        assert_eq!(t.student(), &student);
        // teacher starts as a copy of the student, so EMA keeps it there
        assert_eq!(t.teacher().teacher(), &teacher);
        assert_eq!(t.teacher().step(), 3 * t.steps_per_epoch() as u64);
    }

    #[test]
    fn one_row_per_epoch_and_warmup_blanks() {
        let mut t = trainer(tiny(2));
        t.run().unwrap();
        let csv = t.metrics_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(
            lines[0],
            "epoch,loss_total,loss_current,loss_temporal_0,loss_temporal_1,knn_top1,mean_stability,lr"
        );
        let cols: Vec<&str> = lines[1].split(',').collect();
        assert_eq!((cols[3], cols[4], cols[6]), ("", "", ""));
        let cols: Vec<&str> = lines[3].split(',').collect();
        assert!(!cols[3].is_empty() && !cols[4].is_empty());
        for r in t.records() {
            assert!((0.0..=1.0).contains(&r.knn_top1));
        }
        assert_eq!(t.stability_history().len(), 3);
    }

    #[test]
    fn runs_are_deterministic() {
        let run = || {
            let mut t = trainer(tiny(2));
            let mut steps = Vec::new();
            while !t.is_finished() {
                steps.extend(t.run_epoch().unwrap().steps);
            }
            (steps, t.metrics_csv(), t.student().clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn warmup_matches_baseline() {
        let mut a = trainer(tiny(0));
        let mut b = trainer(tiny(2));
        for _ in 0..2 {
            let sa = a.run_epoch().unwrap().steps;
            let sb = b.run_epoch().unwrap().steps;
            assert_eq!(sa, sb);
        }
        assert_eq!(a.student(), b.student());
        let sa = a.run_epoch().unwrap().steps;
        let sb = b.run_epoch().unwrap().steps;
        assert!(sb.iter().all(|s| s.temporal.len() == 2));
        assert!(sa.iter().all(|s| s.temporal.is_empty()));
        assert_eq!(sa[0].current, sb[0].current);
    }

    #[test]
    fn l2_variant_trains() {
        let cfg = TrainConfig {
            loss: LossVariant::L2,
            ..tiny(2)
        };
        let mut t = trainer(cfg);
        assert!(t.predictor().is_some());
        t.run().unwrap();
        assert!(t.records().iter().all(|r| r.loss.total.is_finite()));
        assert_eq!(t.queue().len(), 0);
    }

    #[test]
    fn huge_lr_diverges() {
        let cfg = TrainConfig {
            lr: 1e200,
            warmup_epochs: 0,
            ..tiny(0)
        };
        let mut t = trainer(cfg);
        assert!(matches!(t.run(), Err(TrainError::Divergence { .. })));
    }

    #[test]
    fn too_many_bank_negatives_is_a_config_error() {
        let cfg = TrainConfig {
            bank_negatives: Some(80),
            ..tiny(2)
        };
        let data = load_dataset(&cfg.data).unwrap();
        let e = Trainer::new(cfg, data).err().unwrap();
        assert!(e.to_string().contains("bank_negatives"), "{e}");
    }

    #[test]
    fn checkpoint_resume_reproduces_run() {
        let mut full = trainer(tiny(2));
        full.run().unwrap();
        let mut part = trainer(tiny(2));
        part.run_until(2).unwrap();
        let bytes = part.checkpoint().to_bytes();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ck.to_bytes(), bytes);
        let data = load_dataset(&tiny(2).data).unwrap();
        let mut resumed = Trainer::from_checkpoint(&ck, data).unwrap();
        assert_eq!(resumed.checkpoint().to_bytes(), bytes);
        resumed.run().unwrap();
        assert_eq!(resumed.metrics_csv(), full.metrics_csv());
        assert_eq!(resumed.student(), full.student());
        assert_eq!(resumed.checkpoint().to_bytes(), full.checkpoint().to_bytes());
    }

    #[test]
    fn checkpoint_rejects_other_dataset() {
        let mut t = trainer(tiny(1));
        t.run_until(1).unwrap();
        let ck = t.checkpoint();
        let other = make_gaussian_mixture(&MixtureSpec {
            classes: 3,
            per_class: 31,
            dim: 6,
            spread: 4.0,
            seed: 1,
        })
        .unwrap();
        assert!(Trainer::from_checkpoint(&ck, other).is_err());
    }

    #[test]
    fn frozen_teacher_identity_views_are_perfectly_stable() {
        let cfg = TrainConfig {
            alpha: 1.0,
            augment: AugmentSpec::IDENTITY,
            ..tiny(2)
        };
        let mut t = trainer(cfg);
        t.run().unwrap();
        for (_, values) in t.stability_history() {
            assert!(values.iter().all(|&v| v == 1.0));
        }
        assert!(t.records()[1..].iter().all(|r| r.mean_stability == Some(1.0)));
    }
}
