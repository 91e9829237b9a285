//! Temporal objectives and the negative queue.
//!
//! The InfoNCE form sums one contrastive term against the current EMA target
//! and one per temporal teacher; the L2 form sums squared distances to the
//! same targets. The batched functions record on a [`Tape`]; the per-sample
//! functions evaluate the same code on a single row.

use std::collections::VecDeque;

use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::checkpoint::{put_f64s, put_u64, CheckpointError, Reader};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Loss value split into the current-teacher term and the temporal terms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub current: f64,
    /// One entry per temporal teacher, oldest first; empty while the history
    /// bank is warming up.
    pub temporal: Vec<f64>,
}

impl LossBreakdown {
    /// Builds a breakdown whose total is the left-to-right sum of its terms.
    pub fn from_terms(current: f64, temporal: Vec<f64>) -> Self {
        let total = temporal.iter().fold(current, |acc, t| acc + t);
        Self {
            total,
            current,
            temporal,
        }
    }
}

/// Mean over rows of `−log softmax(r0·pos/τ, r0·negs/τ)[0]`.
///
/// `r0` and `pos` are `n×d`; `negs` is a shared `K×d` set. With `K = 0` every
/// row contributes exactly zero.
pub fn info_nce(tape: &mut Tape, r0: Var, pos: Var, negs: Var, tau: f64) -> Result<Var, LossError> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(LossError::Temperature(tau));
    }
    let (n, _) = tape.value(r0).dims2()?;
    let pos_sim = tape.row_dot(r0, pos)?;
    let logits = if tape.value(negs).dims2()?.0 == 0 {
        pos_sim
    } else {
        let neg_sim = tape.matmul_nt(r0, negs)?;
        tape.concat_cols(&[pos_sim, neg_sim])?
    };
    let logits = tape.scale(logits, 1.0 / tau);
    let ce = tape.cross_entropy_rows(logits, &vec![0; n])?;
    Ok(tape.mean(ce)?)
}

/// Mean over rows of `‖pred − target‖²`.
pub fn l2_distance(tape: &mut Tape, pred: Var, target: Var) -> Result<Var, LossError> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.sum_squares_rows(diff)?;
    Ok(tape.mean(sq)?)
}

fn row(tape: &mut Tape, v: &[f64]) -> Var {
    tape.constant(Tensor::matrix(1, v.len(), v.to_vec()).expect("sized"))
}

fn check_dim(expected: usize, got: usize) -> Result<(), LossError> {
    if expected != got {
        return Err(TensorError::ShapeMismatch {
            left: vec![expected],
            right: vec![got],
        }
        .into());
    }
    Ok(())
}

/// One InfoNCE term for a single sample, `negs` being `K×d`.
pub fn nce_term(r0: &[f64], pos: &[f64], negs: &Tensor, tau: f64) -> Result<f64, LossError> {
    check_dim(r0.len(), pos.len())?;
    let mut tape = Tape::new();
    let a = row(&mut tape, r0);
    let p = row(&mut tape, pos);
    let n = tape.constant(negs.clone());
    let l = info_nce(&mut tape, a, p, n, tau)?;
    Ok(tape.value(l).item()?)
}

/// Positive and negatives of one temporal term.
#[derive(Clone, Debug)]
pub struct TemporalTarget {
    pub positive: Vec<f64>,
    pub negatives: Tensor,
}

/// Current term plus one term per temporal target, for a single sample.
pub fn temporal_nce(
    r0: &[f64],
    current: &TemporalTarget,
    temporal: &[TemporalTarget],
    tau: f64,
) -> Result<LossBreakdown, LossError> {
    let cur = nce_term(r0, &current.positive, &current.negatives, tau)?;
    let terms = temporal
        .iter()
        .map(|t| nce_term(r0, &t.positive, &t.negatives, tau))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LossBreakdown::from_terms(cur, terms))
}

/// `Σ_j ‖pred − target_j‖²` for a single sample; `targets[0]` is the current
/// EMA target, the rest are temporal targets.
pub fn temporal_l2(pred: &[f64], targets: &[&[f64]]) -> Result<LossBreakdown, LossError> {
    let Some((first, rest)) = targets.split_first() else {
        return Err(TensorError::Empty.into());
    };
    let term = |t: &[f64]| -> Result<f64, LossError> {
        check_dim(pred.len(), t.len())?;
        let mut tape = Tape::new();
        let a = row(&mut tape, pred);
        let b = row(&mut tape, t);
        let l = l2_distance(&mut tape, a, b)?;
        Ok(tape.value(l).item()?)
    };
    let cur = term(first)?;
    let terms = rest.iter().map(|t| term(t)).collect::<Result<Vec<_>, _>>()?;
    Ok(LossBreakdown::from_terms(cur, terms))
}

/// FIFO of detached teacher embeddings serving as negatives for the
/// current-teacher term.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    rows: VecDeque<Vec<f64>>,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            rows: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.rows.len() == self.capacity
    }

    /// Enqueues every row of `batch` (`n×d`), evicting the oldest rows.
    pub fn push(&mut self, batch: &Tensor) -> Result<(), TensorError> {
        let (n, d) = batch.dims2()?;
        if d != self.dim {
            return Err(TensorError::ShapeMismatch {
                left: vec![self.capacity, self.dim],
                right: vec![n, d],
            });
        }
        if self.capacity == 0 {
            return Ok(());
        }
        for i in 0..n {
            if self.rows.len() == self.capacity {
                self.rows.pop_front();
            }
            self.rows.push_back(batch.row(i).to_vec());
        }
        Ok(())
    }

    /// Current contents, oldest first, as a `len×d` matrix.
    pub fn view(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.rows.len() * self.dim);
        self.rows.iter().for_each(|r| data.extend_from_slice(r));
        Tensor::matrix(self.rows.len(), self.dim, data).expect("sized")
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        put_u64(out, self.capacity as u64);
        put_u64(out, self.dim as u64);
        put_u64(out, self.rows.len() as u64);
        self.rows.iter().for_each(|r| put_f64s(out, r));
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self, CheckpointError> {
        let (capacity, dim, len) = (r.usize()?, r.usize()?, r.usize()?);
        if len > capacity {
            return Err(CheckpointError::Format("queue longer than its capacity".into()));
        }
        let mut rows = VecDeque::new();
        for _ in 0..len {
            rows.push_back(r.f64s(dim)?);
        }
        Ok(Self {
            capacity,
            dim,
            rows,
        })
    }
}
