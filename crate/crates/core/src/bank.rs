//! History bank: per-sample teacher features from the previous `h` epochs.
//!
//! Row `i` holds the features of sample `i`; each column holds the features
//! written by the teacher during one epoch. Besides the `h` readable columns
//! the bank owns one write column for the epoch in progress, so temporal
//! targets are never overwritten before they are read. At each epoch
//! boundary the write column becomes the newest readable one and the oldest
//! column is recycled as the next write column.

use std::collections::VecDeque;

use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Tensor, TensorError};
use crate::nn::EncoderParams;
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BankError {
    #[error("sample index {index} out of range for {n_samples} samples")]
    Index { index: usize, n_samples: usize },
    #[error("feature has dimension {got}, bank stores {expected}")]
    Dim { expected: usize, got: usize },
    #[error("history incomplete: {completed} of {required} epochs recorded")]
    WarmupIncomplete { completed: usize, required: usize },
    #[error("column {0} is not readable")]
    InvalidColumn(usize),
    #[error("requested {requested} negatives but only {available} samples are eligible")]
    TooManyNegatives { requested: usize, available: usize },
    #[error("bank needs at least one retained column")]
    NoColumns,
    #[error("malformed bank encoding: {0}")]
    Decode(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryBank {
    n_samples: usize,
    retained: usize,
    dim: usize,
    /// `n_samples × (retained + 1) × dim`, sample-major.
    storage: Vec<f64>,
    /// Physical slot written during the current epoch.
    cursor: usize,
    column_valid: Vec<bool>,
    written: Vec<bool>,
    written_count: usize,
    completed_epochs: usize,
    rng: ChaCha8Rng,
}

impl HistoryBank {
    pub fn new(n_samples: usize, retained: usize, dim: usize, rng: ChaCha8Rng) -> Result<Self, BankError> {
        if retained == 0 {
            return Err(BankError::NoColumns);
        }
        let slots = retained + 1;
        Ok(Self {
            n_samples,
            retained,
            dim,
            storage: vec![0.0; n_samples * slots * dim],
            cursor: 0,
            column_valid: vec![false; slots],
            written: vec![false; n_samples],
            written_count: 0,
            completed_epochs: 0,
            rng,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    /// Number of readable history columns, `h`.
    pub fn retained(&self) -> usize {
        self.retained
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn slots(&self) -> usize {
        self.retained + 1
    }

    /// Physical slot currently being written.
    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn completed_epochs(&self) -> usize {
        self.completed_epochs
    }

    pub fn column_valid(&self) -> &[bool] {
        &self.column_valid
    }

    /// Number of stored `f64` values; constant for the life of the bank.
    pub fn footprint(&self) -> usize {
        self.storage.len()
    }

    /// Physical slot of history column `j`, `0` being the oldest.
    fn slot_of(&self, j: usize) -> usize {
        (self.cursor + 1 + j) % self.slots()
    }

    fn cell(&self, sample: usize, slot: usize) -> &[f64] {
        let at = (sample * self.slots() + slot) * self.dim;
        &self.storage[at..at + self.dim]
    }

    fn check_index(&self, index: usize) -> Result<(), BankError> {
        if index >= self.n_samples {
            return Err(BankError::Index {
                index,
                n_samples: self.n_samples,
            });
        }
        Ok(())
    }

    fn check_column(&self, j: usize) -> Result<usize, BankError> {
        if j >= self.retained {
            return Err(BankError::InvalidColumn(j));
        }
        let slot = self.slot_of(j);
        if !self.column_valid[slot] {
            return Err(BankError::InvalidColumn(j));
        }
        Ok(slot)
    }

    /// True once every history column holds a full epoch.
    pub fn has_full_history(&self) -> bool {
        (0..self.retained).all(|j| self.column_valid[self.slot_of(j)])
    }

    /// Stores a detached teacher feature in the current epoch's column.
    pub fn write(&mut self, sample: usize, feature: &[f64]) -> Result<(), BankError> {
        self.check_index(sample)?;
        if feature.len() != self.dim {
            return Err(BankError::Dim {
                expected: self.dim,
                got: feature.len(),
            });
        }
        let at = (sample * self.slots() + self.cursor) * self.dim;
        self.storage[at..at + self.dim].copy_from_slice(feature);
        if !self.written[sample] {
            self.written[sample] = true;
            self.written_count += 1;
            if self.written_count == self.n_samples {
                self.column_valid[self.cursor] = true;
            }
        }
        Ok(())
    }

    /// Stored features of `sample`, oldest column first.
    pub fn fetch_row(&self, sample: usize) -> Result<Vec<&[f64]>, BankError> {
        self.check_index(sample)?;
        self.require_history()?;
        Ok((0..self.retained)
            .map(|j| self.cell(sample, self.slot_of(j)))
            .collect())
    }

    fn require_history(&self) -> Result<(), BankError> {
        if !self.has_full_history() {
            return Err(BankError::WarmupIncomplete {
                completed: self.completed_epochs,
                required: self.retained,
            });
        }
        Ok(())
    }

    /// Column `j` restricted to `samples`, as a `samples.len() × dim` matrix.
    pub fn gather(&self, j: usize, samples: &[usize]) -> Result<Tensor, BankError> {
        self.require_history()?;
        let slot = self.check_column(j)?;
        let mut data = Vec::with_capacity(samples.len() * self.dim);
        for &s in samples {
            self.check_index(s)?;
            data.extend_from_slice(self.cell(s, slot));
        }
        Tensor::matrix(samples.len(), self.dim, data).map_err(tensor_bug)
    }

    /// A whole readable column in sample order.
    pub fn column(&self, j: usize) -> Result<Tensor, BankError> {
        let slot = self.check_column(j)?;
        Ok(self.slot_tensor(slot))
    }

    /// The column being written this epoch, once every sample has been written.
    pub fn current_column(&self) -> Option<Tensor> {
        self.column_valid[self.cursor].then(|| self.slot_tensor(self.cursor))
    }

    fn slot_tensor(&self, slot: usize) -> Tensor {
        let mut data = Vec::with_capacity(self.n_samples * self.dim);
        for s in 0..self.n_samples {
            data.extend_from_slice(self.cell(s, slot));
        }
        Tensor::matrix(self.n_samples, self.dim, data).expect("sized")
    }

    /// `k` distinct samples other than `exclude`, read from column `j`.
    pub fn sample_negatives(
        &mut self,
        j: usize,
        exclude: usize,
        k: usize,
    ) -> Result<(Vec<usize>, Tensor), BankError> {
        self.sample_negatives_excluding(j, &[exclude], k)
    }

    /// `k` distinct samples outside `exclude`, read from column `j`.
    pub fn sample_negatives_excluding(
        &mut self,
        j: usize,
        exclude: &[usize],
        k: usize,
    ) -> Result<(Vec<usize>, Tensor), BankError> {
        let slot = self.check_column(j)?;
        let mut blocked = vec![false; self.n_samples];
        for &e in exclude {
            if e < self.n_samples {
                blocked[e] = true;
            }
        }
        let candidates: Vec<usize> = (0..self.n_samples).filter(|&i| !blocked[i]).collect();
        if k > candidates.len() {
            return Err(BankError::TooManyNegatives {
                requested: k,
                available: candidates.len(),
            });
        }
        let picked: Vec<usize> = index::sample(&mut self.rng, candidates.len(), k)
            .into_iter()
            .map(|p| candidates[p])
            .collect();
        let mut data = Vec::with_capacity(k * self.dim);
        for &s in &picked {
            data.extend_from_slice(self.cell(s, slot));
        }
        let t = Tensor::matrix(k, self.dim, data).map_err(tensor_bug)?;
        Ok((picked, t))
    }

    /// Closes the current epoch: its column becomes the newest readable one
    /// and the oldest column is invalidated and reused for writing.
    pub fn advance_epoch(&mut self) {
        self.cursor = (self.cursor + 1) % self.slots();
        self.column_valid[self.cursor] = false;
        self.written.iter_mut().for_each(|w| *w = false);
        self.written_count = 0;
        self.completed_epochs += 1;
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        for v in [
            self.n_samples,
            self.retained,
            self.dim,
            self.cursor,
            self.written_count,
            self.completed_epochs,
        ] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend(self.column_valid.iter().map(|&b| b as u8));
        out.extend(self.written.iter().map(|&b| b as u8));
        rng::encode(&self.rng, out);
        for v in &self.storage {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, BankError> {
        let err = |m: &str| BankError::Decode(m.to_string());
        let mut r = crate::checkpoint::Reader::new(bytes);
        let mut word = || -> Result<usize, BankError> {
            let v = r.u64().map_err(|e| err(&e.to_string()))?;
            usize::try_from(v).map_err(|_| err("extent overflow"))
        };
        let (n_samples, retained, dim) = (word()?, word()?, word()?);
        let (cursor, written_count, completed_epochs) = (word()?, word()?, word()?);
        if retained == 0 {
            return Err(BankError::NoColumns);
        }
        let slots = retained.checked_add(1).ok_or_else(|| err("extent overflow"))?;
        let cells = n_samples
            .checked_mul(slots)
            .and_then(|c| c.checked_mul(dim))
            .ok_or_else(|| err("extent overflow"))?;
        let rest = &bytes[48..];
        let need = slots
            .checked_add(n_samples)
            .and_then(|f| f.checked_add(rng::RNG_STATE_LEN))
            .and_then(|f| cells.checked_mul(8).and_then(|c| c.checked_add(f)))
            .ok_or_else(|| err("extent overflow"))?;
        if rest.len() != need {
            return Err(err(&format!("expected {need} payload bytes, found {}", rest.len())));
        }
        if cursor >= slots {
            return Err(err("cursor out of range"));
        }
        let flags = |b: &[u8]| -> Result<Vec<bool>, BankError> {
            b.iter()
                .map(|&v| match v {
                    0 => Ok(false),
                    1 => Ok(true),
                    _ => Err(err("flag byte is not 0 or 1")),
                })
                .collect()
        };
        let column_valid = flags(&rest[..slots])?;
        let written = flags(&rest[slots..slots + n_samples])?;
        if written.iter().filter(|&&w| w).count() != written_count {
            return Err(err("written count disagrees with flags"));
        }
        let rng_at = slots + n_samples;
        let rng = rng::decode(&rest[rng_at..rng_at + rng::RNG_STATE_LEN])
            .ok_or_else(|| err("rng state"))?;
        let storage = rest[rng_at + rng::RNG_STATE_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            n_samples,
            retained,
            dim,
            storage,
            cursor,
            column_valid,
            written,
            written_count,
            completed_epochs,
            rng,
        })
    }
}

fn tensor_bug(e: TensorError) -> BankError {
    BankError::Decode(e.to_string())
}

/// Explicit temporal teachers: full parameter copies taken at epoch
/// boundaries. Only used to check the history bank against.
#[derive(Clone, Debug, Default)]
pub struct TeacherSnapshots {
    retained: usize,
    snapshots: VecDeque<(usize, EncoderParams)>,
}

impl TeacherSnapshots {
    pub fn new(retained: usize) -> Self {
        Self {
            retained,
            snapshots: VecDeque::with_capacity(retained + 1),
        }
    }

    /// Records the teacher as it stands at the start of `epoch`.
    pub fn record(&mut self, epoch: usize, teacher: &EncoderParams) {
        self.snapshots.push_back((epoch, teacher.clone()));
        while self.snapshots.len() > self.retained + 1 {
            self.snapshots.pop_front();
        }
    }

    pub fn epochs(&self) -> impl Iterator<Item = usize> + '_ {
        self.snapshots.iter().map(|(e, _)| *e)
    }

    pub fn snapshot(&self, epoch: usize) -> Option<&EncoderParams> {
        self.snapshots
            .iter()
            .find(|(e, _)| *e == epoch)
            .map(|(_, p)| p)
    }

    /// Targets the snapshot of `epoch` produces for the views `x`.
    pub fn targets(&self, epoch: usize, x: &Tensor) -> Option<Result<Tensor, TensorError>> {
        self.snapshot(epoch).map(|p| p.embed(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(n: usize, h: usize, d: usize) -> HistoryBank {
        HistoryBank::new(n, h, d, rng::stream(0, 0)).unwrap()
    }

    fn fill_epoch(b: &mut HistoryBank, value: f64) {
        for i in 0..b.n_samples() {
            let f = vec![value + i as f64; b.dim()];
            b.write(i, &f).unwrap();
        }
    }

    #[test]
    fn write_then_read_round_trips() {
        let mut b = bank(3, 1, 2);
        fill_epoch(&mut b, 0.0);
        b.write(1, &[0.25, -0.75]).unwrap();
        b.write(1, &[0.5, 0.125]).unwrap();
        b.advance_epoch();
        assert_eq!(b.fetch_row(1).unwrap(), vec![&[0.5, 0.125][..]]);
    }

    #[test]
    fn full_epoch_validates_column() {
        let mut b = bank(3, 2, 1);
        b.write(0, &[1.0]).unwrap();
        b.write(1, &[1.0]).unwrap();
        assert!(!b.column_valid()[b.cursor()]);
        b.write(2, &[1.0]).unwrap();
        assert!(b.column_valid()[b.cursor()]);
        assert!(b.current_column().is_some());
    }

    #[test]
    fn write_errors() {
        let mut b = bank(3, 1, 2);
        assert!(matches!(b.write(3, &[0.0, 0.0]), Err(BankError::Index { .. })));
        assert!(matches!(b.write(0, &[0.0]), Err(BankError::Dim { .. })));
        assert_eq!(HistoryBank::new(3, 0, 2, rng::stream(0, 0)), Err(BankError::NoColumns));
    }

    #[test]
    fn single_column_returns_last_epoch() {
        let mut b = bank(4, 1, 3);
        fill_epoch(&mut b, 10.0);
        b.advance_epoch();
        fill_epoch(&mut b, 20.0);
        b.advance_epoch();
        assert_eq!(b.fetch_row(2).unwrap(), vec![&[22.0; 3][..]]);
    }

    #[test]
    fn warmup_is_reported_until_h_epochs() {
        let mut b = bank(2, 2, 1);
        assert!(matches!(b.fetch_row(0), Err(BankError::WarmupIncomplete { completed: 0, .. })));
        fill_epoch(&mut b, 0.0);
        b.advance_epoch();
        assert!(matches!(b.fetch_row(0), Err(BankError::WarmupIncomplete { completed: 1, .. })));
        fill_epoch(&mut b, 100.0);
        b.advance_epoch();
        let row = b.fetch_row(1).unwrap();
        assert_eq!(row, vec![&[1.0][..], &[101.0][..]]);
    }

    #[test]
    fn rows_are_oldest_first_while_writing() {
        let mut b = bank(2, 2, 1);
        for e in 0..5 {
            if e >= 2 {
                // reads before this epoch's writes see epochs e-2, e-1
                let expect = [((e - 2) * 100) as f64, ((e - 1) * 100) as f64];
                assert_eq!(b.fetch_row(0).unwrap(), vec![&expect[..1], &expect[1..]]);
            }
            fill_epoch(&mut b, (e * 100) as f64);
            if e >= 2 {
                assert!(b.fetch_row(0).is_ok());
            }
            b.advance_epoch();
        }
    }

    #[test]
    fn cursor_cycles_and_invalidates_oldest() {
        let mut b = bank(2, 2, 1);
        let mut seen = vec![b.cursor()];
        for _ in 0..6 {
            fill_epoch(&mut b, 0.0);
            b.advance_epoch();
            assert!(!b.column_valid()[b.cursor()]);
            seen.push(b.cursor());
        }
        assert_eq!(seen, vec![0, 1, 2, 0, 1, 2, 0]);
    }

    #[test]
    fn footprint_is_constant() {
        let mut b = bank(5, 2, 3);
        let before = b.footprint();
        assert_eq!(before, 5 * 3 * 3);
        for _ in 0..6 {
            fill_epoch(&mut b, 1.0);
            b.advance_epoch();
        }
        assert_eq!(b.footprint(), before);
    }

    #[test]
    fn exhaustive_negatives() {
        let mut b = bank(6, 1, 1);
        fill_epoch(&mut b, 0.0);
        b.advance_epoch();
        let (mut idx, t) = b.sample_negatives(0, 2, 5).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 3, 4, 5]);
        assert_eq!(t.shape(), &[5, 1]);
        assert!(matches!(
            b.sample_negatives(0, 2, 6),
            Err(BankError::TooManyNegatives { .. })
        ));
    }

    #[test]
    fn excluded_sample_never_drawn() {
        let mut b = bank(50, 1, 1);
        fill_epoch(&mut b, 0.0);
        b.advance_epoch();
        for _ in 0..1000 {
            let (idx, _) = b.sample_negatives(0, 7, 10).unwrap();
            assert!(!idx.contains(&7));
            let mut sorted = idx.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 10);
        }
    }

    #[test]
    fn negatives_are_seeded() {
        let draw = || {
            let mut b = bank(30, 1, 1);
            fill_epoch(&mut b, 0.0);
            b.advance_epoch();
            (0..5).map(|_| b.sample_negatives(0, 0, 4).unwrap().0).collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn invalid_column_rejected() {
        let mut b = bank(4, 2, 1);
        assert!(matches!(b.sample_negatives(0, 0, 1), Err(BankError::InvalidColumn(0))));
        assert!(matches!(b.sample_negatives(5, 0, 1), Err(BankError::InvalidColumn(5))));
    }

    #[test]
    fn encoding_round_trips() {
        let mut b = bank(4, 2, 3);
        fill_epoch(&mut b, 1.5);
        b.advance_epoch();
        b.write(2, &[0.1, 0.2, 0.3]).unwrap();
        let mut bytes = Vec::new();
        b.encode(&mut bytes);
        let back = HistoryBank::decode(&bytes).unwrap();
        assert_eq!(back, b);
        let mut again = Vec::new();
        back.encode(&mut again);
        assert_eq!(again, bytes);
        assert!(HistoryBank::decode(&bytes[..bytes.len() - 1]).is_err());
    }
}
