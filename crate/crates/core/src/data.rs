//! Synthetic datasets, view augmentation and the TKDS raw tensor format.
//!
//! TKDS layout, all little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 4     | magic `TKDS` |
//! | 4     | version `u32` (= 1) |
//! | 4     | `n_samples` `u32` |
//! | 4     | `in_dim` `u32` |
//! | 4·n·d | features, `f32`, row-major |
//! | 4·n   | labels, `u32` |

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::Tensor;

pub const TKDS_MAGIC: &[u8; 4] = b"TKDS";
pub const TKDS_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },
    #[error("extents {n_samples}×{in_dim} overflow the address space")]
    ExtentOverflow { n_samples: u32, in_dim: u32 },
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Labelled samples with stable indices. Labels are only read by evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f32>,
    labels: Vec<u32>,
    in_dim: usize,
    class_count: usize,
    provenance: String,
}

impl Dataset {
    pub fn new(
        features: Vec<f32>,
        labels: Vec<u32>,
        in_dim: usize,
        provenance: impl Into<String>,
    ) -> Result<Self, DataError> {
        if in_dim == 0 {
            return Err(DataError::Spec("in_dim must be positive".into()));
        }
        if features.len() != labels.len() * in_dim {
            return Err(DataError::Spec(format!(
                "{} feature values do not fill {} rows of width {in_dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(bad) = features.iter().find(|v| !v.is_finite()) {
            return Err(DataError::Format(format!("non-finite feature value {bad}")));
        }
        let class_count = labels.iter().max().map_or(0, |&m| m as usize + 1);
        Ok(Self {
            features,
            labels,
            in_dim,
            class_count,
            provenance: provenance.into(),
        })
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.in_dim..(i + 1) * self.in_dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    /// Un-augmented rows as an `indices.len() × in_dim` matrix.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.in_dim);
        for &i in indices {
            data.extend(self.row(i).iter().map(|&v| f64::from(v)));
        }
        Tensor::matrix(indices.len(), self.in_dim, data).expect("sized")
    }

    /// Every sample, in index order.
    pub fn all(&self) -> Tensor {
        let idx: Vec<usize> = (0..self.n_samples()).collect();
        self.gather(&idx)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.n_samples();
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * n * (self.in_dim + 1));
        out.extend_from_slice(TKDS_MAGIC);
        out.extend_from_slice(&TKDS_VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&(self.in_dim as u32).to_le_bytes());
        for v in &self.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    /// Parses a TKDS buffer, validating the header before touching the payload.
    pub fn from_bytes(bytes: &[u8], provenance: impl Into<String>) -> Result<Self, DataError> {
        if bytes.len() < HEADER_LEN {
            return Err(DataError::TruncatedPayload {
                expected: HEADER_LEN,
                actual: bytes.len(),
            });
        }
        if &bytes[0..4] != TKDS_MAGIC {
            return Err(DataError::Format(format!(
                "bad magic {:?}, expected \"TKDS\"",
                &bytes[0..4]
            )));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let version = word(4);
        if version != TKDS_VERSION {
            return Err(DataError::Format(format!("unsupported version {version}")));
        }
        let (n_samples, in_dim) = (word(8), word(12));
        let overflow = DataError::ExtentOverflow { n_samples, in_dim };
        let n = n_samples as usize;
        let d = in_dim as usize;
        let expected = n
            .checked_mul(d)
            .and_then(|nd| nd.checked_add(n))
            .and_then(|cells| cells.checked_mul(4))
            .and_then(|b| b.checked_add(HEADER_LEN))
            .ok_or(overflow)?;
        if bytes.len() < expected {
            return Err(DataError::TruncatedPayload {
                expected,
                actual: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(DataError::Format(format!(
                "{} trailing bytes after payload",
                bytes.len() - expected
            )));
        }
        if d == 0 {
            return Err(DataError::Format("in_dim is zero".into()));
        }
        let feat_end = HEADER_LEN + 4 * n * d;
        let features = bytes[HEADER_LEN..feat_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let labels = bytes[feat_end..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(features, labels, d, provenance)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        crate::io::write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path.display().to_string())
    }
}

/// Parameters of the synthetic Gaussian mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub seed: u64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            classes: 8,
            per_class: 512,
            dim: 32,
            spread: 4.0,
            seed: 0,
        }
    }
}

/// Class centers uniform on the sphere of radius `spread`, samples at unit
/// variance around them, stored class by class.
pub fn make_gaussian_mixture(spec: &MixtureSpec) -> Result<Dataset, DataError> {
    if spec.classes < 2 {
        return Err(DataError::Spec("a mixture needs at least 2 classes".into()));
    }
    if spec.dim == 0 || spec.per_class == 0 {
        return Err(DataError::Spec("dim and per_class must be positive".into()));
    }
    if !(spec.spread >= 0.0 && spec.spread.is_finite()) {
        return Err(DataError::Spec(format!("invalid spread {}", spec.spread)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let v: Vec<f64> = (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / norm * spec.spread).collect()
        })
        .collect();
    let mut features = Vec::with_capacity(spec.classes * spec.per_class * spec.dim);
    let mut labels = Vec::with_capacity(spec.classes * spec.per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..spec.per_class {
            for &m in center {
                let noise: f64 = rng.sample(StandardNormal);
                features.push((m + noise) as f32);
            }
            labels.push(c as u32);
        }
    }
    let provenance = format!(
        "gmm:classes={},per_class={},dim={},spread={},seed={}",
        spec.classes, spec.per_class, spec.dim, spec.spread, spec.seed
    );
    Dataset::new(features, labels, spec.dim, provenance)
}

/// Distribution of training views: additive Gaussian noise, then a random
/// coordinate mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentSpec {
    pub sigma: f64,
    pub mask_fraction: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            mask_fraction: 0.25,
        }
    }
}

impl AugmentSpec {
    pub const IDENTITY: AugmentSpec = AugmentSpec {
        sigma: 0.0,
        mask_fraction: 0.0,
    };

    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(DataError::Spec(format!("aug sigma {} must be >= 0", self.sigma)));
        }
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return Err(DataError::Spec(format!(
                "mask fraction {} must lie in [0, 1)",
                self.mask_fraction
            )));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.sigma == 0.0 && self.mask_fraction == 0.0
    }
}

/// One random view of `x`. With `sigma = 0` and `mask_fraction = 0` the view
/// is `x` itself and no randomness is consumed.
pub fn augment<R: Rng>(x: &[f64], spec: &AugmentSpec, rng: &mut R) -> Vec<f64> {
    let mut out = x.to_vec();
    if spec.sigma > 0.0 {
        for v in out.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v += spec.sigma * n;
        }
    }
    let masked = (spec.mask_fraction * x.len() as f64).floor() as usize;
    if masked > 0 {
        for i in index::sample(rng, x.len(), masked.min(x.len())) {
            out[i] = 0.0;
        }
    }
    out
}
