//! TKCK checkpoint container.
//!
//! ```text
//! "TKCK" | version u32 | section count u32 |
//!   { name length u32 | name (UTF-8) | payload length u64 | payload }*
//! ```
//!
//! Everything is little-endian. Section order is preserved, names are unique.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::nn::{Linear, Mlp};

pub const TKCK_MAGIC: &[u8; 4] = b"TKCK";
pub const TKCK_VERSION: u32 = 1;
const MAX_NAME_LEN: usize = 256;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("missing section `{0}`")]
    MissingSection(String),
    #[error("section `{section}`: {message}")]
    Section { section: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CheckpointError {
    pub fn section(section: &str, message: impl ToString) -> Self {
        CheckpointError::Section {
            section: section.to_string(),
            message: message.to_string(),
        }
    }
}

/// Ordered set of named binary sections.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    sections: Vec<(String, Vec<u8>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a section, replacing any earlier section with the same name.
    pub fn insert(&mut self, name: &str, payload: Vec<u8>) {
        if let Some(slot) = self.sections.iter_mut().find(|(n, _)| n == name) {
            slot.1 = payload;
        } else {
            self.sections.push((name.to_string(), payload));
        }
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p.as_slice())
    }

    pub fn require(&self, name: &str) -> Result<&[u8], CheckpointError> {
        self.get(name)
            .ok_or_else(|| CheckpointError::MissingSection(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(TKCK_MAGIC);
        out.extend_from_slice(&TKCK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, payload) in &self.sections {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != TKCK_MAGIC {
            return Err(CheckpointError::Format("bad magic, expected \"TKCK\"".into()));
        }
        let version = r.u32()?;
        if version != TKCK_VERSION {
            return Err(CheckpointError::Format(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut ck = Checkpoint::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            if name_len > MAX_NAME_LEN {
                return Err(CheckpointError::Format(format!("section name of {name_len} bytes")));
            }
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::Format("section name is not UTF-8".into()))?
                .to_string();
            let len = usize::try_from(r.u64()?)
                .map_err(|_| CheckpointError::Format("section length overflow".into()))?;
            let payload = r.take(len)?.to_vec();
            if ck.get(&name).is_some() {
                return Err(CheckpointError::Format(format!("duplicate section `{name}`")));
            }
            ck.sections.push((name, payload));
        }
        r.finish()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        crate::io::write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Bounds-checked little-endian cursor.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if n > self.remaining() {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n - self.remaining(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn usize(&mut self) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::Format("extent overflow".into()))
    }

    pub fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// `n` doubles, checking the length before allocating.
    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| CheckpointError::Format("extent overflow".into()))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    /// Errors unless every byte was consumed.
    pub fn finish(&self) -> Result<(), CheckpointError> {
        if self.remaining() != 0 {
            return Err(CheckpointError::Format(format!(
                "{} trailing bytes",
                self.remaining()
            )));
        }
        Ok(())
    }
}

pub fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Layer count, then `out`, `in`, weights and bias for each layer.
pub fn encode_mlp(mlp: &Mlp, out: &mut Vec<u8>) {
    out.extend_from_slice(&(mlp.layers().len() as u32).to_le_bytes());
    for l in mlp.layers() {
        out.extend_from_slice(&(l.out_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(l.in_dim() as u32).to_le_bytes());
        put_f64s(out, l.weight.data());
        put_f64s(out, l.bias.data());
    }
}

pub fn decode_mlp(r: &mut Reader<'_>) -> Result<Mlp, CheckpointError> {
    let n_layers = r.u32()? as usize;
    let mut layers = Vec::new();
    for _ in 0..n_layers {
        let out_dim = r.u32()? as usize;
        let in_dim = r.u32()? as usize;
        let cells = out_dim
            .checked_mul(in_dim)
            .ok_or_else(|| CheckpointError::Format("layer extent overflow".into()))?;
        let weight = r.f64s(cells)?;
        let bias = r.f64s(out_dim)?;
        layers.push(Linear {
            weight: Tensor::matrix(out_dim, in_dim, weight).expect("sized"),
            bias: Tensor::vector(bias),
        });
    }
    Mlp::from_layers(layers).map_err(|e| CheckpointError::Format(e.to_string()))
}
