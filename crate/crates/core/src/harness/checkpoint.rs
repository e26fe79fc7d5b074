//! Binary checkpoint format.
//!
//! ```text
//! "DEQR" | version u32 | l u64 | d u64 | C u64 | nonlinearity u8 | γ f64
//! | W | U | b | V | c          (each: u64 count, then count × f64)
//! | config snapshot            (u64 byte count, UTF-8)
//! | best epoch i64 (−1: none) | best robust accuracy f64
//! ```
//!
//! Everything is little-endian.

use std::path::Path;

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::deq::{DeqModel, Nonlinearity, ParamName};
use crate::error::Result;

pub const MAGIC: [u8; 4] = *b"DEQR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint: magic bytes {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("checkpoint truncated while reading {context}")]
    Truncated { context: String },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("tensor {tensor} holds {got} values, header implies {expected}")]
    DimensionMismatch {
        tensor: &'static str,
        got: u64,
        expected: u64,
    },
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DeqModel<f64>,
    /// Configuration the model was trained with, as written by the caller.
    pub config_snapshot: String,
    pub best_epoch: Option<usize>,
    pub best_robust_acc: f64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for dim in [m.input_dim(), m.hidden_dim(), m.classes()] {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        out.push(m.nonlinearity.tag());
        out.extend_from_slice(&m.gamma.to_le_bytes());
        for name in ParamName::ALL {
            let t = m.param(name);
            out.extend_from_slice(&(t.len() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.config_snapshot.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_snapshot.as_bytes());
        let epoch = self.best_epoch.map_or(-1, |e| e as i64);
        out.extend_from_slice(&epoch.to_le_bytes());
        out.extend_from_slice(&self.best_robust_acc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic { found: magic.to_vec() });
        }
        let version = u32::from_le_bytes(r.array("version")?);
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let l = r.u64("dimension header")?;
        let d = r.u64("dimension header")?;
        let c = r.u64("dimension header")?;
        let tag = r.take(1, "nonlinearity")?[0];
        let nonlinearity = Nonlinearity::from_tag(tag)
            .ok_or_else(|| CheckpointError::Invalid(format!("unknown nonlinearity tag {tag}")))?;
        let gamma = r.f64("gamma")?;
        let shapes: [(ParamName, Vec<u64>); 5] = [
            (ParamName::W, vec![d, d]),
            (ParamName::U, vec![d, l]),
            (ParamName::B, vec![d]),
            (ParamName::V, vec![c, d]),
            (ParamName::C, vec![c]),
        ];
        let mut tensors = Vec::with_capacity(5);
        for (name, shape) in shapes {
            let expected = shape
                .iter()
                .try_fold(1u64, |a, &b| a.checked_mul(b))
                .ok_or_else(|| CheckpointError::Invalid("dimension overflow".into()))?;
            let got = r.u64(name.as_str())?;
            if got != expected {
                return Err(CheckpointError::DimensionMismatch {
                    tensor: name.as_str(),
                    got,
                    expected,
                });
            }
            let raw = r.take(checked_len(got, 8)?, name.as_str())?;
            let data = raw
                .chunks_exact(8)
                .map(|ch| f64::from_le_bytes(ch.try_into().expect("8-byte chunk")))
                .collect();
            let shape: Vec<usize> = shape.iter().map(|&s| s as usize).collect();
            tensors.push(Tensor::new(shape, data).map_err(|e| CheckpointError::Invalid(e.to_string()))?);
        }
        let n = r.u64("config snapshot")?;
        let snap = r.take(checked_len(n, 1)?, "config snapshot")?;
        let config_snapshot = String::from_utf8(snap.to_vec())
            .map_err(|_| CheckpointError::Invalid("config snapshot is not UTF-8".into()))?;
        let epoch = i64::from_le_bytes(r.array("best epoch")?);
        let best_robust_acc = r.f64("best robust accuracy")?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Invalid(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("five tensors");
        let (w, u, b, v, c) = (next(), next(), next(), next(), next());
        let model = DeqModel::new(w, u, b, v, c, nonlinearity, gamma)
            .map_err(|e| CheckpointError::Invalid(e.to_string()))?;
        Ok(Self {
            model,
            config_snapshot,
            best_epoch: usize::try_from(epoch).ok(),
            best_robust_acc,
        })
    }
}

fn checked_len(count: u64, width: u64) -> Result<usize, CheckpointError> {
    count
        .checked_mul(width)
        .and_then(|v| usize::try_from(v).ok())
        .ok_or_else(|| CheckpointError::Invalid("length overflow".into()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CheckpointError::Truncated {
                context: context.to_string(),
            }
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, context: &str) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N, context)?.try_into().expect("exact length"))
    }

    fn u64(&mut self, context: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.array(context)?))
    }

    fn f64(&mut self, context: &str) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.array(context)?))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| crate::error::Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| crate::error::Error::io(path, e))?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}
