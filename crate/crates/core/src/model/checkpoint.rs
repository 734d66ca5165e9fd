//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "KARMACKP"
//! version    u32
//! meta_len   u32, then meta_len bytes of UTF-8 JSON
//! count      u32
//! count x {
//!   name_len u32, name bytes
//!   ndim     u32, ndim x u32 dims
//!   data     prod(dims) x f32
//! }
//! ```
//!
//! Decoding validates the whole file before returning anything.

use std::path::Path;

use thiserror::Error;

use super::{KarmaModel, ModelConfig};
use crate::diffcore::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"KARMACKP";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint schema version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("{0} trailing bytes after checkpoint body")]
    Trailing(usize),
    #[error("invalid checkpoint metadata: {0}")]
    Meta(String),
    #[error("tensor {name}: shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {0} missing")]
    Missing(String),
    #[error("unexpected tensor {0}")]
    Unexpected(String),
    #[error("duplicate tensor {0}")]
    Duplicate(String),
    #[error("tensor {0} has non-finite values")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Decoded checkpoint: JSON metadata plus named f32 tensors in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointFile {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() < n {
            return Err(CheckpointError::Truncated(what));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

impl CheckpointFile {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("JSON value serializes");
        let body: usize = self
            .tensors
            .iter()
            .map(|(n, t)| 12 + n.len() + 4 * t.shape().len() + 4 * t.len())
            .sum();
        let mut out = Vec::with_capacity(20 + meta.len() + body);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes };
        if r.take(8, "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != SCHEMA_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: SCHEMA_VERSION,
            });
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta: serde_json::Value =
            serde_json::from_slice(r.take(meta_len, "metadata")?).map_err(|e| CheckpointError::Meta(e.to_string()))?;
        if !meta.is_object() {
            return Err(CheckpointError::Meta("metadata must be a JSON object".into()));
        }
        let count = r.u32("tensor count")? as usize;
        let mut tensors: Vec<(String, Tensor<f32>)> = Vec::with_capacity(count.min(4096));
        let mut seen = std::collections::HashSet::new();
        for _ in 0..count {
            let n = r.u32("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(n, "tensor name")?)
                .map_err(|_| CheckpointError::Meta("tensor name is not UTF-8".into()))?
                .to_owned();
            if !seen.insert(name.clone()) {
                return Err(CheckpointError::Duplicate(name));
            }
            let ndim = r.u32("tensor rank")? as usize;
            if ndim > 8 {
                return Err(CheckpointError::Meta(format!("tensor {name} has rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("tensor dims")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.buf.len()))
                .ok_or(CheckpointError::Truncated("tensor data"))?;
            let data: Vec<f32> = r
                .take(numel * 4, "tensor data")?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if data.iter().any(|x| !x.is_finite()) {
                return Err(CheckpointError::NonFinite(name));
            }
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Meta(e.to_string()))?;
            tensors.push((name, t));
        }
        if !r.buf.is_empty() {
            return Err(CheckpointError::Trailing(r.buf.len()));
        }
        Ok(Self { meta, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// The `model` object of the metadata, if present.
    pub fn model_config(&self) -> Result<ModelConfig, CheckpointError> {
        let v = self
            .meta
            .get("model")
            .ok_or_else(|| CheckpointError::Meta("missing model config".into()))?;
        serde_json::from_value(v.clone()).map_err(|e| CheckpointError::Meta(e.to_string()))
    }
}

impl<F: Real> KarmaModel<F> {
    /// All parameters as `(prefix + name, f32 tensor)` in registration order.
    pub fn export_params(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        self.params
            .ids()
            .map(|id| (format!("{prefix}{}", self.params.name(id)), self.params.get(id).cast()))
            .collect()
    }

    /// Replaces every parameter from `tensors` (names `prefix + name`).
    /// Validates all names and shapes first; on error nothing is modified.
    pub fn import_params(&mut self, file: &CheckpointFile, prefix: &str) -> Result<(), CheckpointError> {
        let mut staged = Vec::with_capacity(self.params.len());
        for id in self.params.ids() {
            let name = format!("{prefix}{}", self.params.name(id));
            let t = file.get(&name).ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            let expected = self.params.get(id).shape();
            if t.shape() != expected {
                return Err(CheckpointError::Shape {
                    name,
                    expected: expected.to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            staged.push((id, t.cast::<F>()));
        }
        if let Some((name, _)) = file
            .tensors
            .iter()
            .find(|(n, _)| n.strip_prefix(prefix).is_some_and(|s| self.params.find(s).is_none()))
        {
            return Err(CheckpointError::Unexpected(name.clone()));
        }
        for (id, t) in staged {
            *self.params.get_mut(id) = t;
        }
        Ok(())
    }
}
