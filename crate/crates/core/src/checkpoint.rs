//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! magic "DLF1" | u32 version | u64 len + config text | u64 seed | u64 step
//! u32 tensor count, then per tensor:
//!   u32 len + name | u8 dtype (1 = f64) | u8 trainable | u32 ndim | u64 dims.. | f64 data..
//! ```
//!
//! Tensors named `meta.*` carry auxiliary state (normalization statistics)
//! and are not model parameters.

use std::path::Path;

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"DLF1";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
pub const META_PREFIX: &str = "meta.";

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub trainable: bool,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub seed: u64,
    pub step: u64,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    /// Captures every parameter of `store`.
    pub fn capture(store: &ParamStore, config_text: String, seed: u64, step: u64) -> Self {
        let tensors = store
            .iter()
            .map(|(_, name, t)| TensorRecord {
                name: name.to_string(),
                trainable: t.requires_grad(),
                tensor: t.detached(),
            })
            .collect();
        Self { config_text, seed, step, tensors }
    }

    pub fn push_meta(&mut self, name: &str, tensor: Tensor) {
        self.tensors.push(TensorRecord {
            name: format!("{META_PREFIX}{name}"),
            trainable: false,
            tensor,
        });
    }

    pub fn meta(&self, name: &str) -> Option<&Tensor> {
        let full = format!("{META_PREFIX}{name}");
        self.tensors.iter().find(|r| r.name == full).map(|r| &r.tensor)
    }

    /// Copies stored values and trainable flags into `store`. Every parameter
    /// must be present with a matching shape and no unknown names are allowed.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        let mut seen = vec![false; store.len()];
        for rec in self.tensors.iter().filter(|r| !r.name.starts_with(META_PREFIX)) {
            let id = store
                .id(&rec.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor '{}'", rec.name)))?;
            let slot = store.get_mut(id);
            if slot.shape() != rec.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}' has shape {:?}, model expects {:?}",
                    rec.name,
                    rec.tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = rec.tensor.clone().with_requires_grad(rec.trainable);
            seen[store.ids().position(|i| i == id).expect("id in store")] = true;
        }
        if let Some(missing) = store.ids().zip(&seen).find(|(_, s)| !**s) {
            return Err(Error::Checkpoint(format!(
                "checkpoint lacks tensor '{}'",
                store.name(missing.0)
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for rec in &self.tensors {
            out.extend_from_slice(&(rec.name.len() as u32).to_le_bytes());
            out.extend_from_slice(rec.name.as_bytes());
            out.push(DTYPE_F64);
            out.push(rec.trainable as u8);
            let shape = rec.tensor.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in rec.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let len = r.len("config length")?;
        let config_text = String::from_utf8(r.take(len, "config text")?.to_vec())
            .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
        let seed = r.u64("seed")?;
        let step = r.u64("step")?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = r.u32("name length")? as usize;
            let name = String::from_utf8(r.take(nlen, "tensor name")?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let dtype = r.u8("dtype")?;
            if dtype != DTYPE_F64 {
                return Err(Error::Checkpoint(format!("tensor '{name}' has unsupported dtype {dtype}")));
            }
            let trainable = r.u8("trainable flag")? != 0;
            let ndim = r.u32("ndim")? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.len("dimension")?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("tensor '{name}' dims overflow")))?;
            let raw = r.take(
                numel
                    .checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint(format!("tensor '{name}' too large")))?,
                "tensor data",
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let tensor = Tensor::new(shape, data)?.with_requires_grad(trainable);
            tensors.push(TensorRecord { name, trainable, tensor });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { config_text, seed, step, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated checkpoint while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Checkpoint(format!("{what} exceeds address space")))
    }
}
