//! Versioned binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "CIR1"                      magic
//! u32 version                 currently 1
//! u32 n, n bytes              ModelConfig as JSON
//! u64 step, u64 epoch, u64 next_batch
//! u32 blocks                  then per block: u64 len, len × f64
//! u64 hidden, hidden × f64    batch-norm running mean
//! hidden × f64                batch-norm running variance
//! u8 has_adam                 then u64 t, per block first moments,
//!                             per block second moments (lengths as above)
//! ```

use super::{CirModel, ModelConfig};
use crate::error::{CirError, Result};
use crate::ndmath::Tensor;
use crate::train::AdamState;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CIR1";
const VERSION: u32 = 1;

/// Position of a run within its epoch loop.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub step: u64,
    pub epoch: u64,
    /// Index of the next batch to run inside `epoch`.
    pub next_batch: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: CirModel,
    pub progress: Progress,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.model.config)?;
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        for v in [self.progress.step, self.progress.epoch, self.progress.next_batch] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let params = self.model.params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for p in params {
            out.extend_from_slice(&(p.numel() as u64).to_le_bytes());
            put_floats(&mut out, p.data());
        }
        out.extend_from_slice(&(self.model.bn_running_mean.len() as u64).to_le_bytes());
        put_floats(&mut out, &self.model.bn_running_mean);
        put_floats(&mut out, &self.model.bn_running_var);
        match &self.adam {
            None => out.push(0),
            Some(a) => {
                out.push(1);
                out.extend_from_slice(&a.t.to_le_bytes());
                for m in a.m.iter().chain(&a.v) {
                    put_floats(&mut out, m.data());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { buf: bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(CirError::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CirError::Format(format!("unsupported checkpoint version {version}")));
        }
        let n = r.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(n)?)?;
        let progress = Progress {
            step: r.u64()?,
            epoch: r.u64()?,
            next_batch: r.u64()?,
        };
        let blocks = r.u32()? as usize;
        let mut params = Vec::with_capacity(blocks);
        for _ in 0..blocks {
            let len = r.u64()? as usize;
            params.push(Tensor::vector(r.floats(len)?));
        }
        let hidden = r.u64()? as usize;
        let mean = r.floats(hidden)?;
        let var = r.floats(hidden)?;
        let model = CirModel::from_parts(config, params, mean, var)?;
        let adam = match r.take(1)?[0] {
            0 => None,
            1 => {
                let t = r.u64()?;
                let read_set = |r: &mut Cursor| -> Result<Vec<Tensor>> {
                    model
                        .params()
                        .iter()
                        .map(|p| Tensor::new(p.shape().to_vec(), r.floats(p.numel())?))
                        .collect()
                };
                let m = read_set(&mut r)?;
                let v = read_set(&mut r)?;
                Some(AdamState { t, m, v })
            }
            other => return Err(CirError::Format(format!("bad optimizer flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(CirError::Format(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            model,
            progress,
            adam,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

fn put_floats(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CirError::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| CirError::Format("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
