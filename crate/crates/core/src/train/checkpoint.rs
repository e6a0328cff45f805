//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PXFU"                    magic
//! u32                       format version
//! u32 + bytes               UTF-8 JSON header (model config, stage, step, seed digest)
//! u32                       tensor count
//! per tensor:
//!   u32 + bytes             name
//!   u8                      dtype code (0 = f32, 1 = f64)
//!   u32                     rank
//!   u64 * rank              dims
//!   raw data
//! ```
//!
//! Optimizer moments, when present, follow the parameters as `adam.m.<name>`
//! and `adam.v.<name>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::data::Stage;
use crate::error::{Error, Result};
use crate::model::{check_schema, ModelConfig};
use crate::tensor::{DType, Real, Tensor};

use super::optim::AdamState;

pub const MAGIC: &[u8; 4] = b"PXFU";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub stage: Stage,
    pub step: usize,
    pub seed: u64,
    /// Digest of the run's root random stream.
    pub seed_digest: u64,
    /// Adam step count when moments are stored.
    pub adam_step: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: ModelConfig,
    pub params: ParamStore<T>,
    pub adam: Option<AdamState<T>>,
    pub stage: Stage,
    pub step: usize,
    pub seed: u64,
    pub seed_digest: u64,
}

impl<T: Real> Checkpoint<T> {
    fn header(&self) -> CheckpointHeader {
        CheckpointHeader {
            model: self.model.clone(),
            stage: self.stage,
            step: self.step,
            seed: self.seed,
            seed_digest: self.seed_digest,
            adam_step: self.adam.as_ref().map(|a| a.step),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header())?;
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let mut records: Vec<(String, &Tensor<T>)> = self.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
        if let Some(adam) = &self.adam {
            for ((name, _), (m, v)) in self.params.iter().zip(adam.m.iter().zip(&adam.v)) {
                records.push((format!("adam.m.{name}"), m));
                records.push((format!("adam.v.{name}"), v));
            }
        }
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, t) in records {
            if let Some(i) = t.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("tensor `{name}`"),
                    index: i,
                });
            }
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE.code());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let header = read_header(&mut r)?;
        if header.model.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {:?} tensors, {:?} requested",
                header.model.dtype,
                T::DTYPE
            )));
        }
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        let mut moments = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let code = r.take(1)?[0];
            let dtype = DType::from_code(code)
                .ok_or_else(|| Error::Checkpoint(format!("unknown dtype code {code} for `{name}`")))?;
            if dtype != T::DTYPE {
                return Err(Error::Checkpoint(format!("tensor `{name}` has dtype {dtype:?}")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let size = dtype.size();
            let raw = r.take(
                n.checked_mul(size)
                    .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
            )?;
            let data: Vec<T> = raw.chunks_exact(size).map(T::read_le).collect();
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("checkpoint tensor `{name}`"),
                    index: i,
                });
            }
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
            if name.starts_with("adam.") {
                moments.push((name, t));
            } else {
                params.insert(name, t)?;
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        check_schema(&header.model, &params)?;
        let adam = match header.adam_step {
            None if moments.is_empty() => None,
            None => return Err(Error::Checkpoint("moments stored without an adam step".into())),
            Some(step) => {
                let mut lookup: std::collections::HashMap<String, Tensor<T>> = moments.into_iter().collect();
                let mut m = Vec::with_capacity(params.len());
                let mut v = Vec::with_capacity(params.len());
                for (name, t) in params.iter() {
                    for (prefix, dst) in [("adam.m.", &mut m), ("adam.v.", &mut v)] {
                        let key = format!("{prefix}{name}");
                        let mt = lookup
                            .remove(&key)
                            .ok_or_else(|| Error::Checkpoint(format!("missing `{key}`")))?;
                        if mt.shape() != t.shape() {
                            return Err(Error::Checkpoint(format!("`{key}` shape differs from `{name}`")));
                        }
                        dst.push(mt);
                    }
                }
                if let Some(extra) = lookup.keys().next() {
                    return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
                }
                Some(AdamState { step, m, v })
            }
        };
        Ok(Self {
            model: header.model,
            params,
            adam,
            stage: header.stage,
            step: header.step,
            seed: header.seed,
            seed_digest: header.seed_digest,
        })
    }

    /// Errors unless this checkpoint was built for `expected`.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        if &self.model != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint model config {} does not match the requested {}",
                serde_json::to_string(&self.model)?,
                serde_json::to_string(expected)?
            )));
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn read_header(r: &mut Reader<'_>) -> Result<CheckpointHeader> {
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}, expected \"PXFU\"")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let len = r.u32()? as usize;
    serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))
}

/// Reads only the header, e.g. to pick the element type before a full load.
pub fn peek_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_header(&mut Reader { bytes: &bytes, pos: 0 })
}

pub fn save_checkpoint<T: Real>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
