//! Binary checkpoint container.
//!
//! ```text
//! "I3CK"                  magic
//! u32                     format version
//! u64, bytes              header JSON: {"config", "step", "norm_stats"}
//! u32                     tensor count
//! per tensor:
//!   u32, bytes            name
//!   u8                    dtype code (1 = f32, 2 = f64)
//!   u32, u64 * rank       dims
//!   bytes                 little-endian payload
//! ```
//!
//! All integers are little-endian. Payloads are kept as raw bytes, so a
//! loaded checkpoint re-saves to an identical file.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::corpus::NormStats;
use crate::error::{Error, Result};
use crate::numerics::{DType, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"I3CK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: u64,
    pub norm_stats: NormStats,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    step: u64,
    norm_stats: NormStats,
}

impl Checkpoint {
    pub fn from_model<T: Real>(model: &Model<T>, step: u64, norm_stats: NormStats) -> Self {
        let tensors = model
            .params
            .iter()
            .map(|(_, name, t)| {
                let mut bytes = Vec::with_capacity(t.len() * T::DTYPE.size());
                t.data().iter().for_each(|x| x.write_le(&mut bytes));
                NamedTensor {
                    name: name.to_string(),
                    dtype: T::DTYPE,
                    shape: t.shape().to_vec(),
                    bytes,
                }
            })
            .collect();
        Self {
            config: model.config.clone(),
            step,
            norm_stats,
            tensors,
        }
    }

    /// Rebuilds the model in precision `T`, converting stored values if the
    /// checkpoint was written in the other precision. Every tensor of the
    /// configured architecture must be present with its configured shape.
    pub fn to_model<T: Real>(&self) -> Result<Model<T>> {
        let mut model = Model::<T>::new(self.config.clone())?;
        if self.tensors.len() != model.params.len() {
            let extra = self
                .tensors
                .iter()
                .find(|t| model.params.id(&t.name).is_none())
                .map(|t| format!("; unexpected tensor {:?}", t.name))
                .unwrap_or_default();
            return Err(Error::Validation(format!(
                "checkpoint holds {} tensors, configuration defines {}{extra}",
                self.tensors.len(),
                model.params.len()
            )));
        }
        for nt in &self.tensors {
            let id = model.params.id(&nt.name).ok_or_else(|| {
                Error::Validation(format!("tensor {:?} is not part of the configured model", nt.name))
            })?;
            let want = model.params.get(id).shape().to_vec();
            if nt.shape != want {
                return Err(Error::Validation(format!(
                    "tensor {:?} has shape {:?}, configuration expects {:?}",
                    nt.name, nt.shape, want
                )));
            }
            let size = nt.dtype.size();
            let data: Vec<T> = nt
                .bytes
                .chunks_exact(size)
                .map(|c| match nt.dtype {
                    d if d == T::DTYPE => T::read_le(c),
                    DType::F32 => T::lit(f32::read_le(c) as f64),
                    DType::F64 => T::lit(f64::read_le(c)),
                })
                .collect();
            *model.params.get_mut(id) = Tensor::new(want, data)?.with_grad();
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            step: self.step,
            norm_stats: self.norm_stats,
        })?;
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let expect = t.shape.iter().product::<usize>() * t.dtype.size();
            if t.bytes.len() != expect {
                return Err(Error::contract(format!(
                    "tensor {:?} payload is {} bytes, shape {:?} needs {expect}",
                    t.name,
                    t.bytes.len(),
                    t.shape
                )));
            }
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dtype.code());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.bytes);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, not a checkpoint")));
        }
        let version = r.u32("format version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let header_len = r.u64("header length")? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len, "header")?)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::with_capacity(count.min(4096) as usize);
        for i in 0..count {
            let name_len = r.u32("tensor name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
                .map_err(|_| Error::Format(format!("tensor {i}: name is not UTF-8")))?;
            let code = r.take(1, "dtype")?[0];
            let dtype = DType::from_code(code)
                .ok_or_else(|| Error::Format(format!("tensor {name:?}: unknown dtype code {code}")))?;
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64("dims")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor {name:?}: shape {shape:?} overflows")))?;
            let payload = r.take(n, &format!("payload of {name:?}"))?.to_vec();
            tensors.push(NamedTensor {
                name,
                dtype,
                shape,
                bytes: payload,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            config: header.config,
            step: header.step,
            norm_stats: header.norm_stats,
            tensors,
        })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(&bytes)?;
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                offset: self.pos as u64,
                what: format!("{what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}
