//! Binary container of named tensors plus an embedded JSON document.
//!
//! Layout (little-endian): magic `MAILCKPT`, u32 version, u32 tensor count;
//! per tensor a u16 name length, the UTF-8 name, u8 dtype tag, u8 rank,
//! `rank` u32 dims and the raw values; then a u32 length and the UTF-8
//! document.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::coupling::AgentSites;
use crate::error::{Error, Result};
use crate::model::DualEncoder;
use crate::tensor::{DType, Scalar, Tensor};
use crate::training::{AdamWState, TrainedState};

pub const MAGIC: &[u8; 8] = b"MAILCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// A tensor of either precision, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn of<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => StoredTensor::F32(t.cast()),
            DType::F64 => StoredTensor::F64(t.cast()),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    /// The tensor at precision `T`; the stored precision must match.
    pub fn typed<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        if self.dtype() != T::DTYPE {
            return Err(Error::Format(format!(
                "tensor {name:?} is {}, expected {}",
                self.dtype(),
                T::DTYPE
            )));
        }
        Ok(match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        })
    }

    fn write_values(&self, out: &mut Vec<u8>) {
        match self {
            StoredTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(out)),
            StoredTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(out)),
        }
    }

    fn bitwise_eq(&self, other: &Self) -> bool {
        match (self, other) {
            (StoredTensor::F32(a), StoredTensor::F32(b)) => a.bitwise_eq(b),
            (StoredTensor::F64(a), StoredTensor::F64(b)) => a.bitwise_eq(b),
            _ => false,
        }
    }
}

/// Named tensors in file order plus the raw document.
#[derive(Debug, Clone)]
pub struct Container {
    pub tensors: Vec<(String, StoredTensor)>,
    pub document: String,
}

impl Container {
    /// Same names, shapes, dtypes and bit patterns in the same order, and
    /// the same document.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.document == other.document
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.bitwise_eq(b))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let count = u32::try_from(self.tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.tensors {
            if !seen.insert(name.as_str()) {
                return Err(Error::DuplicateName(name.clone()));
            }
            let len =
                u16::try_from(name.len()).map_err(|_| Error::Format(format!("tensor name too long: {name:?}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype().tag());
            let rank =
                u8::try_from(t.shape().len()).map_err(|_| Error::Format(format!("rank too large for {name:?}")))?;
            out.push(rank);
            for &d in t.shape() {
                if d == 0 {
                    return Err(Error::Format(format!(
                        "tensor {name:?}: dimension sizes must be positive, got {:?}",
                        t.shape()
                    )));
                }
                let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension too large in {name:?}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            t.write_values(&mut out);
        }
        let doc = self.document.as_bytes();
        let len = u32::try_from(doc.len()).map_err(|_| Error::Format("document too long".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(doc);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8, "header")?;
        if magic != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32("header")?;
        if version == 0 || version > FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: FORMAT_VERSION,
            });
        }
        let count = r.u32("header")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        let mut seen = HashSet::new();
        for i in 0..count {
            let what = format!("tensor #{i}");
            let name_len = u16::from_le_bytes(r.take(2, &what)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(name_len, &what)?)
                .map_err(|_| Error::Format(format!("{what}: name is not UTF-8")))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::DuplicateName(name));
            }
            let tag = r.take(1, &name)?[0];
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| Error::Format(format!("tensor {name:?}: unknown dtype tag {tag}")))?;
            let rank = r.take(1, &name)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32(&name)? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor {name:?}: shape overflows")))?;
            let nbytes = numel
                .checked_mul(dtype.size())
                .ok_or_else(|| Error::Format(format!("tensor {name:?}: shape overflows")))?;
            let raw = r.take(nbytes, &name)?;
            let bad_shape = |e: Error| Error::Format(format!("tensor {name:?}: {e}"));
            let t = match dtype {
                DType::F32 => StoredTensor::F32(
                    Tensor::new(shape, raw.chunks_exact(4).map(f32::read_le).collect()).map_err(bad_shape)?,
                ),
                DType::F64 => StoredTensor::F64(
                    Tensor::new(shape, raw.chunks_exact(8).map(f64::read_le).collect()).map_err(bad_shape)?,
                ),
            };
            tensors.push((name, t));
        }
        let doc_len = r.u32("document")? as usize;
        let document = std::str::from_utf8(r.take(doc_len, "document")?)
            .map_err(|_| Error::Format("document is not UTF-8".into()))?
            .to_string();
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { tensors, document })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn map(&self) -> BTreeMap<&str, &StoredTensor> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::Truncated(what.to_string())),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    /// Frozen weights plus agents, bridges, meta vectors and optimizer moments.
    Trained,
    /// Weights with every agent folded in; nothing trainable.
    Fused,
}

/// The JSON document embedded in every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub seed: u64,
    pub step: u64,
    pub config: RunConfig,
}

const ADAM_FIRST: &str = "adam.m.";
const ADAM_SECOND: &str = "adam.v.";

/// A model and, for trained checkpoints, the trainable state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub model: DualEncoder<T>,
    pub state: Option<TrainedState<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_container(&self) -> Result<Container> {
        let mut tensors: Vec<(String, StoredTensor)> = self
            .model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, StoredTensor::of(t)))
            .collect();
        match (&self.state, self.meta.kind) {
            (Some(state), CheckpointKind::Trained) => {
                tensors.extend(
                    state
                        .sites
                        .named_tensors()
                        .into_iter()
                        .map(|(n, t)| (n, StoredTensor::of(t))),
                );
                for (prefix, moments) in [
                    (ADAM_FIRST, &state.optimizer.first),
                    (ADAM_SECOND, &state.optimizer.second),
                ] {
                    tensors.extend(
                        moments
                            .iter()
                            .map(|(n, t)| (format!("{prefix}{n}"), StoredTensor::of(t))),
                    );
                }
            }
            (None, CheckpointKind::Fused) => {}
            _ => {
                return Err(Error::Format(
                    "trained checkpoints carry sites; fused ones do not".into(),
                ))
            }
        }
        let step = self.state.as_ref().map_or(self.meta.step, |s| s.step);
        let meta = CheckpointMeta {
            step,
            ..self.meta.clone()
        };
        Ok(Container {
            tensors,
            document: serde_json::to_string(&meta)?,
        })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_str(&c.document)?;
        if meta.config.precision != T::DTYPE {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, requested {}",
                meta.config.precision,
                T::DTYPE
            )));
        }
        let mut weights = BTreeMap::new();
        let mut agents = BTreeMap::new();
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (name, t) in &c.tensors {
            let t = t.typed::<T>(name)?;
            if let Some(rest) = name.strip_prefix(ADAM_FIRST) {
                first.insert(rest.to_string(), t);
            } else if let Some(rest) = name.strip_prefix(ADAM_SECOND) {
                second.insert(rest.to_string(), t);
            } else if name.starts_with("agent.") {
                agents.insert(name.clone(), t);
            } else {
                weights.insert(name.clone(), t);
            }
        }
        let model = DualEncoder::from_named(meta.config.encoder.clone(), &weights)?;
        let expected = model.named_tensors().len();
        if weights.len() != expected {
            return Err(Error::Format(format!(
                "{} unexpected weight tensors",
                weights.len() - expected
            )));
        }
        let state = match meta.kind {
            CheckpointKind::Fused => {
                if !(agents.is_empty() && first.is_empty() && second.is_empty()) {
                    return Err(Error::Format("fused checkpoint contains trainable tensors".into()));
                }
                None
            }
            CheckpointKind::Trained => {
                let sites = AgentSites::from_named(&meta.config.encoder, &meta.config.coupling, &agents)?;
                if agents.len() != sites.named_tensors().len() {
                    return Err(Error::Format("unexpected agent tensors".into()));
                }
                Some(TrainedState {
                    sites,
                    optimizer: AdamWState {
                        step: meta.step,
                        first,
                        second,
                    },
                    step: meta.step,
                })
            }
        };
        Ok(Self { meta, model, state })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// The embedded document of a checkpoint file, without decoding tensors
/// into a model.
pub fn read_meta(c: &Container) -> Result<CheckpointMeta> {
    Ok(serde_json::from_str(&c.document)?)
}
