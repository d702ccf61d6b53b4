//! Binary checkpoint files.
//!
//! ```text
//! "MDKN"  u32 version  u64 header_len  header (UTF-8 JSON)
//! u32 tensor_count
//! per tensor: u32 name_len  name  u8 dtype  u8 rank  u64 extent × rank  data
//! ```
//!
//! All integers and tensor elements are little-endian. The JSON header holds
//! the model config, the element dtype and the training bookkeeping; the
//! tensor section holds the parameters in registration order followed, when
//! training state is present, by the Adam first and second moments
//! (`adam.m/<param>`, `adam.v/<param>`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::MedKanConfig;
use super::model::MedKan;
use crate::error::{Error, Result};
use crate::tensor::{DType, Element, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"MDKN";
pub const VERSION: u32 = 1;

const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

/// Scalar training bookkeeping stored in the JSON header.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
    pub seed: u64,
    pub best_val_acc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_since_best: usize,
}

/// Resumable optimizer state: bookkeeping plus Adam moments, one pair per
/// parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub meta: TrainMeta,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: MedKanConfig,
    pub params: Vec<(String, Tensor<T>)>,
    pub train_state: Option<TrainState<T>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: MedKanConfig,
    dtype: DType,
    train_state: Option<TrainMeta>,
}

/// Byte position of one tensor record in an encoded checkpoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpan {
    pub name: String,
    /// Offset of the record (its `name_len` field).
    pub record: usize,
    /// Offset of the first data byte.
    pub data: usize,
    pub data_len: usize,
}

impl<T: Element> Checkpoint<T> {
    pub fn from_store(config: &MedKanConfig, store: &ParamStore<T>, train_state: Option<TrainState<T>>) -> Self {
        Self {
            config: config.clone(),
            params: store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            train_state,
        }
    }

    /// Rebuilds the model and loads the stored parameters into a new store.
    pub fn restore(&self) -> Result<(MedKan, ParamStore<T>)> {
        let (model, mut store) = MedKan::init::<T>(&self.config, 0)?;
        store.load_from(&self.params)?;
        Ok((model, store))
    }

    fn records(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = self.params.iter().map(|(n, t)| (n.clone(), t)).collect();
        if let Some(ts) = &self.train_state {
            for (prefix, moments) in [(M_PREFIX, &ts.m), (V_PREFIX, &ts.v)] {
                for ((n, _), t) in self.params.iter().zip(moments) {
                    out.push((format!("{prefix}{n}"), t));
                }
            }
        }
        out
    }

    fn header_json(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            dtype: T::DTYPE,
            train_state: self.train_state.as_ref().map(|t| t.meta.clone()),
        };
        Ok(serde_json::to_vec(&header)?)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if let Some(ts) = &self.train_state {
            if ts.m.len() != self.params.len() || ts.v.len() != self.params.len() {
                return Err(Error::CorruptCheckpoint(format!(
                    "{} parameters but {}/{} moment tensors",
                    self.params.len(),
                    ts.m.len(),
                    ts.v.len()
                )));
            }
        }
        let json = self.header_json()?;
        let records = self.records();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, t) in records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE.tag());
            out.push(t.rank() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    /// Where each tensor record lands in [`Checkpoint::encode`]'s output.
    pub fn layout(&self) -> Result<Vec<TensorSpan>> {
        let mut pos = 4 + 4 + 8 + self.header_json()?.len() + 4;
        let mut spans = Vec::new();
        for (name, t) in self.records() {
            let record = pos;
            let data = record + 4 + name.len() + 2 + 8 * t.rank();
            let data_len = t.numel() * T::DTYPE.size();
            pos = data + data_len;
            spans.push(TensorSpan { name, record, data, data_len });
        }
        Ok(spans)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let (header, count) = read_header(&mut r)?;
        if header.dtype != T::DTYPE {
            return Err(Error::DtypeMismatch {
                expected: T::DTYPE.to_string(),
                found: header.dtype.to_string(),
            });
        }
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            records.push(read_tensor::<T>(&mut r)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }

        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in records {
            if let Some(rest) = name.strip_prefix(M_PREFIX) {
                m.push((rest.to_string(), t));
            } else if let Some(rest) = name.strip_prefix(V_PREFIX) {
                v.push((rest.to_string(), t));
            } else {
                params.push((name, t));
            }
        }
        let train_state = match header.train_state {
            Some(meta) => {
                for (kind, moments) in [("first", &m), ("second", &v)] {
                    let consistent = moments.len() == params.len()
                        && moments
                            .iter()
                            .zip(&params)
                            .all(|((a, x), (b, y))| a == b && x.shape() == y.shape());
                    if !consistent {
                        return Err(Error::CorruptCheckpoint(format!(
                            "{kind} moments do not match the parameter list"
                        )));
                    }
                }
                Some(TrainState {
                    meta,
                    m: m.into_iter().map(|(_, t)| t).collect(),
                    v: v.into_iter().map(|(_, t)| t).collect(),
                })
            }
            None if m.is_empty() && v.is_empty() => None,
            None => {
                return Err(Error::CorruptCheckpoint(
                    "optimizer moments present without training state".into(),
                ))
            }
        };
        Ok(Self {
            config: header.config,
            params,
            train_state,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

/// Reads only the config and element type of a checkpoint file.
pub fn peek(path: impl AsRef<Path>) -> Result<(MedKanConfig, DType)> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let (header, _) = read_header(&mut r)?;
    Ok((header.config, header.dtype))
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
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::CorruptCheckpoint(format!(
                "truncated: {what} needs {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, v: u64, what: &str) -> Result<usize> {
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| Error::CorruptCheckpoint(format!("truncated: {what} {v} exceeds the file size")))
    }
}

fn read_header(r: &mut Reader<'_>) -> Result<(Header, usize)> {
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic (not a MedKAN checkpoint)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CheckpointVersion(version));
    }
    let raw = r.u64("header length")?;
    let json_len = r.len(raw, "header length")?;
    let json = r.take(json_len, "header")?;
    let header: Header = serde_json::from_slice(json)
        .map_err(|e| Error::CorruptCheckpoint(format!("unreadable header: {e}")))?;
    let count = r.u32("tensor count")? as usize;
    Ok((header, count))
}

fn read_tensor<T: Element>(r: &mut Reader<'_>) -> Result<(String, Tensor<T>)> {
    let name_len = r.u32("name length")? as usize;
    let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
        .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?
        .to_string();
    let tag = r.u8("dtype")?;
    let dtype = DType::from_tag(tag)
        .ok_or_else(|| Error::CorruptCheckpoint(format!("{name}: unknown dtype tag {tag}")))?;
    if dtype != T::DTYPE {
        return Err(Error::DtypeMismatch {
            expected: T::DTYPE.to_string(),
            found: dtype.to_string(),
        });
    }
    let rank = r.u8("rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let raw = r.u64("extent")?;
        shape.push(r.len(raw, "extent")?);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .filter(|&n| n.saturating_mul(dtype.size()) <= r.bytes.len())
        .ok_or_else(|| Error::CorruptCheckpoint(format!("{name}: shape {shape:?} is too large")))?;
    let raw = r.take(numel * dtype.size(), &format!("data of {name}"))?;
    let data = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
    let t = Tensor::new(&shape, data).map_err(|e| Error::CorruptCheckpoint(format!("{name}: {e}")))?;
    Ok((name, t))
}
