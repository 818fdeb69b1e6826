//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "ACKP"
//! version    u16      1
//! reserved   u16      0
//! cfg_hash   u64      Config::pretrain_hash of the writing run
//! step       u64      completed optimisation steps
//! adam_t     u64      AdamW update count
//! n_records  u32
//! record*    kind u8 (0 online, 1 target, 2 adam m, 3 adam v)
//!            name_len u16, name (UTF-8)
//!            ndim u8, ndim x u32 extents
//!            dtype u8 (2 = f64), payload (product of extents) x f64
//! ```
//!
//! Files are written to a sibling temporary path and renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::optim::AdamState;
use crate::data::volume::DTYPE_F64;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState, ParamSet};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ACKP";
pub const CHECKPOINT_VERSION: u16 = 1;

const KIND_ONLINE: u8 = 0;
const KIND_TARGET: u8 = 1;
const KIND_ADAM_M: u8 = 2;
const KIND_ADAM_V: u8 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub step: u64,
    pub state: ModelState,
    pub adam: AdamState,
}

fn put_set(out: &mut Vec<u8>, kind: u8, set: &BTreeMap<String, Tensor>) {
    for (name, t) in set {
        out.push(kind);
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(DTYPE_F64);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.adam.t.to_le_bytes());
        let n = self.state.online.len() + self.state.target.len() + self.adam.m.len() + self.adam.v.len();
        out.extend_from_slice(&(n as u32).to_le_bytes());
        put_set(&mut out, KIND_ONLINE, &self.state.online);
        put_set(&mut out, KIND_TARGET, &self.state.target);
        put_set(&mut out, KIND_ADAM_M, &self.adam.m);
        put_set(&mut out, KIND_ADAM_V, &self.adam.v);
        out
    }

    /// Decodes a checkpoint and checks it against the architecture `model`:
    /// every parameter name and shape must match a fresh model exactly.
    pub fn from_bytes(bytes: &[u8], model: &ModelConfig) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("checkpoint version {version}")));
        }
        r.take(2)?;
        let config_hash = u64::from_le_bytes(r.array()?);
        let step = u64::from_le_bytes(r.array()?);
        let adam_t = u64::from_le_bytes(r.array()?);
        let n = u32::from_le_bytes(r.array()?) as usize;
        let mut sets: [ParamSet; 4] = Default::default();
        for _ in 0..n {
            let kind = r.take(1)?[0];
            if kind > KIND_ADAM_V {
                return Err(Error::Format(format!("record kind {kind}")));
            }
            let len = u16::from_le_bytes(r.array()?) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("record name is not UTF-8".into()))?;
            let ndim = r.take(1)?[0] as usize;
            let shape: Vec<usize> = (0..ndim)
                .map(|_| r.array().map(|a| u32::from_le_bytes(a) as usize))
                .collect::<Result<_>>()?;
            if r.take(1)?[0] != DTYPE_F64 {
                return Err(Error::Format(format!("record {name} has an unsupported dtype")));
            }
            let count: usize = shape.iter().product();
            let data = r
                .take(count * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = if shape.is_empty() {
                Tensor::scalar(data_first(data)?)
            } else {
                Tensor::new(shape, data)?
            };
            sets[kind as usize].insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint records".into()));
        }
        let [online, target, m, v] = sets;
        let fresh = ModelState::init(model, 0)?;
        check_layout("parameter", &online, &fresh.online)?;
        check_layout("target parameter", &target, &fresh.target)?;
        check_layout("first moment", &m, &fresh.online)?;
        check_layout("second moment", &v, &fresh.online)?;
        Ok(Checkpoint {
            config_hash,
            step,
            state: ModelState {
                config: model.clone(),
                online,
                target,
            },
            adam: AdamState { m, v, t: adam_t },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("bin.tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path, model: &ModelConfig) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&fs::read(path)?, model)
    }
}

fn data_first(data: Vec<f64>) -> Result<f64> {
    data.first()
        .copied()
        .ok_or_else(|| Error::Format("empty scalar record".into()))
}

fn check_layout(what: &str, got: &ParamSet, want: &ParamSet) -> Result<()> {
    for (name, t) in want {
        match got.get(name) {
            None => return Err(Error::Mismatch(format!("checkpoint lacks {what} {name}"))),
            Some(g) if g.shape() != t.shape() => {
                return Err(Error::Mismatch(format!(
                    "{what} {name} has shape {:?} in the checkpoint, model expects {:?}",
                    g.shape(),
                    t.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = got.keys().find(|k| !want.contains_key(*k)) {
        return Err(Error::Mismatch(format!("checkpoint has unexpected {what} {extra}")));
    }
    Ok(())
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
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}
