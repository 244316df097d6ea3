//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! "OBNT"  u32 version
//! u8 stage  u64 epoch  u64 step
//! u32 config_len  config text (key = value lines)
//! u32 tensor_count
//!   per tensor: u16 name_len name  u8 ndim  u32 dims[ndim]  scalars
//! per tensor: u64 adam_step  f64 m[len]  f64 v[len]
//! [u8; 32] SHA-256 of every preceding byte
//! ```
//!
//! Parameter scalars are f32 in standard precision and f64 in wide
//! precision; optimizer moments are always f64.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Stage, TrainState};
use crate::autograd::{AdamConfig, AdamSlot, AdamState, Precision};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;

pub const MAGIC: &[u8; 4] = b"OBNT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub stage: Option<Stage>,
    pub epoch: u64,
    pub step: u64,
    pub tensors: Vec<TensorRecord>,
    pub adam: Vec<AdamSlot>,
}

/// A decoded checkpoint plus the result of its integrity check.
#[derive(Debug, Clone, PartialEq)]
pub struct Loaded {
    pub checkpoint: Checkpoint,
    pub checksum_ok: bool,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Self {
        Checkpoint {
            config: state.model.cfg.clone(),
            stage: state.stage,
            epoch: state.epoch,
            step: state.step,
            tensors: state
                .model
                .store
                .params()
                .iter()
                .map(|p| TensorRecord {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    data: p.tensor.data().to_vec(),
                })
                .collect(),
            adam: state.adam.slots.clone(),
        }
    }

    /// Rebuilds the training state under `cfg`, which must describe the
    /// same tensor layout as the checkpoint.
    pub fn into_state_with(self, cfg: &ModelConfig) -> Result<TrainState> {
        let mut model = Model::new(cfg)?;
        let params = model.store.params();
        for (i, p) in params.iter().enumerate() {
            let Some(rec) = self.tensors.get(i) else {
                return Err(Error::Checkpoint(format!(
                    "checkpoint has no tensor for `{}` (model expects shape {:?})",
                    p.name,
                    p.tensor.shape()
                )));
            };
            if rec.name != p.name || rec.shape != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "first mismatched tensor: model `{}` {:?} vs checkpoint `{}` {:?}",
                    p.name,
                    p.tensor.shape(),
                    rec.name,
                    rec.shape
                )));
            }
        }
        if self.tensors.len() > params.len() {
            let extra = &self.tensors[params.len()];
            return Err(Error::Checkpoint(format!(
                "checkpoint has unexpected tensor `{}` {:?}",
                extra.name, extra.shape
            )));
        }
        for rec in self.tensors {
            model.store.load_value(&rec.name, &rec.shape, rec.data)?;
        }
        let adam = AdamState {
            config: adam_config(cfg),
            slots: self.adam,
        };
        Ok(TrainState {
            model,
            adam,
            stage: self.stage,
            epoch: self.epoch,
            step: self.step,
        })
    }

    pub fn into_state(self) -> Result<TrainState> {
        let cfg = self.config.clone();
        self.into_state_with(&cfg)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.stage.map_or(0, Stage::number));
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let wide = self.config.precision == Precision::Wide;
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &t.data {
                if wide {
                    out.extend_from_slice(&v.to_le_bytes());
                } else {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        for slot in &self.adam {
            out.extend_from_slice(&slot.step.to_le_bytes());
            for v in slot.m.iter().chain(&slot.v) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Loaded> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic (not a checkpoint file)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (this build reads version {VERSION})"
            )));
        }
        let stage = match r.u8()? {
            0 => None,
            n => Some(Stage::from_number(n).ok_or_else(|| Error::Checkpoint(format!("invalid stage tag {n}")))?),
        };
        let epoch = r.u64()?;
        let step = r.u64()?;
        let len = r.u32()? as usize;
        let text =
            std::str::from_utf8(r.take(len)?).map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
        let config = ModelConfig::from_text(text, "checkpoint config")?;
        let wide = config.precision == Precision::Wide;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = (0..len)
                .map(|_| if wide { r.f64() } else { r.f32().map(f64::from) })
                .collect::<Result<Vec<_>>>()?;
            tensors.push(TensorRecord { name, shape, data });
        }
        let mut adam = Vec::with_capacity(count);
        for t in &tensors {
            let step = r.u64()?;
            let len = t.data.len();
            let m = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let v = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            adam.push(AdamSlot { step, m, v });
        }
        let body_end = r.pos;
        let stored = r.take(32)?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after checksum",
                bytes.len() - r.pos
            )));
        }
        let checksum_ok = Sha256::digest(&bytes[..body_end]).as_slice() == stored;
        Ok(Loaded {
            checkpoint: Checkpoint {
                config,
                stage,
                epoch,
                step,
                tensors,
                adam,
            },
            checksum_ok,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Loaded> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

pub fn adam_config(cfg: &ModelConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
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
            .ok_or_else(|| Error::Checkpoint(format!("truncated file: needed {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        self.array().map(u16::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64> {
        self.array().map(u64::from_le_bytes)
    }

    fn f32(&mut self) -> Result<f32> {
        self.array().map(f32::from_le_bytes)
    }

    fn f64(&mut self) -> Result<f64> {
        self.array().map(f64::from_le_bytes)
    }
}
