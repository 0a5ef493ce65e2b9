//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "NCKP" | u16 version | u32 len | config text (TOML, len bytes)
//! then until end of file, one record per tensor:
//! u32 name_len | name (UTF-8) | u32 rank | u32 dims[rank] | f32 payload
//! ```
//!
//! The config block holds the architecture, optimizer hyperparameters and
//! training metadata. Model tensors come first in [`ModelParams::tensors`]
//! order, followed by optimizer accumulators named `opt.<param>.sq_grad` and
//! `opt.<param>.sq_update`. The record count is implied by the
//! architecture, so a file cut at a record boundary is still reported as
//! truncated.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::model::{build_model, ArchitectureConfig, ModelParams};
use crate::optim::{AdadeltaConfig, AdadeltaState, OptimState};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NCKP";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    /// Completed epochs.
    pub epoch: usize,
    /// Mean training loss of each completed epoch.
    pub loss_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub optimizer: Option<OptimState<f32>>,
    pub meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: TrainingMeta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer: Option<AdadeltaConfig>,
    arch: ArchitectureConfig,
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| FormatError::Malformed(format!("{what} {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    put_u32(out, name.len(), "tensor name length")?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank(), "tensor rank")?;
    for &d in t.shape() {
        put_u32(out, d, "tensor dimension")?;
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_checkpoint(
    params: &ModelParams<f32>,
    optimizer: Option<&OptimState<f32>>,
    meta: &TrainingMeta,
) -> Result<Vec<u8>> {
    let header = Header {
        meta: meta.clone(),
        optimizer: optimizer.map(|o| o.config),
        arch: params.arch.clone(),
    };
    let text = toml::to_string(&header).map_err(|e| FormatError::Malformed(format!("config block: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, text.len(), "config length")?;
    out.extend_from_slice(text.as_bytes());
    for (name, t, _) in params.tensors() {
        put_tensor(&mut out, &name, t)?;
    }
    if let Some(o) = optimizer {
        for (name, st) in &o.slots {
            put_tensor(&mut out, &format!("opt.{name}.sq_grad"), &st.sq_grad)?;
            put_tensor(&mut out, &format!("opt.{name}.sq_update"), &st.sq_update)?;
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], FormatError> {
        if self.bytes.len() - self.pos < n {
            return Err(FormatError::Truncated(format!(
                "{what}: need {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> std::result::Result<usize, FormatError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    fn tensor(&mut self) -> std::result::Result<(String, Tensor<f32>), FormatError> {
        let n = self.u32("tensor name length")?;
        let name = std::str::from_utf8(self.take(n, "tensor name")?)
            .map_err(|_| FormatError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = self.u32("tensor rank")?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(self.u32("tensor dimension")?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| FormatError::Malformed(format!("tensor {name} is too large")))?;
        let payload = self.take(count, &format!("tensor {name} payload"))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| FormatError::Malformed(format!("tensor {name}: {e}")))?;
        Ok((name, t))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic.try_into().expect("four bytes"),
        }
        .into());
    }
    let v = r.take(2, "version")?;
    let version = u16::from_le_bytes([v[0], v[1]]);
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        }
        .into());
    }
    let len = r.u32("config length")?;
    let text = std::str::from_utf8(r.take(len, "config block")?)
        .map_err(|_| FormatError::Malformed("config block is not UTF-8".into()))?;
    let header: Header = toml::from_str(text).map_err(|e| FormatError::Malformed(format!("config block: {e}")))?;

    let mut records = BTreeMap::new();
    while !r.at_end() {
        let (name, t) = r.tensor()?;
        if records.insert(name.clone(), t).is_some() {
            return Err(FormatError::Malformed(format!("duplicate tensor {name}")).into());
        }
    }

    let mut params =
        build_model::<f32>(&header.arch, 0).map_err(|e| FormatError::Malformed(format!("stored architecture: {e}")))?;
    let mut take = |name: &str, like: &[usize]| -> Result<Tensor<f32>> {
        let t = records
            .remove(name)
            .ok_or_else(|| FormatError::Truncated(format!("tensor {name} missing")))?;
        if t.shape() != like {
            return Err(FormatError::Malformed(format!(
                "tensor {name} has shape {:?}, architecture needs {like:?}",
                t.shape()
            ))
            .into());
        }
        Ok(t)
    };
    for (name, slot, _) in params.tensors_mut() {
        *slot = take(&name, slot.shape())?;
    }
    let optimizer = match header.optimizer {
        Some(config) => {
            let mut slots = Vec::new();
            for (name, t) in params.trainable() {
                let sq_grad = take(&format!("opt.{name}.sq_grad"), t.shape())?;
                let sq_update = take(&format!("opt.{name}.sq_update"), t.shape())?;
                slots.push((name, AdadeltaState { sq_grad, sq_update }));
            }
            Some(OptimState { config, slots })
        }
        None => None,
    };
    if let Some(name) = records.keys().next() {
        return Err(FormatError::Malformed(format!("unexpected tensor {name}")).into());
    }
    params
        .validate()
        .map_err(|e| FormatError::Malformed(format!("stored parameters: {e}")))?;
    Ok(Checkpoint {
        params,
        optimizer,
        meta: header.meta,
    })
}

/// Writes through a temporary sibling so an interrupted save never leaves a
/// half-written checkpoint at `path`.
pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams<f32>,
    optimizer: Option<&OptimState<f32>>,
    meta: &TrainingMeta,
) -> Result<()> {
    let bytes = encode_checkpoint(params, optimizer, meta)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
