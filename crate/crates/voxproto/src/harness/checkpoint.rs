//! Binary model checkpoints.
//!
//! Layout: magic `POCC`, version `u32` LE, length-prefixed JSON metadata
//! (config, step, seed), tensor count `u32`, then per tensor: name
//! (`u16` length + UTF-8 bytes), dtype code `u8` (0 = f32), rank `u8`,
//! dims `u32` LE each, and the row-major little-endian f32 payload.
//!
//! Values are quantized to f32 when the checkpoint is *constructed*, so a
//! checkpoint evaluates identically before saving and after loading.

use super::{ExperimentConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numeric::{StreamRng, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

pub const POCC_MAGIC: [u8; 4] = *b"POCC";
pub const POCC_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;

/// Length-prefixed JSON slot of the file.
#[derive(Serialize, Deserialize)]
struct Meta {
    config: ExperimentConfig,
    step: u64,
    seed: u64,
}

/// A saved model: config, progress counters, and f32-quantized tensors in
/// [`ModelParams`] traversal order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    /// Optimizer steps taken when the snapshot was made.
    pub step: u64,
    /// Training seed, kept so a run can be identified later.
    pub seed: u64,
    pub tensors: Vec<(String, Tensor)>,
}

/// Round every value through f32, the storage precision.
fn quantize(t: &Tensor) -> Tensor {
    let data = t.data().iter().map(|&v| v as f32 as f64).collect();
    Tensor::from_parts(t.shape().to_vec(), data)
}

impl Checkpoint {
    /// Snapshots a model; values are quantized to storage precision here.
    pub fn from_model(
        config: &ExperimentConfig,
        params: &ModelParams,
        step: u64,
        seed: u64,
    ) -> Checkpoint {
        let mut tensors = Vec::new();
        params.for_each_tensor(&mut |name, t| tensors.push((name, quantize(t))));
        Checkpoint { config: config.clone(), step, seed, tensors }
    }

    /// Rebuilds model parameters, matching stored tensors by name.
    pub fn to_model(&self) -> Result<ModelParams> {
        let mut params = ModelParams::init(&self.config, &StreamRng::new(self.seed).child("init", 0))?;
        let stored: HashMap<&str, &Tensor> =
            self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        if stored.len() != self.tensors.len() {
            return Err(Error::format("checkpoint holds duplicate tensor names"));
        }
        if stored.len() != params.num_tensors() {
            return Err(Error::format(format!(
                "checkpoint holds {} tensors, model wants {}",
                stored.len(),
                params.num_tensors()
            )));
        }
        let mut bad: Option<Error> = None;
        params.for_each_tensor_mut(&mut |name, t| {
            if bad.is_some() {
                return;
            }
            match stored.get(name.as_str()) {
                Some(src) if src.shape() == t.shape() => *t = (*src).clone(),
                Some(src) => {
                    bad = Some(Error::config(
                        "model",
                        format!("tensor `{name}`: stored shape {:?} vs expected {:?}", src.shape(), t.shape()),
                    ))
                }
                None => bad = Some(Error::format(format!("checkpoint is missing tensor `{name}`"))),
            }
        });
        match bad {
            Some(e) => Err(e),
            None => Ok(params),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&Meta {
            config: self.config.clone(),
            step: self.step,
            seed: self.seed,
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(&POCC_MAGIC);
        out.extend_from_slice(&POCC_VERSION.to_le_bytes());
        out.extend_from_slice(&(u32::try_from(meta.len()).map_err(|_| Error::format("metadata too large"))?).to_le_bytes());
        out.extend_from_slice(&meta);
        let count = u32::try_from(self.tensors.len()).map_err(|_| Error::format("too many tensors"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            let nlen = u16::try_from(nb.len())
                .map_err(|_| Error::format(format!("tensor name `{name}` too long")))?;
            out.extend_from_slice(&nlen.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(DTYPE_F32);
            let rank = u8::try_from(t.shape().len())
                .map_err(|_| Error::format("tensor rank too large"))?;
            out.push(rank);
            for &d in t.shape() {
                let d32 = u32::try_from(d).map_err(|_| Error::format("dimension too large"))?;
                out.extend_from_slice(&d32.to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != POCC_MAGIC {
            return Err(Error::format("not a POCC checkpoint (bad magic)"));
        }
        let version = cur.u32()?;
        if version != POCC_VERSION {
            return Err(Error::format(format!(
                "unsupported checkpoint version {version} (expected {POCC_VERSION})"
            )));
        }
        let meta_len = cur.u32()? as usize;
        let meta: Meta = serde_json::from_slice(cur.take(meta_len)?)?;
        let count = cur.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = cur.u16()? as usize;
            let name = String::from_utf8(cur.take(nlen)?.to_vec())
                .map_err(|_| Error::format("tensor name is not UTF-8"))?;
            let dtype = cur.u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::format(format!("unknown dtype code {dtype}")));
            }
            let rank = cur.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            let mut numel = 1usize;
            for _ in 0..rank {
                let d = cur.u32()? as usize;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::format("tensor dimensions overflow"))?;
                shape.push(d);
            }
            let nbytes = numel.checked_mul(4).ok_or_else(|| Error::format("tensor payload overflows"))?;
            let payload = cur.take(nbytes)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            tensors.push((name, Tensor::from_parts(shape, data)));
        }
        if cur.pos != bytes.len() {
            return Err(Error::format(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - cur.pos
            )));
        }
        Ok(Checkpoint { config: meta.config, step: meta.step, seed: meta.seed, tensors })
    }
}

/// Bounds-checked little-endian reader.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(format!(
                "checkpoint truncated: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

// ── Tests ──
