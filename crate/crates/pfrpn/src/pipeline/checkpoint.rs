//! Binary model checkpoints.
//!
//! Layout: 4-byte magic `PFRP`, a little-endian u32 format version, then one
//! record per tensor sorted by name. Each record is `name_len: u32`, the
//! UTF-8 name, `rank: u32`, `rank` u32 dimensions, and the row-major payload
//! as little-endian f64. Structural hyperparameters travel as a synthetic
//! `__config__` record, so a checkpoint fully determines the model.

use super::{ModelConfig, ModelParams};
use crate::numerics::Tensor;
use crate::{Error, Result};
use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PFRP";
pub const CHECKPOINT_VERSION: u32 = 1;

const CONFIG_RECORD: &str = "__config__";

fn write_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize `params` to `path`. Byte-for-byte deterministic.
pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let mut records: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    let cfg = &params.config;
    records.insert(
        CONFIG_RECORD.to_string(),
        (
            vec![3],
            vec![cfg.channels as f64, cfg.decoder_layers as f64, cfg.stem_stride as f64],
        ),
    );
    for (name, tensor) in params.named_tensors() {
        records.insert(name, (tensor.shape.clone(), tensor.data.clone()));
    }

    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, (shape, data)) in &records {
        write_record(&mut out, name, shape, data);
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Read a checkpoint back into a model. Every expected tensor must be
/// present with its expected shape, and nothing extra may follow.
pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };

    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }

    let mut map: BTreeMap<String, Tensor> = BTreeMap::new();
    while !r.done() {
        let name_len = r.u32("record name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "record name")?)
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("record rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("record dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 8, &format!("payload of {name}"))?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if map.insert(name.clone(), Tensor::new(shape, data)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate record {name}")));
        }
    }

    let cfg_tensor = map
        .remove(CONFIG_RECORD)
        .ok_or_else(|| Error::Checkpoint("missing __config__ record".into()))?;
    if cfg_tensor.numel() != 3 {
        return Err(Error::Checkpoint("malformed __config__ record".into()));
    }
    let as_usize = |v: f64, what: &str| -> Result<usize> {
        if v.fract() != 0.0 || v < 0.0 || v > u32::MAX as f64 {
            return Err(Error::Checkpoint(format!("non-integral {what} in __config__")));
        }
        Ok(v as usize)
    };
    let config = ModelConfig {
        channels: as_usize(cfg_tensor.data[0], "channels")?,
        decoder_layers: as_usize(cfg_tensor.data[1], "decoder_layers")?,
        stem_stride: as_usize(cfg_tensor.data[2], "stem_stride")?,
    };
    config.validate().map_err(|e| Error::Checkpoint(format!("invalid stored config: {e}")))?;

    let mut params = ModelParams::init(config, 0)
        .map_err(|e| Error::Checkpoint(format!("cannot shape model: {e}")))?;
    for (name, slot) in params.named_tensors_mut() {
        let tensor = map
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if tensor.shape != slot.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                tensor.shape, slot.shape
            )));
        }
        *slot = tensor;
    }
    if let Some((name, _)) = map.into_iter().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
    }
    Ok(params)
}
