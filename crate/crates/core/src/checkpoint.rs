//! Binary model checkpoints.
//!
//! Layout (little-endian): magic `PVAM`, `u32` version, `u64` config
//! digest, then until end of file one record per parameter: `u32` name
//! length, name bytes, `u32` rank, `rank × u64` dims, `f64` payload.
//! The configuration itself is stored next to the checkpoint as JSON.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::network::{PvaConfig, PvaModel};
use crate::train::TrainConfig;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PVAM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(model: &PvaModel) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&model.config.digest().to_le_bytes());
    for (_, p) in model.store.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        let shape = p.tensor.shape();
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.tensor.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            expected: self.pos.saturating_add(n),
            found: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Loads parameters into a freshly built model for `config`. The digest,
/// every name and every shape must match.
pub fn decode_checkpoint(bytes: &[u8], config: &PvaConfig) -> Result<PvaModel> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let digest = r.u64()?;
    if digest != config.digest() {
        return Err(Error::Checkpoint(format!(
            "config digest {digest:016x} does not match {:016x}",
            config.digest()
        )));
    }
    let mut model = PvaModel::new(config.clone())?;
    let mut seen = vec![false; model.store.len()];
    while r.pos < bytes.len() {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Malformed("parameter name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let id = model
            .store
            .id_of(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        let p = model.store.get_mut(id);
        if p.tensor.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {shape:?}, model expects {:?}",
                p.tensor.shape()
            )));
        }
        let n = p.tensor.numel();
        let payload = r.take(n.checked_mul(8).ok_or_else(|| Error::Malformed("tensor too large".into()))?)?;
        for (v, c) in p.tensor.values_mut().iter_mut().zip(payload.chunks_exact(8)) {
            *v = f64::from_le_bytes(c.try_into().unwrap());
        }
        seen[id.index()] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let name = model.store.iter().nth(i).map(|(_, p)| p.name.clone()).unwrap_or_default();
        return Err(Error::Checkpoint(format!("parameter `{name}` missing from checkpoint")));
    }
    Ok(model)
}

/// Sidecar holding the configurations used to build and train a model.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub model: PvaConfig,
    pub train: TrainConfig,
}

pub fn config_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

/// Writes the checkpoint and its `.json` configuration sidecar.
pub fn save_checkpoint(path: &Path, model: &PvaModel, train: &TrainConfig) -> Result<()> {
    fs::write(path, encode_checkpoint(model))?;
    let run = RunConfig {
        model: model.config.clone(),
        train: train.clone(),
    };
    let text = serde_json::to_string_pretty(&run).map_err(|e| Error::Malformed(e.to_string()))?;
    fs::write(config_path(path), text + "\n")?;
    Ok(())
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(config_path(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("config sidecar: {e}")))
}

pub fn load_checkpoint(path: &Path) -> Result<(PvaModel, RunConfig)> {
    let run = load_run_config(path)?;
    let model = decode_checkpoint(&fs::read(path)?, &run.model)?;
    Ok((model, run))
}
