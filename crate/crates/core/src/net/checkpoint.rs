//! Binary tensor container shared by weight, prompt and optimiser checkpoints.
//!
//! Layout (little-endian): magic `T3RWGTS`, `u32` version, `u32` length plus
//! UTF-8 JSON of the [`ModelConfig`], `u32` tensor count, then per tensor a
//! `u32` name length, the name, `u32` rank, `u64` dims and the `f64` values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::params::{PromptSet, Weights};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 7] = b"T3RWGTS";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

pub fn encode_checkpoint(config: &ModelConfig, tensors: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let cfg = serde_json::to_vec(config).expect("config serialises");
    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHTS_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
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
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |m: &str| Error::format(path, m.to_string());
    let mut r = Reader { bytes, pos: 0 };
    if r.take(7) != Some(&WEIGHTS_MAGIC[..]) {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = r.u32().ok_or_else(|| bad("truncated header"))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
    let cfg_bytes = r.take(cfg_len).ok_or_else(|| bad("truncated config block"))?;
    let config: ModelConfig = serde_json::from_slice(cfg_bytes).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    let count = r.u32().ok_or_else(|| bad("truncated header"))?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32().ok_or_else(|| bad("truncated tensor name"))? as usize;
        let name = std::str::from_utf8(r.take(len).ok_or_else(|| bad("truncated tensor name"))?)
            .map_err(|_| bad("tensor name is not UTF-8"))?
            .to_string();
        let ndim = r.u32().ok_or_else(|| bad("truncated shape"))? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64().ok_or_else(|| bad("truncated shape"))? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r
            .take(numel.checked_mul(8).ok_or_else(|| bad("tensor too large"))?)
            .ok_or_else(|| bad(&format!("truncated data for {name}")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes after last tensor"));
    }
    Ok(Checkpoint { config, tensors })
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_checkpoint(config, tensors)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

pub fn save_weights(path: &Path, config: &ModelConfig, weights: &Weights) -> Result<()> {
    save_checkpoint(path, config, weights.tensors())
}

pub fn load_weights(path: &Path) -> Result<(ModelConfig, Weights)> {
    let ck = load_checkpoint(path)?;
    let w = Weights::from_tensors(&ck.config, ck.tensors)?;
    Ok((ck.config, w))
}

pub fn save_prompts(path: &Path, config: &ModelConfig, prompts: &PromptSet) -> Result<()> {
    save_checkpoint(path, config, &prompts.to_named())
}

pub fn load_prompts(path: &Path) -> Result<(ModelConfig, PromptSet)> {
    let ck = load_checkpoint(path)?;
    let p = PromptSet::from_named(&ck.config, ck.tensors)?;
    Ok((ck.config, p))
}
