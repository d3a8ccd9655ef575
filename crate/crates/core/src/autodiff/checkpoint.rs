//! Parameter checkpoint container.
//!
//! Layout: the 8-byte magic `TLOPCKPT`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then every parameter as little-endian `f64` values in
//! header order. Offsets in the header are byte offsets from the start of the
//! data section.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TLOPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// Model configuration the parameters belong to.
    pub config: serde_json::Value,
    /// Free-form provenance (effective training config, seed, step).
    #[serde(default)]
    pub meta: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

pub fn encode_checkpoint(
    params: &ParamStore,
    config: serde_json::Value,
    meta: serde_json::Value,
) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0u64;
    for (name, t) in params.iter() {
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 8 * t.len() as u64;
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        config,
        meta,
        params: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(
    bytes: &[u8],
) -> std::result::Result<(CheckpointHeader, ParamStore), String> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize
        .checked_add(hlen)
        .filter(|e| *e <= bytes.len())
        .ok_or("truncated header")?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..data_start]).map_err(|e| format!("bad header: {e}"))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            header.format_version
        ));
    }
    let data = &bytes[data_start..];
    let mut store = ParamStore::new();
    for e in &header.params {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 8 * n;
        if end > data.len() {
            return Err(format!("truncated data for parameter {}", e.name));
        }
        let values = data[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(e.shape.clone(), values).map_err(|e| e.to_string())?;
        store.add(e.name.clone(), t).map_err(|e| e.to_string())?;
    }
    Ok((header, store))
}

/// Writes atomically (temp file in the same directory, then rename).
pub fn save_checkpoint(
    path: &Path,
    params: &ParamStore,
    config: serde_json::Value,
    meta: serde_json::Value,
) -> Result<()> {
    let bytes = encode_checkpoint(params, config, meta)?;
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ParamStore)> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_checkpoint(&bytes).map_err(|msg| Error::file(path, msg))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::file(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::file(&tmp, e))?;
        f.sync_all().ok();
    }
    fs::rename(&tmp, path).map_err(|e| Error::file(path, e))?;
    Ok(())
}
