//! The `mope-ckpt-1` checkpoint format, shared by backbone and expert
//! pool artifacts.
//!
//! A checkpoint is a pair of files: `<path>.json` (manifest: format
//! version, a `kind` tag, arbitrary metadata, and a named parameter list
//! with shapes and byte offsets) and `<path>.bin` (raw little-endian f32
//! payload in manifest order).

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::{Path, PathBuf};

pub const FORMAT_VERSION: &str = "mope-ckpt-1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub kind: String,
    pub meta: Value,
    pub params: Vec<ParamEntry>,
}

fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn payload_path(path: &Path) -> PathBuf {
    path.with_extension("bin")
}

/// Write a checkpoint. `params` order defines the payload layout.
pub fn save(path: &Path, kind: &str, meta: Value, params: &[(String, &Tensor)]) -> Result<()> {
    let mut entries = Vec::with_capacity(params.len());
    let mut payload: Vec<u8> = Vec::new();
    for (name, tensor) in params {
        entries.push(ParamEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT_VERSION.to_string(),
        kind: kind.to_string(),
        meta,
        params: entries,
    };
    std::fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)?)?;
    std::fs::write(payload_path(path), payload)?;
    Ok(())
}

/// Load a checkpoint, checking version, kind, and payload sizes.
pub fn load(path: &Path, expect_kind: &str) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    let mtext = std::fs::read_to_string(manifest_path(path))
        .map_err(|e| Error::format(format!("read {}: {e}", manifest_path(path).display())))?;
    let manifest: Manifest = serde_json::from_str(&mtext)
        .map_err(|e| Error::format(format!("manifest: {e}")))?;
    if manifest.format != FORMAT_VERSION {
        return Err(Error::format(format!(
            "checkpoint version {:?}, expected {FORMAT_VERSION:?}",
            manifest.format
        )));
    }
    if manifest.kind != expect_kind {
        return Err(Error::format(format!(
            "checkpoint kind {:?}, expected {expect_kind:?}",
            manifest.kind
        )));
    }
    let payload = std::fs::read(payload_path(path))
        .map_err(|e| Error::format(format!("read {}: {e}", payload_path(path).display())))?;

    let mut tensors = Vec::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel * 4;
        if end > payload.len() {
            return Err(Error::format(format!(
                "payload truncated: {:?} needs bytes [{start}, {end}) of {}",
                entry.name,
                payload.len()
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for chunk in payload[start..end].chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        tensors.push((
            entry.name.clone(),
            Tensor::new(entry.shape.clone(), data)
                .map_err(|e| Error::format(format!("{}: {e}", entry.name)))?,
        ));
    }
    Ok((manifest, tensors))
}

/// Byte content of both checkpoint files, for frozen-backbone checks.
pub fn fingerprint(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = std::fs::read(manifest_path(path))?;
    bytes.extend(std::fs::read(payload_path(path))?);
    Ok(bytes)
}
