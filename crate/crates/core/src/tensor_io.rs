//! Raw tensor payloads: a little-endian f32 `.bin` file plus a JSON manifest
//! describing each tensor's name, shape and byte offset.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: usize,
    /// Element count.
    pub length: usize,
}

/// A tensor held in single precision, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Manifest path paired with a payload: `model.bin` → `model.manifest.json`.
pub fn manifest_path(bin: &Path) -> PathBuf {
    let stem = bin.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    bin.with_file_name(format!("{stem}.manifest.json"))
}

/// Serialize tensors into a payload buffer and the matching manifest entries.
pub fn encode(tensors: &[StoredTensor]) -> (Vec<u8>, Vec<TensorEntry>) {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for t in tensors {
        entries.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            dtype: "f32".into(),
            offset: payload.len(),
            length: t.data.len(),
        });
        for v in &t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    (payload, entries)
}

/// Decode tensors, validating that every entry is well-formed, in bounds and non-overlapping.
pub fn decode(payload: &[u8], entries: &[TensorEntry]) -> Result<Vec<StoredTensor>> {
    let mut spans: Vec<(usize, usize)> = Vec::with_capacity(entries.len());
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        if e.dtype != "f32" {
            return Err(Error::Corrupt(format!("tensor {} has unsupported dtype {}", e.name, e.dtype)));
        }
        let expected: usize = e.shape.iter().product();
        if expected != e.length {
            return Err(Error::Corrupt(format!(
                "tensor {} shape {:?} disagrees with length {}",
                e.name, e.shape, e.length
            )));
        }
        let end = e
            .offset
            .checked_add(e.length * 4)
            .ok_or_else(|| Error::Corrupt(format!("tensor {} offset overflow", e.name)))?;
        if end > payload.len() {
            return Err(Error::Corrupt(format!(
                "tensor {} spans bytes {}..{} but payload has {} bytes",
                e.name,
                e.offset,
                end,
                payload.len()
            )));
        }
        spans.push((e.offset, end));
        let data = payload[e.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push(StoredTensor {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data,
        });
    }
    spans.sort_unstable();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::Corrupt("overlapping tensors in manifest".into()));
        }
    }
    Ok(out)
}

#[derive(Deserialize)]
struct TensorsOnly {
    tensors: Vec<TensorEntry>,
}

/// Read a standalone weight file (e.g. exported backbone weights).
pub fn read_weight_file(bin: &Path) -> Result<Vec<StoredTensor>> {
    let manifest = manifest_path(bin);
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let parsed: TensorsOnly = serde_json::from_str(&text)?;
    let payload = fs::read(bin).map_err(|e| Error::io(bin, e))?;
    decode(&payload, &parsed.tensors)
}

/// Write a standalone weight file with a `{"tensors": [...]}` manifest.
pub fn write_weight_file(bin: &Path, tensors: &[StoredTensor]) -> Result<()> {
    let (payload, entries) = encode(tensors);
    fs::write(bin, payload).map_err(|e| Error::io(bin, e))?;
    let manifest = manifest_path(bin);
    let text = serde_json::to_string_pretty(&serde_json::json!({ "tensors": entries }))?;
    fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))
}
