//! Weight container: one line of JSON manifest, then a raw little-endian f32
//! blob. Manifest entries are `(name, dtype, shape, offset, length)` with
//! offsets relative to the start of the blob, in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, WeightStore};

const FORMAT: &str = "prunekit-weights";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

pub fn encode_weights(ws: &WeightStore<f32>) -> Vec<u8> {
    let mut blob = Vec::new();
    let mut tensors = Vec::with_capacity(ws.len());
    for (name, t) in ws.iter() {
        let offset = blob.len() as u64;
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(Entry {
            name: name.clone(),
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset,
            length: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        tensors,
    };
    let mut out = serde_json::to_vec(&manifest).expect("manifest serializes");
    out.push(b'\n');
    out.extend_from_slice(&blob);
    out
}

pub fn decode_weights(bytes: &[u8]) -> Result<WeightStore<f32>> {
    let nl = bytes.iter().position(|b| *b == b'\n').ok_or_else(|| Error::Format {
        offset: bytes.len() as u64,
        message: "weight container has no manifest terminator".into(),
    })?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Format {
        offset: 0,
        message: format!("weight manifest: {e}"),
    })?;
    if manifest.format != FORMAT || manifest.version != 1 {
        return Err(Error::Format {
            offset: 0,
            message: format!("unsupported container {} v{}", manifest.format, manifest.version),
        });
    }
    let base = nl as u64 + 1;
    let blob = &bytes[nl + 1..];
    let mut ws = WeightStore::new();
    let mut expected_offset = 0u64;
    for e in manifest.tensors {
        let numel: usize = e.shape.iter().product();
        if e.dtype != "f32" || e.length != 4 * numel as u64 || e.offset != expected_offset {
            return Err(Error::Format {
                offset: base + e.offset,
                message: format!("bad manifest entry for '{}'", e.name),
            });
        }
        let end = e.offset + e.length;
        if end > blob.len() as u64 {
            return Err(Error::Format {
                offset: base + blob.len() as u64,
                message: format!("blob truncated inside '{}'", e.name),
            });
        }
        let data = blob[e.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        ws.insert(e.name, Tensor::new(e.shape, data)?);
        expected_offset = end;
    }
    if expected_offset != blob.len() as u64 {
        return Err(Error::Format {
            offset: base + expected_offset,
            message: "trailing bytes after the last tensor".into(),
        });
    }
    Ok(ws)
}

pub fn save_weights(path: &Path, ws: &WeightStore<f32>) -> Result<()> {
    std::fs::write(path, encode_weights(ws)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<WeightStore<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}
