//! Versioned single-file container: magic line, JSON header, raw f32 tensors.
//!
//! Layout: `MAGIC\n`, header length as u64 LE, UTF-8 JSON header, then the
//! tensors back to back as little-endian f32. The header's `tensors` array
//! lists `{name, shape, offset}` with offsets in elements.

use std::fs;
use std::path::Path;

use cpmark_tensor::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes `header` (a JSON object) plus named tensors; replaces `path` atomically.
pub(crate) fn write(
    path: &Path,
    magic: &str,
    mut header: Map<String, Value>,
    tensors: &[(String, &Tensor<f32>)],
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        entries.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
    }
    header.insert("tensors".into(), serde_json::to_value(entries).expect("entries serialize"));
    let json = serde_json::to_vec(&Value::Object(header)).expect("header serializes");

    let mut bytes = Vec::with_capacity(magic.len() + 9 + json.len() + 4 * offset);
    bytes.extend_from_slice(magic.as_bytes());
    bytes.push(b'\n');
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads a container written by [`write`] with the same `magic`.
pub(crate) fn read(path: &Path, magic: &str) -> Result<(Map<String, Value>, Vec<(String, Tensor<f32>)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let head = magic.len() + 1;
    if bytes.len() < head + 8 || &bytes[..magic.len()] != magic.as_bytes() || bytes[magic.len()] != b'\n' {
        return Err(corrupt(path, format!("missing magic {magic:?}")));
    }
    let len = u64::from_le_bytes(bytes[head..head + 8].try_into().unwrap()) as usize;
    let json_end = head + 8 + len;
    if bytes.len() < json_end {
        return Err(corrupt(path, "truncated header"));
    }
    let mut header: Map<String, Value> = serde_json::from_slice(&bytes[head + 8..json_end])
        .map_err(|e| corrupt(path, format!("bad header: {e}")))?;
    let entries: Vec<Entry> = header
        .remove("tensors")
        .ok_or_else(|| corrupt(path, "header lacks a tensor index"))
        .and_then(|v| serde_json::from_value(v).map_err(|e| corrupt(path, format!("bad tensor index: {e}"))))?;
    let data = &bytes[json_end..];
    let mut tensors = Vec::with_capacity(entries.len());
    for e in entries {
        let n: usize = e.shape.iter().product();
        let (lo, hi) = (4 * e.offset, 4 * (e.offset + n));
        if hi > data.len() {
            return Err(corrupt(path, format!("tensor {} extends past end of file", e.name)));
        }
        let values = data[lo..hi]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((e.name, Tensor::new(e.shape, values)));
    }
    Ok((header, tensors))
}
