//! Checkpoint container: an 8-byte little-endian header length, a UTF-8 JSON
//! header listing `{name, shape, dtype, byte_offset}` per tensor, then the raw
//! little-endian `f64` blobs. Offsets are relative to the end of the header.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Header {
    pub tensors: Vec<TensorEntry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode(tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            byte_offset: offset,
        });
        offset += 8 * t.len() as u64;
    }
    let header = serde_json::to_vec(&Header { tensors: entries })?;
    let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 8 {
        return Err(bad("file shorter than the length prefix"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body_start = 8usize
        .checked_add(hlen)
        .filter(|e| *e <= bytes.len())
        .ok_or_else(|| bad("header length exceeds file size"))?;
    let header: Header = serde_json::from_slice(&bytes[8..body_start])?;
    let body = &bytes[body_start..];
    let mut expected = 0u64;
    let mut out = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        if e.dtype != "f64" {
            return Err(bad(format!("`{}`: unsupported dtype {}", e.name, e.dtype)));
        }
        if e.byte_offset != expected {
            return Err(bad(format!(
                "`{}`: offset {} but expected {}",
                e.name, e.byte_offset, expected
            )));
        }
        let n = numel(&e.shape);
        let start = e.byte_offset as usize;
        let end = start + 8 * n;
        if end > body.len() {
            return Err(bad(format!("`{}`: blob runs past end of file", e.name)));
        }
        let data = body[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((e.name.clone(), Tensor::new(&e.shape, data)?));
        expected = end as u64;
    }
    if expected as usize != body.len() {
        return Err(bad(format!(
            "data section is {} bytes, header accounts for {}",
            body.len(),
            expected
        )));
    }
    Ok(out)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let tensors: Vec<(String, &Tensor)> = store.iter().map(|(n, p)| (n.clone(), &p.value)).collect();
    fs::write(path, encode(&tensors)?)?;
    Ok(())
}

/// Overwrite values in `store` from the checkpoint at `path`. The name set
/// and every shape must match exactly.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let tensors = decode(&fs::read(path)?)?;
    if tensors.len() != store.len() {
        return Err(bad(format!(
            "checkpoint has {} tensors, model has {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, t) in tensors {
        let slot = store
            .value_mut(&name)
            .map_err(|_| bad(format!("unknown tensor `{name}`")))?;
        if slot.shape() != t.shape() {
            return Err(bad(format!(
                "`{name}`: shape {:?} in file, {:?} in model",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(())
}
