//! Checkpoint container: an 8-byte little-endian header length, a JSON header
//! and the raw little-endian tensor payloads in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
    /// Free-form metadata (model config, vocabulary, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn save_checkpoint<T: Real>(path: &Path, store: &ParamStore<T>, step: u64, meta: serde_json::Value) -> Result<()> {
    let header = CheckpointHeader {
        dtype: T::DTYPE.to_string(),
        step,
        tensors: store
            .iter()
            .map(|(_, p)| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(8 + json.len() + store.num_elements() * T::BYTES);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, p) in store.iter() {
        for &x in p.value.data() {
            x.write_le(&mut buf);
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn split_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 8 {
        return Err(Error::Data("checkpoint shorter than its length prefix".into()));
    }
    let mut len = [0u8; 8];
    len.copy_from_slice(&bytes[..8]);
    let len = u64::from_le_bytes(len) as usize;
    if bytes.len() < 8 + len {
        return Err(Error::Data("checkpoint header truncated".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..8 + len])?;
    Ok((header, &bytes[8 + len..]))
}

pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path)?;
    Ok(split_header(&bytes)?.0)
}

/// Loads a checkpoint, converting the stored dtype to `T` if necessary.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(ParamStore<T>, CheckpointHeader)> {
    let bytes = fs::read(path)?;
    let (header, mut payload) = split_header(&bytes)?;
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::Data(format!("unsupported checkpoint dtype {other:?}"))),
    };
    let mut store = ParamStore::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        if payload.len() < n * width {
            return Err(Error::Data(format!("payload truncated at tensor {:?}", e.name)));
        }
        let data: Vec<T> = payload[..n * width]
            .chunks(width)
            .map(|c| {
                if width == 4 {
                    T::lit(f32::read_le(c) as f64)
                } else {
                    T::lit(f64::read_le(c))
                }
            })
            .collect();
        payload = &payload[n * width..];
        store.add(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
    }
    if !payload.is_empty() {
        return Err(Error::Data(format!(
            "{} trailing bytes after last tensor",
            payload.len()
        )));
    }
    Ok((store, header))
}
