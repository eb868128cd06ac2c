//! Named-tensor archive: one JSON header line (free-form metadata plus a
//! manifest of tensors with name, shape, dtype, byte offset and length)
//! followed by the concatenated little-endian payloads.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

const FORMAT: &str = "gregait-tensors";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Serializes tensors (in the given order) with metadata.
pub fn encode<'a>(
    meta: &serde_json::Value,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    dtype: Dtype,
) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    for (name, t) in tensors {
        let offset = payload.len();
        for v in t.as_standard_layout().iter() {
            match dtype {
                Dtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                Dtype::F32 => payload.extend_from_slice(&(*v as f32).to_le_bytes()),
            }
        }
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype,
            offset,
            len: payload.len() - offset,
        });
    }
    let header = Header {
        format: FORMAT.into(),
        version: 1,
        meta: meta.clone(),
        tensors: entries,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn write<'a>(
    path: &Path,
    meta: &serde_json::Value,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    dtype: Dtype,
) -> Result<()> {
    let bytes = encode(meta, tensors, dtype)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Metadata and tensors in archive order.
pub type Decoded = (serde_json::Value, Vec<(String, Tensor)>);

pub fn decode(bytes: &[u8]) -> Result<Decoded> {
    let mut reader = BufReader::new(bytes);
    let mut line = String::new();
    reader
        .read_line(&mut line)
        .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
    let header: Header = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown archive format `{}`", header.format)));
    }
    let mut payload = Vec::new();
    reader
        .read_to_end(&mut payload)
        .map_err(|e| Error::Checkpoint(format!("unreadable payload: {e}")))?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let count: usize = e.shape.iter().product();
        if e.len != count * e.dtype.width() || e.offset + e.len > payload.len() {
            return Err(Error::Checkpoint(format!("tensor {} has an inconsistent extent", e.name)));
        }
        let raw = &payload[e.offset..e.offset + e.len];
        let values: Vec<f64> = match e.dtype {
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        let t = Tensor::from_shape_vec(IxDyn(&e.shape), values)
            .map_err(|err| Error::Checkpoint(format!("tensor {}: {err}", e.name)))?;
        tensors.push((e.name, t));
    }
    Ok((header.meta, tensors))
}

pub fn read(path: &Path) -> Result<Decoded> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Tensors keyed by name.
pub fn into_map(tensors: Vec<(String, Tensor)>) -> BTreeMap<String, Tensor> {
    tensors.into_iter().collect()
}
