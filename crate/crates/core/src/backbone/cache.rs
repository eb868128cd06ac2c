//! On-disk cache of frozen features: one file per sequence holding a JSON
//! header line followed by little-endian f32 values in C order.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::{Array4, IxDyn};
use serde::{Deserialize, Serialize};

use super::FeatureTag;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureBlobHeader {
    /// frames × C × H × W
    pub shape: Vec<usize>,
    pub tag: FeatureTag,
    pub key: String,
    /// Digest of the provider that produced the features.
    pub provider: String,
}

pub fn write_sequence_blob(path: &Path, header: &FeatureBlobHeader, data: &Array4<f32>) -> Result<()> {
    if header.shape != data.shape() {
        return Err(Error::Shape(format!(
            "header shape {:?} does not match data {:?}",
            header.shape,
            data.shape()
        )));
    }
    let mut buf = serde_json::to_vec(header)?;
    buf.push(b'\n');
    buf.reserve(data.len() * 4);
    for v in data.as_standard_layout().iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_sequence_blob(path: &Path) -> Result<(FeatureBlobHeader, Array4<f32>)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(f);
    let mut line = String::new();
    reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header: FeatureBlobHeader = serde_json::from_str(line.trim_end())?;
    if header.shape.len() != 4 {
        return Err(Error::Shape(format!("feature blob shape {:?} is not 4-d", header.shape)));
    }
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let n: usize = header.shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::Shape(format!(
            "{}: payload has {} bytes, expected {}",
            path.display(),
            bytes.len(),
            n * 4
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let data = ndarray::ArrayD::from_shape_vec(IxDyn(&header.shape), values)
        .map_err(|e| Error::Shape(e.to_string()))?
        .into_dimensionality()
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok((header, data))
}
