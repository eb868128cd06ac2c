//! Sequence embeddings and their cache file: per record one JSON metadata
//! line followed by the little-endian f32 P×D payload.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GaitEmbedding {
    pub subject_id: String,
    pub condition: String,
    pub view: String,
    pub seq: String,
    /// P×D
    pub parts: Array2<f32>,
}

#[derive(Serialize, Deserialize)]
struct RecordHeader {
    id: String,
    condition: String,
    view: String,
    seq: String,
    parts: usize,
    dim: usize,
}

impl GaitEmbedding {
    pub fn new(subject_id: String, condition: String, view: String, seq: String, parts: Array2<f32>) -> Result<Self> {
        if parts.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding of {subject_id}/{condition}/{view}/{seq}")));
        }
        Ok(Self {
            subject_id,
            condition,
            view,
            seq,
            parts,
        })
    }

    pub fn key(&self) -> String {
        format!("{}/{}/{}/{}", self.subject_id, self.condition, self.view, self.seq)
    }

    /// Mean over parts of the Euclidean distance between part vectors.
    pub fn distance(&self, other: &GaitEmbedding) -> Result<f64> {
        if self.parts.dim() != other.parts.dim() {
            return Err(Error::Shape(format!(
                "embeddings {:?} and {:?} differ in shape",
                self.parts.dim(),
                other.parts.dim()
            )));
        }
        let p = self.parts.nrows();
        let mut total = 0.0;
        for (a, b) in self.parts.rows().into_iter().zip(other.parts.rows()) {
            let d2: f64 = a.iter().zip(b.iter()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
            total += d2.sqrt();
        }
        Ok(total / p as f64)
    }
}

pub fn write_embedding_cache(path: &Path, embeddings: &[GaitEmbedding]) -> Result<()> {
    let mut buf = Vec::new();
    for e in embeddings {
        let (p, d) = e.parts.dim();
        let header = RecordHeader {
            id: e.subject_id.clone(),
            condition: e.condition.clone(),
            view: e.view.clone(),
            seq: e.seq.clone(),
            parts: p,
            dim: d,
        };
        serde_json::to_writer(&mut buf, &header)?;
        buf.push(b'\n');
        for v in e.parts.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_embedding_cache(path: &Path) -> Result<Vec<GaitEmbedding>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(f);
    let mut out = Vec::new();
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            break;
        }
        let h: RecordHeader = serde_json::from_str(line.trim_end())?;
        let mut bytes = vec![0u8; h.parts * h.dim * 4];
        reader.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
        let values: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let parts = Array2::from_shape_vec((h.parts, h.dim), values).map_err(|e| Error::Shape(e.to_string()))?;
        out.push(GaitEmbedding::new(h.id, h.condition, h.view, h.seq, parts)?);
    }
    Ok(out)
}
