//! Frame → f_c with memoization.
//!
//! Features are rounded to f32 on first computation and every caller sees
//! the rounded values, whether they came from memory, disk or a fresh run.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use ndarray::{Array3, Array4, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cache::{read_sequence_blob, write_sequence_blob, FeatureBlobHeader};
use super::{extract_multilevel, upsample_concat, BackboneSpec, FeatureMap, FeatureTag, TokenProvider};
use crate::error::{Error, Result};
use crate::ingest::{pad_and_resize, stretch_resize, DatasetManifest, Frame, FrameSource, SequenceRecord};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResizeMode {
    #[default]
    PadAndResize,
    Stretch,
}

type Memo = HashMap<(String, usize), Arc<Array3<f32>>>;

pub struct FeatureExtractor {
    provider: Arc<dyn TokenProvider>,
    spec: BackboneSpec,
    resize: ResizeMode,
    memo: Mutex<Memo>,
    cache_dir: Option<PathBuf>,
}

fn round_f32(a: &Array3<f64>) -> Array3<f32> {
    a.mapv(|v| v as f32)
}

fn widen(a: &Array3<f32>) -> Array3<f64> {
    a.mapv(|v| v as f64)
}

impl FeatureExtractor {
    pub fn new(provider: Arc<dyn TokenProvider>, spec: BackboneSpec, resize: ResizeMode) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            provider,
            spec,
            resize,
            memo: Mutex::new(HashMap::new()),
            cache_dir: None,
        })
    }

    /// Persist whole-sequence feature blobs under `dir`.
    pub fn with_cache_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn provider(&self) -> &dyn TokenProvider {
        self.provider.as_ref()
    }

    pub fn resize_mode(&self) -> ResizeMode {
        self.resize
    }

    pub fn preprocess(&self, frame: &Frame) -> Result<Frame> {
        let (h, w) = self.spec.input_hw;
        match self.resize {
            ResizeMode::PadAndResize => pad_and_resize(frame, h, w),
            ResizeMode::Stretch => stretch_resize(frame, h, w),
        }
    }

    /// f1..f4 of a raw frame, unrounded.
    pub fn levels(&self, frame: &Frame) -> Result<[FeatureMap; 4]> {
        extract_multilevel(&self.preprocess(frame)?, &self.spec, self.provider.as_ref())
    }

    /// f_c of a raw frame, unrounded and not memoized.
    pub fn fc(&self, frame: &Frame) -> Result<FeatureMap> {
        upsample_concat(&self.levels(frame)?)
    }

    fn compute(&self, manifest: &DatasetManifest, source: &dyn FrameSource, record: &SequenceRecord, index: usize) -> Result<Array3<f32>> {
        let frame = source.frame(manifest, record, index)?;
        Ok(round_f32(&self.fc(&frame)?.data))
    }

    /// f_c of one frame of a record, memoized.
    pub fn frame_fc(
        &self,
        manifest: &DatasetManifest,
        source: &dyn FrameSource,
        record: &SequenceRecord,
        index: usize,
    ) -> Result<Array3<f64>> {
        Ok(self.sequence_fc(manifest, source, record, &[index])?.remove(0))
    }

    /// f_c of the given frames of a record, computed in parallel.
    pub fn sequence_fc(
        &self,
        manifest: &DatasetManifest,
        source: &dyn FrameSource,
        record: &SequenceRecord,
        indices: &[usize],
    ) -> Result<Vec<Array3<f64>>> {
        let key = record.key();
        if let Some(&bad) = indices.iter().find(|&&i| i >= record.frame_count()) {
            return Err(Error::InvalidArgument(format!("{key} has no frame {bad}")));
        }
        let missing: Vec<usize> = {
            let memo = self.memo.lock().unwrap();
            let mut m: Vec<usize> = indices
                .iter()
                .copied()
                .filter(|&i| !memo.contains_key(&(key.clone(), i)))
                .collect();
            m.sort_unstable();
            m.dedup();
            m
        };
        if !missing.is_empty() {
            if let Some(dir) = &self.cache_dir {
                self.fill_from_disk(dir, manifest, source, record)?;
            } else {
                let computed: Vec<(usize, Array3<f32>)> = missing
                    .par_iter()
                    .map(|&i| self.compute(manifest, source, record, i).map(|f| (i, f)))
                    .collect::<Result<_>>()?;
                let mut memo = self.memo.lock().unwrap();
                for (i, f) in computed {
                    memo.insert((key.clone(), i), Arc::new(f));
                }
            }
        }
        let memo = self.memo.lock().unwrap();
        Ok(indices.iter().map(|&i| widen(&memo[&(key.clone(), i)])).collect())
    }

    fn blob_path(dir: &Path, key: &str) -> PathBuf {
        let name: String = key
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        dir.join(format!("{name}.fc.bin"))
    }

    /// Loads (or computes and writes) the whole sequence blob.
    fn fill_from_disk(&self, dir: &Path, manifest: &DatasetManifest, source: &dyn FrameSource, record: &SequenceRecord) -> Result<()> {
        let key = record.key();
        let path = Self::blob_path(dir, &key);
        let digest = self.provider.digest();
        let n = record.frame_count();
        let (gh, gw) = self.spec.feature_grid();
        let shape = vec![n, self.spec.fc_channels(), gh, gw];
        let cached = match read_sequence_blob(&path) {
            Ok((h, data)) if h.provider == digest && h.key == key && h.shape == shape => Some(data),
            _ => None,
        };
        let data = match cached {
            Some(d) => d,
            None => {
                let frames: Vec<Array3<f32>> = (0..n)
                    .into_par_iter()
                    .map(|i| self.compute(manifest, source, record, i))
                    .collect::<Result<_>>()?;
                let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
                let data: Array4<f32> = ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
                let header = FeatureBlobHeader {
                    shape,
                    tag: FeatureTag::Fc,
                    key: key.clone(),
                    provider: digest,
                };
                write_sequence_blob(&path, &header, &data)?;
                data
            }
        };
        let mut memo = self.memo.lock().unwrap();
        for (i, f) in data.axis_iter(Axis(0)).enumerate() {
            memo.insert((key.clone(), i), Arc::new(f.to_owned()));
        }
        Ok(())
    }

    /// Drops all memoized features.
    pub fn clear(&self) {
        self.memo.lock().unwrap().clear();
    }

    pub fn memoized(&self) -> usize {
        self.memo.lock().unwrap().len()
    }
}
