use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, Split};
use crate::error::{Error, Result};

/// Identities per batch, sequences per identity, frames per sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub p: usize,
    pub k: usize,
    pub l: usize,
}

impl BatchSpec {
    pub fn new(p: usize, k: usize, l: usize) -> Result<Self> {
        let spec = Self { p, k, l };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.k < 2 {
            return Err(Error::Sampler(format!(
                "batch needs p >= 2 and k >= 2 for triplets, got p={} k={}",
                self.p, self.k
            )));
        }
        if self.l < 1 {
            return Err(Error::Sampler("l must be >= 1".into()));
        }
        Ok(())
    }

    pub fn sequences(&self) -> usize {
        self.p * self.k
    }
}

/// One drawn sequence: manifest entry index, class label, chosen frames.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchEntry {
    pub entry: usize,
    pub label: usize,
    pub frames: Vec<usize>,
}

/// Serializable sampler position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub seed: u64,
    pub word_pos: u128,
}

/// Identity-balanced sampler over the train split.
pub struct Sampler {
    spec: BatchSpec,
    seed: u64,
    rng: ChaCha8Rng,
    /// class label -> train entry indices
    by_label: Vec<Vec<usize>>,
    frame_counts: Vec<usize>,
}

/// Maps sorted train subject ids to class indices.
pub fn class_labels(manifest: &DatasetManifest) -> BTreeMap<String, usize> {
    manifest
        .subjects(Split::Train)
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, i))
        .collect()
}

impl Sampler {
    pub fn new(manifest: &DatasetManifest, spec: BatchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let labels = class_labels(manifest);
        let mut by_label = vec![Vec::new(); labels.len()];
        for (i, e) in manifest.entries.iter().enumerate() {
            if e.split == Split::Train {
                by_label[labels[&e.subject_id]].push(i);
            }
        }
        if by_label.len() < spec.p {
            return Err(Error::Sampler(format!(
                "train split has {} identities, batch needs p = {}",
                by_label.len(),
                spec.p
            )));
        }
        Ok(Self {
            spec,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            by_label,
            frame_counts: manifest.entries.iter().map(|e| e.frame_count()).collect(),
        })
    }

    pub fn spec(&self) -> BatchSpec {
        self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.by_label.len()
    }

    pub fn state(&self) -> SamplerState {
        SamplerState {
            seed: self.seed,
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn restore(&mut self, state: SamplerState) {
        self.seed = state.seed;
        self.rng = ChaCha8Rng::seed_from_u64(state.seed);
        self.rng.set_word_pos(state.word_pos);
    }

    /// Draws p identities, k sequences each (with replacement only when an
    /// identity has fewer than k), and l frames per sequence.
    pub fn next_batch(&mut self) -> Vec<BatchEntry> {
        let BatchSpec { p, k, l } = self.spec;
        let mut labels: Vec<usize> = (0..self.by_label.len()).collect();
        labels.shuffle(&mut self.rng);
        labels.truncate(p);
        labels.sort_unstable();
        let mut out = Vec::with_capacity(p * k);
        for label in labels {
            let pool = &self.by_label[label];
            let chosen: Vec<usize> = if pool.len() >= k {
                pool.choose_multiple(&mut self.rng, k).copied().collect()
            } else {
                (0..k).map(|_| *pool.choose(&mut self.rng).unwrap()).collect()
            };
            for entry in chosen {
                let frames = spaced_frames(self.frame_counts[entry], l, &mut self.rng);
                out.push(BatchEntry { entry, label, frames });
            }
        }
        out
    }
}

/// `l` ordered frame indices spaced uniformly over `n` frames, with a
/// random phase. Repeats indices when `n < l`.
pub fn spaced_frames(n: usize, l: usize, rng: &mut impl Rng) -> Vec<usize> {
    let step = n as f64 / l as f64;
    let offset = rng.random::<f64>() * step;
    (0..l)
        .map(|i| ((offset + i as f64 * step).floor() as usize).min(n - 1))
        .collect()
}

/// Draws a single batch with a fresh sampler.
pub fn sample_batch(manifest: &DatasetManifest, spec: BatchSpec, seed: u64) -> Result<Vec<BatchEntry>> {
    Ok(Sampler::new(manifest, spec, seed)?.next_batch())
}
