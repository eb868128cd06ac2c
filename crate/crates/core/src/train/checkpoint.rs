//! Training state as one tensor archive: parameters, BN running statistics
//! and momentum buffers as f64 tensors, everything else in the JSON header.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::archive::{self, Dtype};
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::ingest::SamplerState;
use crate::nn::ParamStore;

const PARAM: &str = "param/";
const BUFFER: &str = "buffer/";
const MOMENTUM: &str = "momentum/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    iteration: usize,
    config: TrainConfig,
    config_hash: String,
    num_classes: usize,
    dataset: String,
    sampler: SamplerState,
    no_decay: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Number of completed training steps.
    pub iteration: usize,
    pub config: TrainConfig,
    pub num_classes: usize,
    /// Name of the training dataset.
    pub dataset: String,
    pub sampler: SamplerState,
    pub store: ParamStore,
    pub momentum: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = Header {
            iteration: self.iteration,
            config: self.config.clone(),
            config_hash: self.config_hash(),
            num_classes: self.num_classes,
            dataset: self.dataset.clone(),
            sampler: self.sampler,
            no_decay: self.store.no_decay_names().cloned().collect(),
        };
        let meta = serde_json::to_value(&header)?;
        let mut named: Vec<(String, &Tensor)> = Vec::new();
        named.extend(self.store.params().map(|(n, t)| (format!("{PARAM}{n}"), t)));
        named.extend(self.store.buffers().map(|(n, t)| (format!("{BUFFER}{n}"), t)));
        named.extend(self.momentum.iter().map(|(n, t)| (format!("{MOMENTUM}{n}"), t)));
        archive::encode(&meta, named.iter().map(|(n, t)| (n.as_str(), *t)), Dtype::F64)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (meta, tensors) = archive::decode(bytes)?;
        let header: Header =
            serde_json::from_value(meta).map_err(|e| Error::Checkpoint(format!("bad state header: {e}")))?;
        if header.config.hash() != header.config_hash {
            return Err(Error::Checkpoint("config hash does not match the stored config".into()));
        }
        let mut store = ParamStore::new();
        let mut momentum = BTreeMap::new();
        for (name, t) in tensors {
            if let Some(n) = name.strip_prefix(PARAM) {
                let decay = !header.no_decay.iter().any(|d| d == n);
                store.insert_param(n, t, decay);
            } else if let Some(n) = name.strip_prefix(BUFFER) {
                store.insert_buffer(n, t);
            } else if let Some(n) = name.strip_prefix(MOMENTUM) {
                momentum.insert(n.to_string(), t);
            } else {
                return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
            }
        }
        Ok(Self {
            iteration: header.iteration,
            config: header.config,
            num_classes: header.num_classes,
            dataset: header.dataset,
            sampler: header.sampler,
            store,
            momentum,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
