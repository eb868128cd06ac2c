//! Training: losses, optimizer, schedule, checkpoints and the step loop.

mod checkpoint;
mod config;
mod losses;
mod optim;

pub use checkpoint::Checkpoint;
pub use config::{lr_at, TrainConfig};
pub use losses::{ce_loss, combined, combined_loss, triplet_loss, LossComponents, LossWeights};
pub use optim::Sgd;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::backbone::FeatureExtractor;
use crate::error::{Error, Result};
use crate::head::HeadOptions;
use crate::ingest::{BatchEntry, DatasetManifest, FrameSource, Sampler};
use crate::model::Model;
use crate::nn::{Forward, Mode, ParamStore};

/// Offset separating the sampler stream from the initialization stream.
const SAMPLER_SEED_OFFSET: u64 = 0x5EED_0001;

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub lr: f64,
    #[serde(rename = "L_tri")]
    pub l_tri: f64,
    #[serde(rename = "L_ce")]
    pub l_ce: f64,
    #[serde(rename = "L_rec")]
    pub l_rec: f64,
    #[serde(rename = "L_smo")]
    pub l_smo: f64,
    #[serde(rename = "L_div")]
    pub l_div: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
}

impl LogRecord {
    pub fn components(&self) -> LossComponents {
        LossComponents {
            tri: self.l_tri,
            ce: self.l_ce,
            rec: self.l_rec,
            smo: self.l_smo,
            div: self.l_div,
        }
    }
}

/// Read-only inputs of a training run.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub manifest: &'a DatasetManifest,
    pub source: &'a dyn FrameSource,
    pub extractor: &'a FeatureExtractor,
}

impl TrainData<'_> {
    /// Stacks f_c of the chosen frames of every entry, sequence-major.
    pub fn batch_features(&self, batch: &[BatchEntry], parallel: bool) -> Result<Tensor> {
        let fetch = |b: &BatchEntry| {
            self.extractor
                .sequence_fc(self.manifest, self.source, &self.manifest.entries[b.entry], &b.frames)
        };
        let per_seq: Vec<Vec<Array3<f64>>> = if parallel {
            batch.par_iter().map(fetch).collect::<Result<_>>()?
        } else {
            batch.iter().map(fetch).collect::<Result<_>>()?
        };
        let views: Vec<_> = per_seq.iter().flatten().map(|a| a.view()).collect();
        if views.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let stacked = ndarray::stack(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(stacked.into_dyn())
    }
}

/// Where [`Trainer::run`] writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct RunOutputs {
    /// JSON-lines log, appended every `log_interval` iterations.
    pub log: Option<PathBuf>,
    /// Receives `ckpt_<iter>.bin` every `checkpoint_interval` iterations
    /// and `last.bin` at the end.
    pub checkpoint_dir: Option<PathBuf>,
}

pub struct Trainer {
    cfg: TrainConfig,
    model: Model,
    store: ParamStore,
    sgd: Sgd,
    sampler: Sampler,
    iteration: usize,
    dataset: String,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, manifest: &DatasetManifest) -> Result<Self> {
        cfg.validate()?;
        let sampler = Sampler::new(manifest, cfg.batch_spec()?, cfg.seed.wrapping_add(SAMPLER_SEED_OFFSET))?;
        let model = Model::from_config(&cfg, sampler.num_classes())?;
        let mut store = ParamStore::new();
        model.init(&mut store, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
        let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay, cfg.decay_bn_params);
        sgd.grad_clip = cfg.grad_clip;
        Ok(Self {
            cfg,
            model,
            store,
            sgd,
            sampler,
            iteration: 0,
            dataset: manifest.dataset_name.clone(),
        })
    }

    /// Resumes from a checkpoint; the manifest must yield the same classes.
    pub fn resume(ck: Checkpoint, manifest: &DatasetManifest) -> Result<Self> {
        let mut t = Self::new(ck.config.clone(), manifest)?;
        if t.sampler.num_classes() != ck.num_classes {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} classes, manifest train split has {}",
                ck.num_classes,
                t.sampler.num_classes()
            )));
        }
        let expected: Vec<_> = t.store.params().map(|(n, v)| (n.clone(), v.shape().to_vec())).collect();
        let found: Vec<_> = ck.store.params().map(|(n, v)| (n.clone(), v.shape().to_vec())).collect();
        if expected != found {
            return Err(Error::Checkpoint("parameter set does not match the configured model".into()));
        }
        t.store = ck.store;
        t.sgd.set_buffers(ck.momentum);
        t.sampler.restore(ck.sampler);
        t.iteration = ck.iteration;
        t.dataset = ck.dataset;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            iteration: self.iteration,
            config: self.cfg.clone(),
            num_classes: self.sampler.num_classes(),
            dataset: self.dataset.clone(),
            sampler: self.sampler.state(),
            store: self.store.clone(),
            momentum: self.sgd.buffers().clone(),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            gamma_rec: self.cfg.gamma_rec,
            gamma_smo: self.cfg.gamma_smo,
            gamma_div: self.cfg.gamma_div,
        }
    }

    /// One SGD step on the next sampled batch.
    pub fn step(&mut self, data: &TrainData) -> Result<LogRecord> {
        let batch = self.sampler.next_batch();
        let labels: Vec<usize> = batch.iter().map(|b| b.label).collect();
        let fc = data.batch_features(&batch, !self.cfg.deterministic)?;
        let lr = lr_at(self.iteration, &self.cfg);
        let weights = self.weights();

        let mut f = Forward::new(&self.store, Mode::Train, true);
        let opts = HeadOptions { logits: true, watch_taps: false };
        let out = self.model.forward(&mut f, &fc, self.cfg.batch_l, opts)?;
        let logits = out.head.logits.expect("logits requested");
        let tri = triplet_loss(&mut f.graph, out.head.embedding, &labels, self.cfg.margin)?;
        let ce = ce_loss(&mut f.graph, logits, &labels)?;
        let parts = [tri, ce, out.gre.l_rec, out.gre.l_smo, out.gre.l_div];
        let total = combined(&mut f.graph, parts, &weights)?;
        let g = &f.graph;
        let record = LogRecord {
            iter: self.iteration,
            lr,
            l_tri: g.scalar(tri),
            l_ce: g.scalar(ce),
            l_rec: g.scalar(out.gre.l_rec),
            l_smo: g.scalar(out.gre.l_smo),
            l_div: g.scalar(out.gre.l_div),
            l_total: g.scalar(total),
        };
        let grads = g.backward(total);
        let grads: BTreeMap<String, Tensor> = f
            .bound_params()
            .filter_map(|(name, v)| grads.get(*v).map(|t| (name.clone(), t.clone())))
            .collect();
        let bn = f.take_bn_updates();
        drop(f);

        self.sgd.step(&mut self.store, &grads, lr)?;
        self.store.apply_bn_updates(&bn);
        self.iteration += 1;
        Ok(record)
    }

    /// Steps until `until` iterations are complete (capped at
    /// `total_iters`). Returns the record of every step.
    pub fn run(&mut self, data: &TrainData, until: usize, outputs: &RunOutputs) -> Result<Vec<LogRecord>> {
        let until = until.min(self.cfg.total_iters);
        let mut log = match &outputs.log {
            Some(p) => Some(
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)
                    .map_err(|e| Error::io(p, e))?,
            ),
            None => None,
        };
        let mut records = Vec::new();
        while self.iteration < until {
            let r = self.step(data)?;
            if let (Some(file), Some(path)) = (log.as_mut(), outputs.log.as_deref()) {
                if r.iter % self.cfg.log_interval == 0 || self.iteration == until {
                    writeln!(file, "{}", serde_json::to_string(&r)?).map_err(|e| Error::io(path, e))?;
                }
            }
            if let Some(dir) = &outputs.checkpoint_dir {
                if self.cfg.checkpoint_interval > 0 && self.iteration % self.cfg.checkpoint_interval == 0 {
                    self.checkpoint().save(&dir.join(format!("ckpt_{:06}.bin", self.iteration)))?;
                }
            }
            records.push(r);
        }
        if let Some(dir) = &outputs.checkpoint_dir {
            self.checkpoint().save(&dir.join("last.bin"))?;
        }
        Ok(records)
    }
}

/// Model and weights restored from a checkpoint file, for inference.
pub fn load_model(path: &Path) -> Result<(Checkpoint, Model)> {
    let ck = Checkpoint::load(path)?;
    let model = Model::from_config(&ck.config, ck.num_classes)?;
    for (name, _) in ck.store.params() {
        if !name.starts_with("gre.") && !name.starts_with("head.") {
            return Err(Error::Checkpoint(format!("unexpected parameter {name}")));
        }
    }
    Ok((ck, model))
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
