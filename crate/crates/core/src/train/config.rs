//! Flat training configuration. Every constant of the pipeline is a key;
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{select_tap_layers, BackboneSpec, ProviderKind, ResizeMode};
use crate::error::{Error, Result};
use crate::gre::{Branches, GreConfig};
use crate::head::{HeadConfig, HeadKind};
use crate::ingest::BatchSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub provider: ProviderKind,
    /// Weights archive of the lvm-adapter provider.
    pub lvm_weights: Option<PathBuf>,
    pub provider_seed: u64,
    pub provider_noise: f64,
    pub input_h: usize,
    pub input_w: usize,
    pub patch_size: usize,
    pub backbone_dim: usize,
    pub backbone_blocks: usize,
    pub resize_mode: ResizeMode,

    pub gre_channels: usize,
    pub gre_hidden: usize,
    pub use_mask: bool,
    pub use_appearance: bool,
    pub use_denoising: bool,

    pub head_widths: [usize; 4],
    pub parts: usize,
    pub embedding_dim: usize,
    pub fuse_reduction: usize,
    pub head_kind: HeadKind,
    pub head_normalize: bool,

    pub margin: f64,
    pub gamma_rec: f64,
    pub gamma_smo: f64,
    pub gamma_div: f64,

    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_bn_params: bool,
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub total_iters: usize,
    pub batch_p: usize,
    pub batch_k: usize,
    pub batch_l: usize,
    /// Global gradient-norm clip; none by default.
    pub grad_clip: Option<f64>,

    pub seed: u64,
    pub log_interval: usize,
    pub checkpoint_interval: usize,
    pub deterministic: bool,
}

impl TrainConfig {
    /// Full-scale recipe: ViT-S/14 geometry, C = 16, GaitBase head, 40k
    /// iterations.
    pub fn reference() -> Self {
        Self {
            provider: ProviderKind::LvmAdapter,
            lvm_weights: None,
            provider_seed: 0,
            provider_noise: 0.05,
            input_h: 448,
            input_w: 224,
            patch_size: 14,
            backbone_dim: 384,
            backbone_blocks: 12,
            resize_mode: ResizeMode::PadAndResize,
            gre_channels: 16,
            gre_hidden: 256,
            use_mask: true,
            use_appearance: true,
            use_denoising: true,
            head_widths: [64, 64, 128, 256],
            parts: 16,
            embedding_dim: 256,
            fuse_reduction: 4,
            head_kind: HeadKind::Base,
            head_normalize: true,
            margin: 0.2,
            gamma_rec: 1.0,
            gamma_smo: 0.01,
            gamma_div: 5.0,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_bn_params: false,
            milestones: vec![15_000, 25_000, 30_000, 35_000],
            lr_decay: 0.1,
            total_iters: 40_000,
            batch_p: 8,
            batch_k: 8,
            batch_l: 8,
            grad_clip: None,
            seed: 0,
            log_interval: 100,
            checkpoint_interval: 5_000,
            deterministic: false,
        }
    }

    /// Desk-scale recipe for the synthetic benchmark on a CPU.
    pub fn desk() -> Self {
        Self {
            provider: ProviderKind::Synthetic,
            input_h: 64,
            input_w: 32,
            patch_size: 4,
            backbone_dim: 8,
            backbone_blocks: 4,
            gre_channels: 8,
            gre_hidden: 32,
            head_widths: [8, 16, 32, 32],
            parts: 8,
            embedding_dim: 32,
            milestones: vec![90, 135],
            total_iters: 150,
            batch_p: 8,
            batch_k: 4,
            batch_l: 4,
            log_interval: 10,
            checkpoint_interval: 50,
            ..Self::reference()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) || self.milestones.iter().any(|&m| m >= self.total_iters) {
            return Err(Error::Config(format!(
                "milestones {:?} must increase strictly and stay below total_iters {}",
                self.milestones, self.total_iters
            )));
        }
        for (name, v) in [("gamma_rec", self.gamma_rec), ("gamma_smo", self.gamma_smo), ("gamma_div", self.gamma_div)] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be ≥ 0")));
            }
        }
        if !(self.lr >= 0.0) || !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) || !(self.margin >= 0.0) {
            return Err(Error::Config("lr, momentum, weight_decay and margin must be ≥ 0".into()));
        }
        if self.log_interval == 0 {
            return Err(Error::Config("log_interval must be positive".into()));
        }
        self.backbone_spec()?.validate()?;
        self.batch_spec()?;
        self.gre_config().validate()?;
        Ok(())
    }

    pub fn backbone_spec(&self) -> Result<BackboneSpec> {
        Ok(BackboneSpec {
            provider: self.provider,
            num_blocks: self.backbone_blocks,
            embed_dim: self.backbone_dim,
            patch_size: self.patch_size,
            input_hw: (self.input_h, self.input_w),
            tap_layers: select_tap_layers(self.backbone_blocks, 4)?,
        })
    }

    pub fn batch_spec(&self) -> Result<BatchSpec> {
        BatchSpec::new(self.batch_p, self.batch_k, self.batch_l)
    }

    pub fn branches(&self) -> Branches {
        Branches {
            mask: self.use_mask,
            appearance: self.use_appearance,
            denoising: self.use_denoising,
        }
    }

    pub fn gre_config(&self) -> GreConfig {
        GreConfig {
            embed_dim: self.backbone_dim,
            channels: self.gre_channels,
            hidden: self.gre_hidden,
            branches: self.branches(),
        }
    }

    pub fn head_config(&self, num_classes: usize) -> HeadConfig {
        let b = self.branches();
        HeadConfig {
            in_channels: if b.is_bypass() { 4 * self.backbone_dim } else { self.gre_channels },
            widths: self.head_widths,
            parts: self.parts,
            embed_dim: self.embedding_dim,
            num_classes,
            fuse_reduction: self.fuse_reduction,
            two_stream: b.appearance && b.denoising,
            normalize: self.head_normalize,
            kind: self.head_kind,
        }
    }

    /// sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(serde_json::to_vec(&v).unwrap()))
    }
}

/// Learning rate at `iteration`: base · decay^(milestones passed).
pub fn lr_at(iteration: usize, cfg: &TrainConfig) -> f64 {
    let passed = cfg.milestones.iter().filter(|&&m| m <= iteration).count();
    cfg.lr * cfg.lr_decay.powi(passed as i32)
}
