//! GRE + recognition head, wired by branch configuration.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Ix3};
use rand::Rng;

use crate::autograd::Tensor;
use crate::backbone::{
    FeatureExtractor, ProviderKind, SyntheticProvider, SyntheticProviderConfig, TokenProvider, VitAdapter,
};
use crate::error::{Error, Result};
use crate::gre::{Gre, GreConfig, GreOutput};
use crate::head::{Head, HeadConfig, HeadOptions, HeadOutput};
use crate::nn::{Forward, Mode, ParamStore};
use crate::train::TrainConfig;

pub struct ModelOutput {
    pub gre: GreOutput,
    pub head: HeadOutput,
}

/// Parameter-free architecture; weights live in a [`ParamStore`].
pub struct Model {
    pub gre: Gre,
    pub head: Head,
}

impl Model {
    /// Stream wiring: appearance + denoising feed the two-stream head; a
    /// single enabled branch feeds a one-stream head; with neither, f_m
    /// (f_c when the mask is off too) goes to the head directly.
    pub fn new(gre: GreConfig, head: HeadConfig) -> Result<Self> {
        let b = gre.branches;
        let expect_in = if b.is_bypass() { gre.fc_channels() } else { gre.channels };
        if head.in_channels != expect_in {
            return Err(Error::Config(format!(
                "head takes {} channels, GRE emits {expect_in}",
                head.in_channels
            )));
        }
        if head.two_stream != (b.appearance && b.denoising) {
            return Err(Error::Config("two-stream head needs both appearance and denoising branches".into()));
        }
        Ok(Self {
            gre: Gre::new(gre)?,
            head: Head::new(head)?,
        })
    }

    pub fn from_config(cfg: &TrainConfig, num_classes: usize) -> Result<Self> {
        Self::new(cfg.gre_config(), cfg.head_config(num_classes))
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.gre.init(store, rng);
        self.head.init(store, rng);
    }

    /// `fc` is (N·L)×4E×H×W grouped by sequence.
    pub fn forward(&self, f: &mut Forward, fc: &Tensor, frames_per_seq: usize, opts: HeadOptions) -> Result<ModelOutput> {
        let gre = self.gre.forward(f, fc)?;
        let (a, b) = match (gre.fap, gre.fde) {
            (Some(ap), Some(de)) => (ap, Some(de)),
            (Some(ap), None) => (ap, None),
            (None, Some(de)) => (de, None),
            (None, None) => (gre.fm, None),
        };
        let head = self.head.forward(f, a, b, frames_per_seq, opts)?;
        Ok(ModelOutput { gre, head })
    }

    /// Eval-mode P×D embedding of one sequence from all its frames
    /// (L×4E×H×W).
    pub fn embed(&self, store: &ParamStore, fc: &Tensor) -> Result<Array2<f64>> {
        let frames = fc.shape().first().copied().unwrap_or(0);
        let mut f = Forward::new(store, Mode::Eval, false);
        let out = self.forward(&mut f, fc, frames, HeadOptions::default())?;
        let e = f.graph.value(out.head.embedding);
        let e = e
            .view()
            .into_dimensionality::<Ix3>()
            .map_err(|err| Error::Shape(err.to_string()))?;
        Ok(e.index_axis(ndarray::Axis(0), 0).to_owned())
    }
}

/// Token provider named by the config.
pub fn build_provider(cfg: &TrainConfig) -> Result<Arc<dyn TokenProvider>> {
    match cfg.provider {
        ProviderKind::Synthetic => Ok(Arc::new(SyntheticProvider::new(SyntheticProviderConfig {
            embed_dim: cfg.backbone_dim,
            patch_size: cfg.patch_size,
            seed: cfg.provider_seed,
            noise: cfg.provider_noise,
            ..SyntheticProviderConfig::default()
        }))),
        ProviderKind::LvmAdapter => {
            let path = cfg.lvm_weights.as_deref().ok_or_else(|| Error::ProviderUnavailable {
                provider: crate::backbone::LVM_PROVIDER.into(),
                reason: "no weights file configured (lvm_weights)".into(),
            })?;
            let vit = VitAdapter::load(path)?;
            let vc = vit.config();
            if vc.embed_dim != cfg.backbone_dim || vc.patch_size != cfg.patch_size || vc.depth != cfg.backbone_blocks {
                return Err(Error::Config(format!(
                    "adapter weights are E={} patch={} depth={}, config says E={} patch={} depth={}",
                    vc.embed_dim, vc.patch_size, vc.depth, cfg.backbone_dim, cfg.patch_size, cfg.backbone_blocks
                )));
            }
            Ok(Arc::new(vit))
        }
    }
}

/// Feature extractor for the config, optionally backed by a disk cache.
pub fn build_extractor(cfg: &TrainConfig, cache_dir: Option<&Path>) -> Result<FeatureExtractor> {
    let ex = FeatureExtractor::new(build_provider(cfg)?, cfg.backbone_spec()?, cfg.resize_mode)?;
    Ok(match cache_dir {
        Some(d) => ex.with_cache_dir(d),
        None => ex,
    })
}
