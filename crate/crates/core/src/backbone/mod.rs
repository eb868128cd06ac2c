//! Frozen upstream feature providers and the multi-level feature map f_c.
//!
//! A provider turns one preprocessed RGB frame into token grids tapped from
//! four layers. Grids are rearranged channel-major, 2× bilinearly upsampled
//! and concatenated into the all-purpose map f_c. Providers expose no
//! mutable state; nothing downstream can update them.

mod cache;
mod extractor;
mod synthetic;
mod vit;

pub use cache::{read_sequence_blob, write_sequence_blob, FeatureBlobHeader};
pub use extractor::{FeatureExtractor, ResizeMode};
pub use synthetic::{SyntheticProvider, SyntheticProviderConfig};
pub use vit::{VitAdapter, VitConfig, PROVIDER_NAME as LVM_PROVIDER};

use std::fmt;

use ndarray::{concatenate, s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Frame;
use crate::interp::resize_plane;

/// Which representation a feature map holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureTag {
    F1,
    F2,
    F3,
    F4,
    Fc,
    Fm,
    Fap,
    Fde,
}

impl FeatureTag {
    pub fn tapped(level: usize) -> Self {
        [FeatureTag::F1, FeatureTag::F2, FeatureTag::F3, FeatureTag::F4][level]
    }
}

impl fmt::Display for FeatureTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FeatureTag::F1 => "f1",
            FeatureTag::F2 => "f2",
            FeatureTag::F3 => "f3",
            FeatureTag::F4 => "f4",
            FeatureTag::Fc => "fc",
            FeatureTag::Fm => "fm",
            FeatureTag::Fap => "fap",
            FeatureTag::Fde => "fde",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for FeatureTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "f1" => FeatureTag::F1,
            "f2" => FeatureTag::F2,
            "f3" => FeatureTag::F3,
            "f4" => FeatureTag::F4,
            "fc" => FeatureTag::Fc,
            "fm" => FeatureTag::Fm,
            "fap" => FeatureTag::Fap,
            "fde" => FeatureTag::Fde,
            other => return Err(Error::InvalidArgument(format!("unknown feature tag `{other}`"))),
        })
    }
}

/// Channel-major C×H×W feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Array3<f64>,
    pub tag: FeatureTag,
}

impl FeatureMap {
    pub fn new(data: Array3<f64>, tag: FeatureTag) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature map {tag}")));
        }
        Ok(Self { data, tag })
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    Synthetic,
    LvmAdapter,
}

/// Geometry of the frozen upstream model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub provider: ProviderKind,
    pub num_blocks: usize,
    pub embed_dim: usize,
    pub patch_size: usize,
    pub input_hw: (usize, usize),
    pub tap_layers: Vec<usize>,
}

impl BackboneSpec {
    /// ViT-S/14 geometry at 448×224 input.
    pub fn reference() -> Self {
        Self {
            provider: ProviderKind::Synthetic,
            num_blocks: 12,
            embed_dim: 384,
            patch_size: 14,
            input_hw: (448, 224),
            tap_layers: select_tap_layers(12, 4).unwrap(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_hw;
        if self.patch_size == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by patch size {}",
                self.patch_size
            )));
        }
        if self.tap_layers.len() != 4 {
            return Err(Error::Config("exactly four tap layers are required".into()));
        }
        if self.tap_layers.windows(2).any(|p| p[0] >= p[1])
            || self.tap_layers[0] < 1
            || *self.tap_layers.last().unwrap() > self.num_blocks
        {
            return Err(Error::Config(format!(
                "tap layers {:?} must be strictly increasing within [1, {}]",
                self.tap_layers, self.num_blocks
            )));
        }
        Ok(())
    }

    /// Token grid (rows, cols).
    pub fn token_grid(&self) -> (usize, usize) {
        (self.input_hw.0 / self.patch_size, self.input_hw.1 / self.patch_size)
    }

    /// Grid of f_c after 2× upsampling.
    pub fn feature_grid(&self) -> (usize, usize) {
        let (h, w) = self.token_grid();
        (2 * h, 2 * w)
    }

    pub fn fc_channels(&self) -> usize {
        4 * self.embed_dim
    }
}

/// Last block of each of `k` equal partitions of `num_blocks`:
/// `ceil(i * num_blocks / k)` for `i = 1..=k`.
pub fn select_tap_layers(num_blocks: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || num_blocks < k {
        return Err(Error::InvalidArgument(format!(
            "cannot tap {k} layers from {num_blocks} blocks"
        )));
    }
    Ok((1..=k).map(|i| (i * num_blocks).div_ceil(k)).collect())
}

/// Token grid rows × cols × embed_dim, as returned by a provider.
pub type TokenGrid = Array3<f64>;

/// Frozen upstream model. Implementations must be deterministic and must
/// not change after construction.
pub trait TokenProvider: Send + Sync {
    fn name(&self) -> &str;

    /// One token grid per requested tap layer (1-based block indices), each
    /// rows × cols × embed_dim, for a frame already at the input size.
    fn tokens(&self, frame: &Frame, tap_layers: &[usize]) -> Result<Vec<TokenGrid>>;

    /// Digest of the frozen parameters.
    fn digest(&self) -> String;
}

/// Runs the provider and rearranges tokens into channel-major maps
/// tagged f1..f4.
pub fn extract_multilevel(
    frame: &Frame,
    spec: &BackboneSpec,
    provider: &dyn TokenProvider,
) -> Result<[FeatureMap; 4]> {
    let (h, w, c) = frame.dim();
    if (h, w) != spec.input_hw || c != 3 {
        return Err(Error::Shape(format!(
            "frame is {h}x{w}x{c}, provider expects {}x{}x3",
            spec.input_hw.0, spec.input_hw.1
        )));
    }
    let grids = provider.tokens(frame, &spec.tap_layers)?;
    let (gh, gw) = spec.token_grid();
    if grids.len() != 4 {
        return Err(Error::Shape(format!(
            "provider {} returned {} token grids, expected 4",
            provider.name(),
            grids.len()
        )));
    }
    let mut maps = Vec::with_capacity(4);
    for (level, grid) in grids.into_iter().enumerate() {
        if grid.dim() != (gh, gw, spec.embed_dim) {
            return Err(Error::Shape(format!(
                "provider {} grid {level} has shape {:?}, expected {:?}",
                provider.name(),
                grid.dim(),
                (gh, gw, spec.embed_dim)
            )));
        }
        let data = grid.permuted_axes([2, 0, 1]).as_standard_layout().to_owned();
        maps.push(FeatureMap::new(data, FeatureTag::tapped(level))?);
    }
    Ok(maps.try_into().unwrap())
}

/// 2× bilinear upsampling of every channel (half-pixel centers).
pub fn upsample2x(data: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = data.dim();
    let mut out = Array3::zeros((c, 2 * h, 2 * w));
    for ci in 0..c {
        let plane: Array2<f64> = resize_plane(data.index_axis(Axis(0), ci), 2 * h, 2 * w);
        out.index_axis_mut(Axis(0), ci).assign(&plane);
    }
    out
}

/// Upsamples f1..f4 and concatenates them along channels, in order.
pub fn upsample_concat(maps: &[FeatureMap]) -> Result<FeatureMap> {
    if maps.len() != 4 {
        return Err(Error::Shape(format!("expected 4 maps, got {}", maps.len())));
    }
    let dim = maps[0].data.dim();
    if let Some(bad) = maps.iter().find(|m| m.data.dim() != dim) {
        return Err(Error::Shape(format!(
            "map {} has shape {:?}, expected {:?}",
            bad.tag,
            bad.data.dim(),
            dim
        )));
    }
    let ups: Vec<Array3<f64>> = maps.iter().map(|m| upsample2x(&m.data)).collect();
    let views: Vec<_> = ups.iter().map(|u| u.view()).collect();
    FeatureMap::new(concatenate(Axis(0), &views).unwrap(), FeatureTag::Fc)
}

/// The f4 slice (last quarter of channels) of an f_c array.
pub fn f4_of(fc: &Array3<f64>) -> Array3<f64> {
    let c = fc.dim().0 / 4;
    fc.slice(s![3 * c.., .., ..]).to_owned()
}
