//! Visualization (PCA-RGB renderings of intermediate features, Grad-CAM
//! maps of the head) and ablation runs.

mod ablation;
mod cam;
mod pca;

pub use ablation::{run_ablation, run_variant, variant_config, AblationAxis, AblationData, AblationRow, AblationTable};
pub use cam::{cam_from_gradients, grad_cam, normalize_cam, ActivationMap, CamLayer};
pub use pca::{fit_pca, render_pca_rgb, PcaBasis, MAX_PCA_PIXELS};

use std::path::Path;

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array4, Ix4};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Forward, Mode, ParamStore};

/// Intermediate representation rendered by `viz-pca`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Fc,
    Fm,
    Fap,
    Fde,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 4] = [FeatureKind::Fc, FeatureKind::Fm, FeatureKind::Fap, FeatureKind::Fde];

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Fc => "f_c",
            FeatureKind::Fm => "f_m",
            FeatureKind::Fap => "f_ap",
            FeatureKind::Fde => "f_de",
        }
    }
}

fn as4(t: &Tensor) -> Result<Array4<f64>> {
    t.clone().into_dimensionality::<Ix4>().map_err(|e| Error::Shape(e.to_string()))
}

/// Eval-mode GRE representations of L frames (`fc` is L×4E×H×W). Branches
/// that are switched off are absent.
pub fn feature_maps(model: &Model, store: &ParamStore, fc: &Tensor) -> Result<Vec<(FeatureKind, Array4<f64>)>> {
    let mut f = Forward::new(store, Mode::Eval, false);
    let out = model.gre.forward(&mut f, fc)?;
    let mut maps = vec![(FeatureKind::Fc, as4(fc)?), (FeatureKind::Fm, as4(f.graph.value(out.fm))?)];
    if let Some(v) = out.fap {
        maps.push((FeatureKind::Fap, as4(f.graph.value(v))?));
    }
    if let Some(v) = out.fde {
        maps.push((FeatureKind::Fde, as4(f.graph.value(v))?));
    }
    Ok(maps)
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Writes a [0, 1] map as an 8-bit grayscale PNG.
pub fn save_gray(map: &Array2<f64>, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(map[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
