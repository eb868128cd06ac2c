//! Gradient-weighted activation maps of the head's early layers, with the
//! squared embedding norm as the target scalar.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Axis, Ix4};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::head::{HeadOptions, TAP_B1_AP, TAP_B1_DE, TAP_FUSED};
use crate::interp::resize_plane;
use crate::model::Model;
use crate::nn::{Forward, Mode, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CamLayer {
    #[serde(rename = "head-B1-ap")]
    B1Ap,
    #[serde(rename = "head-B1-de")]
    B1De,
    #[serde(rename = "head-fused")]
    Fused,
}

impl CamLayer {
    pub const ALL: [CamLayer; 3] = [CamLayer::B1Ap, CamLayer::B1De, CamLayer::Fused];

    pub fn tag(self) -> &'static str {
        match self {
            CamLayer::B1Ap => TAP_B1_AP,
            CamLayer::B1De => TAP_B1_DE,
            CamLayer::Fused => TAP_FUSED,
        }
    }
}

impl fmt::Display for CamLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for CamLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|l| l.tag() == s).ok_or_else(|| {
            let known: Vec<_> = Self::ALL.iter().map(|l| l.tag()).collect();
            Error::InvalidArgument(format!("unknown layer `{s}`; expected one of {}", known.join(", ")))
        })
    }
}

/// Per-frame saliency at frame resolution, normalized to [0, 1] over the
/// whole sequence.
#[derive(Clone, Debug)]
pub struct ActivationMap {
    pub layer: CamLayer,
    /// L×H×W.
    pub maps: Array3<f64>,
    /// Largest value before normalization; 0 means no saliency anywhere.
    pub raw_max: f64,
}

/// Rectified gradient-weighted sum over channels of an L×C×h×w activation:
/// channel weights are the spatial means of the gradient. Nonnegative.
pub fn cam_from_gradients(activation: &Tensor, gradient: &Tensor) -> Result<Array3<f64>> {
    if activation.shape() != gradient.shape() || activation.ndim() != 4 {
        return Err(Error::Shape(format!(
            "activation {:?} and gradient {:?} must be equal 4-d shapes",
            activation.shape(),
            gradient.shape()
        )));
    }
    let a = activation.view().into_dimensionality::<Ix4>().unwrap();
    let g = gradient.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = a.dim();
    let mut cam = Array3::zeros((n, h, w));
    for i in 0..n {
        for k in 0..c {
            let weight = g.slice(ndarray::s![i, k, .., ..]).mean().unwrap_or(0.0);
            if weight != 0.0 {
                cam.index_axis_mut(Axis(0), i)
                    .scaled_add(weight, &a.slice(ndarray::s![i, k, .., ..]));
            }
        }
    }
    cam.mapv_inplace(|v: f64| v.max(0.0));
    Ok(cam)
}

/// Bilinear upsampling of every frame to `frame_hw`, then min–max
/// normalization over the sequence (an all-constant map becomes 0).
pub fn normalize_cam(cam: &Array3<f64>, frame_hw: (usize, usize)) -> Array3<f64> {
    let (n, _, _) = cam.dim();
    let mut up = Array3::zeros((n, frame_hw.0, frame_hw.1));
    for i in 0..n {
        up.index_axis_mut(Axis(0), i)
            .assign(&resize_plane(cam.index_axis(Axis(0), i), frame_hw.0, frame_hw.1));
    }
    let lo = up.fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = up.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if hi > lo {
        up.mapv_inplace(|v| (v - lo) / (hi - lo));
    } else {
        up.fill(0.0);
    }
    up
}

/// Grad-CAM of one sequence (`fc` is L×4E×H×W) at `layer`.
pub fn grad_cam(
    model: &Model,
    store: &ParamStore,
    fc: &Tensor,
    layer: CamLayer,
    frame_hw: (usize, usize),
) -> Result<ActivationMap> {
    let frames = fc.shape().first().copied().unwrap_or(0);
    if frames == 0 {
        return Err(Error::InvalidArgument("grad_cam needs a nonempty sequence".into()));
    }
    let mut f = Forward::new(store, Mode::Eval, false);
    let opts = HeadOptions {
        logits: false,
        watch_taps: true,
    };
    let out = model.forward(&mut f, fc, frames, opts)?;
    let tap = f
        .tapped(layer.tag())
        .ok_or_else(|| Error::InvalidArgument(format!("layer {layer} does not exist in this model")))?;
    let e = out.head.embedding;
    let sq = f.graph.mul(e, e);
    let target = f.graph.sum(sq);
    let grads = f.graph.backward(target);
    let activation = f.graph.value(tap);
    let gradient = grads.get_or_zeros(tap, activation);
    let raw = cam_from_gradients(activation, &gradient)?;
    let raw_max = raw.fold(0.0f64, |m, &v| m.max(v));
    Ok(ActivationMap {
        layer,
        maps: normalize_cam(&raw, frame_hw),
        raw_max,
    })
}
