use std::path::Path;

use ndarray::{s, Array3, Axis};

use super::manifest::{DatasetManifest, SequenceRecord};
use crate::error::{Error, Result};
use crate::interp::resize_plane;

/// RGB frame, H×W×3, values in [0, 1].
pub type Frame = Array3<f64>;

/// Reference upstream input resolution.
pub const TARGET_H: usize = 448;
pub const TARGET_W: usize = 224;

pub fn load_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::Image {
            path: path.to_path_buf(),
            message: "empty image".into(),
        });
    }
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

/// Writes a [0, 1] frame as an 8-bit PNG.
pub fn save_frame(frame: &Frame, path: &Path) -> Result<()> {
    let (h, w, _) = frame.dim();
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (frame[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Zero padding applied on each side by [`pad_to_ratio`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

/// Smallest symmetric zero padding that brings `h × w` to the aspect ratio
/// `target_h : target_w`. Odd remainders go to the bottom / right.
pub fn padding_for(h: usize, w: usize, target_h: usize, target_w: usize) -> Padding {
    let mut p = Padding {
        top: 0,
        bottom: 0,
        left: 0,
        right: 0,
    };
    // compare h / w with target_h / target_w in integers
    if h * target_w > w * target_h {
        let new_w = (h * target_w).div_ceil(target_h);
        let extra = new_w - w;
        p.left = extra / 2;
        p.right = extra - p.left;
    } else if h * target_w < w * target_h {
        let new_h = (w * target_h).div_ceil(target_w);
        let extra = new_h - h;
        p.top = extra / 2;
        p.bottom = extra - p.top;
    }
    p
}

pub fn pad_to_ratio(image: &Frame, target_h: usize, target_w: usize) -> Frame {
    let (h, w, c) = image.dim();
    let p = padding_for(h, w, target_h, target_w);
    let mut out = Array3::zeros((h + p.top + p.bottom, w + p.left + p.right, c));
    out.slice_mut(s![p.top..p.top + h, p.left..p.left + w, ..]).assign(image);
    out
}

/// Bilinear resize of every channel to `out_h × out_w`.
pub fn resize(image: &Frame, out_h: usize, out_w: usize) -> Frame {
    let (_, _, c) = image.dim();
    let mut out = Array3::zeros((out_h, out_w, c));
    for ci in 0..c {
        let plane = resize_plane(image.index_axis(Axis(2), ci), out_h, out_w);
        out.index_axis_mut(Axis(2), ci).assign(&plane);
    }
    out
}

/// Aspect-preserving resize: zero-pad to the target ratio, then resize.
pub fn pad_and_resize(image: &Frame, target_h: usize, target_w: usize) -> Result<Frame> {
    let (h, w, _) = image.dim();
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("cannot resize a {h}x{w} image")));
    }
    Ok(resize(&pad_to_ratio(image, target_h, target_w), target_h, target_w))
}

/// Plain (anisotropic) resize, the baseline Pad-and-Resize is compared to.
pub fn stretch_resize(image: &Frame, target_h: usize, target_w: usize) -> Result<Frame> {
    let (h, w, _) = image.dim();
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("cannot resize a {h}x{w} image")));
    }
    Ok(resize(image, target_h, target_w))
}

/// Supplies decoded frames for manifest records.
pub trait FrameSource: Sync {
    fn frame(&self, manifest: &DatasetManifest, record: &SequenceRecord, index: usize) -> Result<Frame>;
}

/// Decodes frame files from disk.
#[derive(Clone, Copy, Debug, Default)]
pub struct DiskFrames;

impl FrameSource for DiskFrames {
    fn frame(&self, manifest: &DatasetManifest, record: &SequenceRecord, index: usize) -> Result<Frame> {
        let path = record.frame_paths.get(index).ok_or_else(|| {
            Error::InvalidArgument(format!("{} has no frame {index}", record.key()))
        })?;
        load_frame(&manifest.resolve(path))
    }
}

/// A record together with its decoded frames.
#[derive(Clone, Debug)]
pub struct SequenceSample {
    pub record: SequenceRecord,
    pub frames: Vec<Frame>,
}
