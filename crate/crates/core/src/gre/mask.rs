//! Foreground selection and mask post-processing on plain arrays.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::error::{Error, Result};

/// Centred Gaussian weight with σ = extent / 4 per axis and peak 1 at the
/// grid centre.
pub fn center_weights(h: usize, w: usize) -> Array2<f64> {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sy, sx) = (h as f64 / 4.0, w as f64 / 4.0);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let dy = (y as f64 - cy) / sy;
        let dx = (x as f64 - cx) / sx;
        (-0.5 * (dy * dy + dx * dx)).exp()
    })
}

/// Centre score of every channel of a C×H×W map. An all-zero channel
/// scores 0.
pub fn center_scores(m: ArrayView3<f64>) -> Vec<f64> {
    let (_, h, w) = m.dim();
    let weights = center_weights(h, w);
    m.axis_iter(Axis(0))
        .map(|ch| {
            let mass = ch.sum();
            if mass == 0.0 {
                0.0
            } else {
                (&ch * &weights).sum() / mass
            }
        })
        .collect()
}

/// Channel whose mass lies closest to the centre; ties go to the lower
/// index.
pub fn select_foreground_channel(m: ArrayView3<f64>) -> usize {
    let scores = center_scores(m);
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Threshold at 0.5 (inclusive), then a 3×3 closing. The grid is padded by
/// one zero pixel on every side before dilating; the erosion reads the
/// dilated padded grid, so a full grid closes to itself.
pub fn binarize_close(prob: ArrayView2<f64>) -> Array2<f64> {
    let (h, w) = prob.dim();
    let bin = prob.mapv(|p| if p >= 0.5 { 1u8 } else { 0 });
    // dilated grid over the padded domain, index (y + 1, x + 1)
    let mut dil = Array2::<u8>::zeros((h + 2, w + 2));
    for py in 0..h + 2 {
        for px in 0..w + 2 {
            let mut on = 0;
            'win: for dy in 0..3 {
                for dx in 0..3 {
                    // source (py + dy - 2, px + dx - 2) in original coordinates
                    let (y, x) = (py + dy, px + dx);
                    if y < 2 || x < 2 || y - 2 >= h || x - 2 >= w {
                        continue;
                    }
                    if bin[[y - 2, x - 2]] == 1 {
                        on = 1;
                        break 'win;
                    }
                }
            }
            dil[[py, px]] = on;
        }
    }
    Array2::from_shape_fn((h, w), |(y, x)| {
        let all = (0..3).all(|dy| (0..3).all(|dx| dil[[y + dy, x + dx]] == 1));
        if all {
            1.0
        } else {
            0.0
        }
    })
}

/// f_c ⊙ mask, broadcast over channels.
pub fn apply_mask(fc: &Array3<f64>, binary: &Array2<f64>) -> Result<Array3<f64>> {
    let (_, h, w) = fc.dim();
    if binary.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "mask {:?} does not match feature grid {:?}",
            binary.dim(),
            (h, w)
        )));
    }
    Ok(fc * &binary.view().insert_axis(Axis(0)))
}
