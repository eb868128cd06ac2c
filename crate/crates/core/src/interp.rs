//! Bilinear resampling with half-pixel sample centers (the
//! "align corners = false" convention): output pixel `o` samples source
//! coordinate `(o + 0.5) * in / out - 0.5`, clamped to the valid range.

use ndarray::{Array2, ArrayView2};

/// Source index pair and interpolation weight for every output position.
fn taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i0 == in_len - 1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

/// Resizes one plane to `out_h × out_w`.
pub fn resize_plane(src: ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    assert!(h > 0 && w > 0, "resize of an empty plane");
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let (y0, y1, fy) = ty[oy];
        let (x0, x1, fx) = tx[ox];
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}
