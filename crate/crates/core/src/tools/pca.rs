//! Pixel-wise PCA of feature maps and its RGB rendering.

use image::RgbImage;
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Default pixel budget of a fit.
pub const MAX_PCA_PIXELS: usize = 2_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct PcaBasis {
    /// Length C.
    pub mean: Array1<f64>,
    /// 3×C; rows are orthonormal unless padded (C < 3).
    pub directions: Array2<f64>,
    pub variances: [f64; 3],
    /// Fraction of the total variance along each direction.
    pub explained: [f64; 3],
    /// Direction carries no variance (rank-deficient data or padding).
    pub zero_variance: [bool; 3],
}

/// Fits on every pixel of the C×H×W maps, subsampling uniformly without
/// replacement to `max_pixels`.
pub fn fit_pca(maps: &[ArrayView3<f64>], max_pixels: usize, seed: u64) -> Result<PcaBasis> {
    let c = maps
        .first()
        .map(|m| m.dim().0)
        .ok_or_else(|| Error::InvalidArgument("no feature maps to fit".into()))?;
    if c == 0 || maps.iter().any(|m| m.dim().0 != c) {
        return Err(Error::Shape("feature maps must share a nonzero channel count".into()));
    }
    let sizes: Vec<usize> = maps.iter().map(|m| m.dim().1 * m.dim().2).collect();
    let total: usize = sizes.iter().sum();
    if total < 3 {
        return Err(Error::InvalidArgument(format!("PCA needs at least 3 pixels, got {total}")));
    }
    let chosen: Vec<usize> = if total > max_pixels.max(3) {
        let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(seed), total, max_pixels.max(3)).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..total).collect()
    };
    let pixel = |flat: usize| -> Array1<f64> {
        let mut rest = flat;
        for (m, &s) in maps.iter().zip(&sizes) {
            if rest < s {
                let w = m.dim().2;
                return m.slice(ndarray::s![.., rest / w, rest % w]).to_owned();
            }
            rest -= s;
        }
        unreachable!("pixel index within total")
    };
    let mut x = Array2::zeros((chosen.len(), c));
    for (row, &flat) in chosen.iter().enumerate() {
        x.row_mut(row).assign(&pixel(flat));
    }
    let n = x.nrows();
    let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
    let centered = &x - &mean;
    let cov = centered.t().dot(&centered) / (n - 1) as f64;

    let eig = SymmetricEigen::new(DMatrix::from_fn(c, c, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    // Rounding in the mean leaves variance near (ε·|x|)² on constant data.
    let magnitude = x.fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-20 * magnitude * magnitude;
    let kept = |v: f64| if v > tol { v } else { 0.0 };
    let trace: f64 = eig.eigenvalues.iter().map(|&v| kept(v)).sum();

    let mut directions = Array2::zeros((3, c));
    let mut variances = [0.0; 3];
    let mut explained = [0.0; 3];
    let mut zero_variance = [true; 3];
    for (k, &i) in order.iter().take(3).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        let lead = (0..c).fold(0, |best, j| if v[j].abs() > v[best].abs() { j } else { best });
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        directions.row_mut(k).assign(&Array1::from(v));
        let lambda = kept(eig.eigenvalues[i]);
        variances[k] = lambda;
        explained[k] = if trace > 0.0 { lambda / trace } else { 0.0 };
        zero_variance[k] = lambda == 0.0;
    }
    Ok(PcaBasis {
        mean,
        directions,
        variances,
        explained,
        zero_variance,
    })
}

/// Projects every pixel onto the three directions and min–max normalizes
/// each channel over the image; a constant channel renders as 128.
pub fn render_pca_rgb(f: ArrayView3<f64>, basis: &PcaBasis) -> Result<RgbImage> {
    let (c, h, w) = f.dim();
    if c != basis.mean.len() {
        return Err(Error::Shape(format!("map has {c} channels, basis {}", basis.mean.len())));
    }
    let mut planes = vec![Array2::<f64>::zeros((h, w)); 3];
    for y in 0..h {
        for x in 0..w {
            let px = &f.slice(ndarray::s![.., y, x]) - &basis.mean;
            for (k, plane) in planes.iter_mut().enumerate() {
                plane[[y, x]] = basis.directions.row(k).dot(&px);
            }
        }
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for (k, plane) in planes.iter().enumerate() {
        let lo = plane.fold(f64::INFINITY, |a, &b| a.min(b));
        let hi = plane.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let scale = lo.abs().max(hi.abs());
        let constant = hi - lo <= 1e-12 * scale;
        for y in 0..h {
            for x in 0..w {
                let v = if constant {
                    128
                } else {
                    ((plane[[y, x]] - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
                };
                img.get_pixel_mut(x as u32, y as u32)[k] = v;
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Cyclic Jacobi eigenvalue oracle for small symmetric matrices.
    fn jacobi(mut a: Array2<f64>) -> (Vec<f64>, Array2<f64>) {
        let n = a.nrows();
        let mut v = Array2::eye(n);
        for _ in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| a[[i, j]].powi(2)).sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[[p, q]].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let cs = 1.0 / (t * t + 1.0).sqrt();
                    let sn = t * cs;
                    for k in 0..n {
                        let (akp, akq) = (a[[k, p]], a[[k, q]]);
                        a[[k, p]] = cs * akp - sn * akq;
                        a[[k, q]] = sn * akp + cs * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                        a[[p, k]] = cs * apk - sn * aqk;
                        a[[q, k]] = sn * apk + cs * aqk;
                    }
                    for k in 0..n {
                        let (vkp, vkq) = (v[[k, p]], v[[k, q]]);
                        v[[k, p]] = cs * vkp - sn * vkq;
                        v[[k, q]] = sn * vkp + cs * vkq;
                    }
                }
            }
        }
        ((0..n).map(|i| a[[i, i]]).collect(), v)
    }

    fn random_map(seed: u64, c: usize, h: usize, w: usize) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scales: Vec<f64> = (0..c).map(|i| 1.0 + i as f64).collect();
        Array3::from_shape_fn((c, h, w), |(k, _, _)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scales[k] * z + rng.random_range(-0.1..0.1)
        })
    }

    #[test]
    fn diagonal_covariance_recovers_axes_in_order() {
        // ±2, ±1, ±0.5 on each axis separately: covariance ∝ diag(4, 1, 0.25).
        let mut pixels = Vec::new();
        for (axis, s) in [(0, 2.0), (1, 1.0), (2, 0.5)] {
            for sign in [-1.0, 1.0] {
                let mut p = [0.0; 3];
                p[axis] = sign * s;
                pixels.push(p);
            }
        }
        let map = Array3::from_shape_fn((3, 1, pixels.len()), |(c, _, x)| pixels[x][c]);
        let b = fit_pca(&[map.view()], MAX_PCA_PIXELS, 0).unwrap();
        assert!((&b.directions - &Array2::<f64>::eye(3)).iter().all(|v| v.abs() < 1e-12), "{:?}", b.directions);
        let ratio = [b.variances[0] / b.variances[2], b.variances[1] / b.variances[2]];
        assert!((ratio[0] - 16.0).abs() < 1e-9 && (ratio[1] - 4.0).abs() < 1e-9);
        assert!(b.zero_variance.iter().all(|z| !z));
    }

    #[test]
    fn agrees_with_jacobi_oracle() {
        for seed in 0..5 {
            let map = random_map(seed, 5, 6, 7);
            let b = fit_pca(&[map.view()], MAX_PCA_PIXELS, 0).unwrap();
            let flat = map.view().into_shape_with_order((5, 42)).unwrap().t().to_owned();
            let mean = flat.mean_axis(ndarray::Axis(0)).unwrap();
            let cen = &flat - &mean;
            let cov = cen.t().dot(&cen) / 41.0;
            let (vals, vecs) = jacobi(cov);
            let mut order: Vec<usize> = (0..5).collect();
            order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
            for k in 0..3 {
                assert!((vals[order[k]] - b.variances[k]).abs() < 1e-9 * vals[order[0]]);
                let dot = vecs.column(order[k]).dot(&b.directions.row(k));
                assert!((dot.abs() - 1.0).abs() < 1e-8, "seed {seed} k {k}: {dot}");
            }
        }
    }

    #[test]
    fn sign_rule_makes_largest_coordinate_positive() {
        let b = fit_pca(&[random_map(9, 4, 5, 5).view()], MAX_PCA_PIXELS, 0).unwrap();
        for row in b.directions.rows() {
            let lead = row.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(lead > 0.0);
        }
    }

    #[test]
    fn identical_pixels_are_rank_deficient() {
        let map = Array3::from_elem((4, 3, 3), 0.7);
        let b = fit_pca(&[map.view()], MAX_PCA_PIXELS, 0).unwrap();
        assert_eq!(b.zero_variance, [true; 3]);
        assert_eq!(b.explained, [0.0; 3]);
        let img = render_pca_rgb(map.view(), &b).unwrap();
        assert!(img.pixels().all(|p| p.0 == [128, 128, 128]));
    }

    #[test]
    fn fewer_than_three_channels_pad_directions() {
        let b = fit_pca(&[random_map(2, 2, 4, 4).view()], MAX_PCA_PIXELS, 0).unwrap();
        assert_eq!(b.zero_variance, [false, false, true]);
        assert!(b.directions.row(2).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn errors_on_tiny_or_mismatched_input() {
        let two = Array3::<f64>::zeros((3, 1, 2));
        assert!(fit_pca(&[two.view()], MAX_PCA_PIXELS, 0).is_err());
        let a = Array3::<f64>::zeros((3, 2, 2));
        let b = Array3::<f64>::zeros((4, 2, 2));
        assert!(fit_pca(&[a.view(), b.view()], MAX_PCA_PIXELS, 0).is_err());
        let basis = fit_pca(&[random_map(1, 3, 3, 3).view()], MAX_PCA_PIXELS, 0).unwrap();
        assert!(render_pca_rgb(b.view(), &basis).is_err());
    }

    #[test]
    fn subsampling_is_seeded() {
        let m = random_map(3, 4, 20, 20);
        let a = fit_pca(&[m.view()], 50, 7).unwrap();
        let b = fit_pca(&[m.view()], 50, 7).unwrap();
        let c = fit_pca(&[m.view()], 50, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.mean, c.mean);
    }

    #[test]
    fn zero_map_renders_mid_gray() {
        let basis = fit_pca(&[random_map(4, 3, 4, 4).view()], MAX_PCA_PIXELS, 0).unwrap();
        let img = render_pca_rgb(Array3::zeros((3, 4, 4)).view(), &basis).unwrap();
        assert!(img.pixels().all(|p| p.0 == [128, 128, 128]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn directions_are_orthonormal(seed in 0u64..10_000, c in 3usize..7) {
            let b = fit_pca(&[random_map(seed, c, 5, 6).view()], MAX_PCA_PIXELS, 0).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let d = b.directions.row(i).dot(&b.directions.row(j));
                    let want = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((d - want).abs() <= 1e-6);
                }
            }
        }

        #[test]
        fn rotation_rotates_the_subspace(seed in 0u64..10_000) {
            let c = 4;
            let map = random_map(seed, c, 6, 6);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABC);
            let raw = DMatrix::from_fn(c, c, |_, _| StandardNormal.sample(&mut rng));
            let q = raw.qr().q();
            let q = Array2::from_shape_fn((c, c), |(i, j)| q[(i, j)]);
            let flat = map.view().into_shape_with_order((c, 36)).unwrap().to_owned();
            let rotated = q.dot(&flat).into_shape_with_order((c, 6, 6)).unwrap();
            let a = fit_pca(&[map.view()], MAX_PCA_PIXELS, 0).unwrap();
            let b = fit_pca(&[rotated.view()], MAX_PCA_PIXELS, 0).unwrap();
            let pa = q.dot(&a.directions.t()).dot(&a.directions).dot(&q.t());
            let pb = b.directions.t().dot(&b.directions);
            prop_assert!((&pa - &pb).iter().all(|v| v.abs() <= 1e-6));
        }

        #[test]
        fn render_ignores_positive_rescaling(seed in 0u64..10_000, s in 0.01f64..100.0) {
            let map = random_map(seed, 4, 5, 5);
            let basis = fit_pca(&[map.view()], MAX_PCA_PIXELS, 0).unwrap();
            let a = render_pca_rgb(map.view(), &basis).unwrap();
            let b = render_pca_rgb((&map * s).view(), &basis).unwrap();
            // only rounding at exact half-levels can move a value
            prop_assert!(a.pixels().zip(b.pixels()).all(|(x, y)| (0..3).all(|k| x[k].abs_diff(y[k]) <= 1)));
        }
    }
}
