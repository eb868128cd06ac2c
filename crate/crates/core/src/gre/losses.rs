//! Foreground-restricted regularizers on the denoising map.
//!
//! Both losses are computed per frame over that frame's foreground pixels
//! and averaged over the frames whose foreground is nonempty. With no
//! foreground anywhere the loss is 0.

use ndarray::{Array3, Array4, ArrayView2, Ix4, IxDyn};

use crate::autograd::{scalar_tensor, Graph, Tensor, Var};

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

fn clamp(i: usize, d: usize, n: usize) -> usize {
    (i + d).saturating_sub(1).min(n - 1)
}

/// Sobel response with replicate padding.
fn sobel(plane: ArrayView2<f64>, k: &[[f64; 3]; 3], y: usize, x: usize) -> f64 {
    let (h, w) = plane.dim();
    let mut acc = 0.0;
    for (dy, row) in k.iter().enumerate() {
        for (dx, &kv) in row.iter().enumerate() {
            if kv != 0.0 {
                acc += kv * plane[[clamp(y, dy, h), clamp(x, dx, w)]];
            }
        }
    }
    acc
}

fn frame_weights(fg: &Array3<f64>) -> (Vec<f64>, usize) {
    let counts: Vec<f64> = fg.outer_iter().map(|f| f.iter().filter(|&&v| v > 0.5).count() as f64).collect();
    let active = counts.iter().filter(|&&c| c > 0.0).count();
    (counts, active)
}

fn as4(t: &Tensor) -> Array4<f64> {
    t.view().into_dimensionality::<Ix4>().expect("expected N×C×H×W").as_standard_layout().to_owned()
}

/// Mean over channels × foreground pixels of |sobel_x| + |sobel_y|.
/// `fg` is N×H×W with entries in {0, 1}.
pub fn smoothness_loss(g: &mut Graph, fde: Var, fg: &Array3<f64>) -> Var {
    let x = as4(g.value(fde));
    let (n, c, h, w) = x.dim();
    assert_eq!(fg.dim(), (n, h, w), "smoothness_loss: foreground shape");
    let (counts, active) = frame_weights(fg);
    let mut total = 0.0;
    // d loss / d gx and d gy
    let mut gx_sign = Array4::<f64>::zeros((n, c, h, w));
    let mut gy_sign = Array4::<f64>::zeros((n, c, h, w));
    for ni in 0..n {
        if counts[ni] == 0.0 {
            continue;
        }
        let scale = 1.0 / (c as f64 * counts[ni] * active as f64);
        for ci in 0..c {
            let plane = x.slice(ndarray::s![ni, ci, .., ..]);
            for y in 0..h {
                for xx in 0..w {
                    if fg[[ni, y, xx]] <= 0.5 {
                        continue;
                    }
                    let gx = sobel(plane, &SOBEL_X, y, xx);
                    let gy = sobel(plane, &SOBEL_Y, y, xx);
                    total += (gx.abs() + gy.abs()) * scale;
                    gx_sign[[ni, ci, y, xx]] = gx.signum() * scale * (gx != 0.0) as u8 as f64;
                    gy_sign[[ni, ci, y, xx]] = gy.signum() * scale * (gy != 0.0) as u8 as f64;
                }
            }
        }
    }
    g.push(
        scalar_tensor(total),
        &[fde],
        Box::new(move |grad, _, _, _| {
            let go = grad.iter().next().copied().unwrap_or(0.0);
            let mut dx = Array4::<f64>::zeros((n, c, h, w));
            for ni in 0..n {
                for ci in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let sx = gx_sign[[ni, ci, y, xx]];
                            let sy = gy_sign[[ni, ci, y, xx]];
                            if sx == 0.0 && sy == 0.0 {
                                continue;
                            }
                            for dy in 0..3 {
                                for ddx in 0..3 {
                                    let k = SOBEL_X[dy][ddx] * sx + SOBEL_Y[dy][ddx] * sy;
                                    if k != 0.0 {
                                        dx[[ni, ci, clamp(y, dy, h), clamp(xx, ddx, w)]] += go * k;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(dx.into_dyn())]
        }),
    )
}

/// `log C + Σ_i p_i log p_i` with `p` the channel mass over foreground
/// pixels, normalized.
pub fn diversity_loss(g: &mut Graph, fde: Var, fg: &Array3<f64>) -> Var {
    let x = as4(g.value(fde));
    let (n, c, h, w) = x.dim();
    assert_eq!(fg.dim(), (n, h, w), "diversity_loss: foreground shape");
    let (counts, active) = frame_weights(fg);
    let log_c = (c as f64).ln();
    let mut total = 0.0;
    // d loss / d S[n, i] where S is the foreground channel mass
    let mut ds = ndarray::Array2::<f64>::zeros((n, c));
    for ni in 0..n {
        if counts[ni] == 0.0 {
            continue;
        }
        let mass: Vec<f64> = (0..c)
            .map(|ci| {
                let mut s = 0.0;
                for y in 0..h {
                    for xx in 0..w {
                        if fg[[ni, y, xx]] > 0.5 {
                            s += x[[ni, ci, y, xx]];
                        }
                    }
                }
                s
            })
            .collect();
        let t: f64 = mass.iter().sum();
        if t <= 0.0 {
            continue;
        }
        // Evaluated as Σ p log(C·p) on max-normalized masses so that equal
        // masses give exactly 0 and a single channel exactly log C.
        let top = mass.iter().copied().fold(0.0, f64::max);
        let r: Vec<f64> = mass.iter().map(|m| m / top).collect();
        let rs: f64 = r.iter().sum();
        let p: Vec<f64> = r.iter().map(|ri| ri / rs).collect();
        let kl: f64 = r
            .iter()
            .zip(&p)
            .map(|(&ri, &pi)| if ri > 0.0 { pi * (c as f64 * ri / rs).ln() } else { 0.0 })
            .sum();
        let plogp = kl - log_c;
        total += kl / active as f64;
        for ci in 0..c {
            let lp = if p[ci] > 0.0 { p[ci].ln() } else { f64::MIN_POSITIVE.ln() };
            ds[[ni, ci]] = (lp - plogp) / t / active as f64;
        }
    }
    let fg = fg.clone();
    g.push(
        scalar_tensor(total),
        &[fde],
        Box::new(move |grad, _, _, _| {
            let go = grad.iter().next().copied().unwrap_or(0.0);
            let dx = Array4::from_shape_fn((n, c, h, w), |(ni, ci, y, xx)| {
                if fg[[ni, y, xx]] > 0.5 {
                    go * ds[[ni, ci]]
                } else {
                    0.0
                }
            });
            vec![Some(dx.into_dyn())]
        }),
    )
}

/// Mean Shannon entropy (natural log) of the per-pixel channel
/// distribution over foreground pixels; all pixels when none is
/// foreground.
pub fn mean_channel_entropy(fde: &Tensor, fg: &Array3<f64>) -> f64 {
    let x = as4(fde);
    let (n, c, h, w) = x.dim();
    let any_fg = fg.iter().any(|&v| v > 0.5);
    let (mut sum, mut count) = (0.0, 0usize);
    for ni in 0..n {
        for y in 0..h {
            for xx in 0..w {
                if any_fg && fg[[ni, y, xx]] <= 0.5 {
                    continue;
                }
                let mut e = 0.0;
                for ci in 0..c {
                    let p = x[[ni, ci, y, xx]];
                    if p > 0.0 {
                        e -= p * p.ln();
                    }
                }
                sum += e;
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Single-frame smoothness of a C×H×W map.
pub fn smoothness(fde: &Array3<f64>, fg: ArrayView2<f64>) -> f64 {
    single(fde, fg, smoothness_loss)
}

/// Single-frame diversity of a C×H×W map.
pub fn diversity(fde: &Array3<f64>, fg: ArrayView2<f64>) -> f64 {
    single(fde, fg, diversity_loss)
}

fn single(fde: &Array3<f64>, fg: ArrayView2<f64>, f: fn(&mut Graph, Var, &Array3<f64>) -> Var) -> f64 {
    let mut g = Graph::new();
    let (c, h, w) = fde.dim();
    let v = g.constant(fde.clone().into_shape_with_order(IxDyn(&[1, c, h, w])).unwrap());
    let mask = fg.to_owned().insert_axis(ndarray::Axis(0));
    let out = f(&mut g, v, &mask);
    g.scalar(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check;
    use ndarray::{Array2, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Plain-loop reference: explicit replicate padding, no shared code.
    fn oracle_smoothness(f: &Array3<f64>, fg: &Array2<f64>) -> f64 {
        let (c, h, w) = f.dim();
        let at = |ch: usize, y: isize, x: isize| {
            let yy = y.clamp(0, h as isize - 1) as usize;
            let xx = x.clamp(0, w as isize - 1) as usize;
            f[[ch, yy, xx]]
        };
        let (mut s, mut n) = (0.0, 0.0);
        for ch in 0..c {
            for y in 0..h as isize {
                for x in 0..w as isize {
                    if fg[[y as usize, x as usize]] != 1.0 {
                        continue;
                    }
                    let gx = at(ch, y - 1, x + 1) + 2.0 * at(ch, y, x + 1) + at(ch, y + 1, x + 1)
                        - at(ch, y - 1, x - 1)
                        - 2.0 * at(ch, y, x - 1)
                        - at(ch, y + 1, x - 1);
                    let gy = at(ch, y + 1, x - 1) + 2.0 * at(ch, y + 1, x) + at(ch, y + 1, x + 1)
                        - at(ch, y - 1, x - 1)
                        - 2.0 * at(ch, y - 1, x)
                        - at(ch, y - 1, x + 1);
                    s += gx.abs() + gy.abs();
                    n += 1.0;
                }
            }
        }
        if n == 0.0 {
            0.0
        } else {
            s / n
        }
    }

    fn random_simplex(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
        let mut f = Array3::from_shape_fn((c, h, w), |_| rng.random::<f64>() * 3.0);
        f.mapv_inplace(f64::exp);
        let sums = f.sum_axis(ndarray::Axis(0));
        f / &sums.insert_axis(ndarray::Axis(0))
    }

    #[test]
    fn vertical_step_hand_convolution() {
        let f = Array3::from_shape_fn((1, 4, 4), |(_, _, x)| if x >= 2 { 1.0 } else { 0.0 });
        let fg = Array2::ones((4, 4));
        // columns 1 and 2 carry |sobel_x| = 4 on all four rows: 32 / 16
        assert_eq!(smoothness(&f, fg.view()), 2.0);
        assert_eq!(oracle_smoothness(&f, &fg), 2.0);
    }

    #[test]
    fn constant_map_is_smooth() {
        let f = Array3::from_elem((4, 8, 8), 0.25);
        assert_eq!(smoothness(&f, Array2::ones((8, 8)).view()), 0.0);
    }

    #[test]
    fn checkerboard_is_rougher_than_ramp() {
        let fg = Array2::ones((8, 8));
        // 2-pixel cells: a 1-pixel checkerboard lies in the Sobel null space
        // away from the border
        let checker = Array3::from_shape_fn((1, 8, 8), |(_, y, x)| ((y / 2 + x / 2) % 2) as f64);
        let fine = Array3::from_shape_fn((1, 8, 8), |(_, y, x)| ((y + x) % 2) as f64);
        let interior = Array2::from_shape_fn((8, 8), |(y, x)| ((1..7).contains(&y) && (1..7).contains(&x)) as u8 as f64);
        assert_eq!(oracle_smoothness(&fine, &interior), 0.0);
        let ramp = Array3::from_shape_fn((1, 8, 8), |(_, _, x)| x as f64 / 7.0);
        let (a, b) = (oracle_smoothness(&checker, &fg), oracle_smoothness(&ramp, &fg));
        assert!(a > b);
        assert!((smoothness(&checker, fg.view()) - a).abs() < 1e-12);
        assert!((smoothness(&ramp, fg.view()) - b).abs() < 1e-12);
    }

    #[test]
    fn smoothness_matches_oracle_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let c = rng.random_range(1..5);
            let f = random_simplex(&mut rng, c, 8, 8);
            let fg = Array2::from_shape_fn((8, 8), |_| if rng.random::<f64>() < 0.6 { 1.0 } else { 0.0 });
            let got = smoothness(&f, fg.view());
            assert!((got - oracle_smoothness(&f, &fg)).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_foreground_gives_zero() {
        let f = Array3::from_elem((3, 4, 4), 1.0 / 3.0);
        let fg = Array2::zeros((4, 4));
        assert_eq!(smoothness(&f, fg.view()), 0.0);
        assert_eq!(diversity(&f, fg.view()), 0.0);
    }

    #[test]
    fn diversity_examples() {
        let fg = Array2::ones((4, 4));
        let uniform = Array3::from_elem((16, 4, 4), 1.0 / 16.0);
        assert_eq!(diversity(&uniform, fg.view()), 0.0);
        let mut onehot = Array3::zeros((16, 4, 4));
        onehot.slice_mut(ndarray::s![3, .., ..]).fill(1.0);
        assert_eq!(diversity(&onehot, fg.view()), 16f64.ln());
        let mut two = Array3::zeros((2, 4, 4));
        two.slice_mut(ndarray::s![0, .., ..]).fill(0.25);
        two.slice_mut(ndarray::s![1, .., ..]).fill(0.75);
        let expected = 2f64.ln() + 0.25 * 0.25f64.ln() + 0.75 * 0.75f64.ln();
        assert!((diversity(&two, fg.view()) - expected).abs() < 1e-12);
        assert!((expected - 0.1308).abs() < 5e-5);
    }

    #[test]
    fn background_changes_do_not_move_diversity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_simplex(&mut rng, 4, 8, 8);
        let fg = Array2::from_shape_fn((8, 8), |(y, _)| if y < 4 { 1.0 } else { 0.0 });
        let mut g = f.clone();
        for ch in 0..4 {
            for y in 4..8 {
                for x in 0..8 {
                    g[[ch, y, x]] = if ch == 0 { 1.0 } else { 0.0 };
                }
            }
        }
        assert_eq!(diversity(&f, fg.view()), diversity(&g, fg.view()));
        // smoothness only changes through fg pixels whose window reaches row 4
        let mut h = f.clone();
        h.slice_mut(ndarray::s![.., 6.., ..]).assign(&g.slice(ndarray::s![.., 6.., ..]));
        assert_eq!(smoothness(&f, fg.view()), smoothness(&h, fg.view()));
    }

    #[test]
    fn frames_are_averaged() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_simplex(&mut rng, 3, 6, 6);
        let b = random_simplex(&mut rng, 3, 6, 6);
        let fg = Array2::from_shape_fn((6, 6), |(y, x)| ((y * 6 + x) % 3 != 0) as u8 as f64);
        let mut g = Graph::new();
        let both = ndarray::stack(ndarray::Axis(0), &[a.view(), b.view()]).unwrap().into_dyn();
        let v = g.constant(both);
        let masks = ndarray::stack(ndarray::Axis(0), &[fg.view(), Array2::zeros((6, 6)).view()]).unwrap();
        let s = smoothness_loss(&mut g, v, &masks);
        let d = diversity_loss(&mut g, v, &masks);
        // the empty second frame does not dilute the mean
        assert!((g.scalar(s) - smoothness(&a, fg.view())).abs() < 1e-12);
        assert!((g.scalar(d) - diversity(&a, fg.view())).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for case in 0..5 {
            let c = 2 + case % 3;
            let f = random_simplex(&mut rng, c, 8, 8).into_shape_with_order(IxDyn(&[1, c, 8, 8])).unwrap();
            let fg = Array3::from_shape_fn((1, 8, 8), |_| if rng.random::<f64>() < 0.7 { 1.0 } else { 0.0 });
            let e = check::relative_error(&f, 1e-5, |g, x| diversity_loss(g, x, &fg));
            assert!(e <= 1e-4, "diversity case {case}: {e}");
            let e = check::relative_error(&f, 1e-5, |g, x| smoothness_loss(g, x, &fg));
            assert!(e <= 1e-4, "smoothness case {case}: {e}");
        }
    }

    #[test]
    fn entropy_endpoints() {
        let fg = Array3::ones((1, 4, 4));
        let uniform = Tensor::from_elem(IxDyn(&[1, 8, 4, 4]), 0.125);
        assert!((mean_channel_entropy(&uniform, &fg) - 8f64.ln()).abs() < 1e-12);
        let mut onehot = Tensor::zeros(IxDyn(&[1, 8, 4, 4]));
        onehot.slice_mut(ndarray::s![0, 0, .., ..]).fill(1.0);
        assert_eq!(mean_channel_entropy(&onehot, &fg), 0.0);
    }
}
