use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis, Ix2, Ix3, Ix4, IxDyn, Zip};

use super::{scalar_tensor, Graph, Tensor, Var};

/// Statistics used by [`Graph::batch_norm`].
#[derive(Clone, Debug)]
pub enum BnStats {
    /// Normalize with the statistics of the current batch.
    Batch { eps: f64 },
    /// Normalize with fixed (running) statistics.
    Fixed {
        mean: Array1<f64>,
        var: Array1<f64>,
        eps: f64,
    },
}

pub struct BnOutput {
    pub out: Var,
    /// Batch mean and unbiased batch variance, present in `Batch` mode.
    pub batch_stats: Option<(Array1<f64>, Array1<f64>)>,
}

fn view4(t: &Tensor) -> ndarray::ArrayView4<'_, f64> {
    t.view().into_dimensionality::<Ix4>().expect("expected a 4-d tensor")
}

fn view3(t: &Tensor) -> ArrayView3<'_, f64> {
    t.view().into_dimensionality::<Ix3>().expect("expected a 3-d tensor")
}

fn view2(t: &Tensor) -> ndarray::ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("expected a 2-d tensor")
}

/// Views a tensor with channels on axis 1 as (N, C, S).
fn as_ncs(t: &Tensor) -> ArrayView3<'_, f64> {
    let sh = t.shape();
    let n = sh[0];
    let c = sh[1];
    let rest: usize = sh[2..].iter().product();
    t.view()
        .into_shape_with_order((n, c, rest))
        .expect("tensor must be contiguous")
}

fn contiguous(t: &Tensor) -> Tensor {
    if t.is_standard_layout() {
        t.clone()
    } else {
        t.as_standard_layout().to_owned()
    }
}

/// Geometry of one convolution: input N×C×H×W, kernel k, stride, padding.
#[derive(Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Input index of output index `o` for kernel offset `kk`, if inside.
    fn src(&self, o: usize, kk: usize, len: usize) -> Option<usize> {
        let i = (o * self.stride + kk) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < len).then_some(i as usize)
    }

    /// Output index range whose input index (offset `kk`) lies in `0..len`.
    fn valid(&self, kk: usize, len: usize, out: usize) -> std::ops::Range<usize> {
        let lo = self.pad.saturating_sub(kk).div_ceil(self.stride);
        let hi = if len + self.pad > kk {
            ((len + self.pad - kk - 1) / self.stride + 1).min(out)
        } else {
            0
        };
        lo..hi.max(lo)
    }
}

/// Unfolds a standard-layout N×C×H×W batch into a (C·k·k)×(N·Ho·Wo) column
/// matrix; column `ni·Ho·Wo + oy·Wo + ox`.
fn im2col(x: &[f64], g: ConvGeom) -> Array2<f64> {
    let ConvGeom { n, c, h, w, k, ho, wo, .. } = g;
    let width = n * ho * wo;
    let mut cols = vec![0.0; c * k * k * width];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * width..(row + 1) * width];
                for ni in 0..n {
                    let plane = &x[(ni * c + ci) * h * w..][..h * w];
                    for oy in 0..ho {
                        let Some(iy) = g.src(oy, ky, h) else { continue };
                        let src = &plane[iy * w..][..w];
                        let out = &mut dst[(ni * ho + oy) * wo..][..wo];
                        let r = g.valid(kx, w, wo);
                        if r.is_empty() {
                            continue;
                        }
                        let first = r.start * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            out[r.clone()].copy_from_slice(&src[first..first + r.len()]);
                        } else {
                            for (j, o) in out[r].iter_mut().enumerate() {
                                *o = src[first + j * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * k * k, width), cols).unwrap()
}

/// Adjoint of [`im2col`]: scatters columns back into an N×C×H×W batch.
fn col2im(cols: &Array2<f64>, g: ConvGeom) -> Vec<f64> {
    let ConvGeom { n, c, h, w, k, ho, wo, .. } = g;
    let cols = cols.as_standard_layout();
    let cols = cols.as_slice().unwrap();
    let width = n * ho * wo;
    let mut x = vec![0.0; n * c * h * w];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * width..(row + 1) * width];
                for ni in 0..n {
                    let plane = &mut x[(ni * c + ci) * h * w..][..h * w];
                    for oy in 0..ho {
                        let Some(iy) = g.src(oy, ky, h) else { continue };
                        let dst = &mut plane[iy * w..][..w];
                        let vals = &src[(ni * ho + oy) * wo..][..wo];
                        let r = g.valid(kx, w, wo);
                        if r.is_empty() {
                            continue;
                        }
                        let first = r.start * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            for (d, v) in dst[first..first + r.len()].iter_mut().zip(&vals[r]) {
                                *d += v;
                            }
                        } else {
                            for (j, v) in vals[r].iter().enumerate() {
                                dst[first + j * g.stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// N×C×S (standard layout) → C×(N·S).
fn channels_major(x: &[f64], n: usize, c: usize, s: usize) -> Array2<f64> {
    let mut out = vec![0.0; n * c * s];
    for ni in 0..n {
        for ci in 0..c {
            out[ci * n * s + ni * s..][..s].copy_from_slice(&x[(ni * c + ci) * s..][..s]);
        }
    }
    Array2::from_shape_vec((c, n * s), out).unwrap()
}

/// C×(N·S) → N×C×S, flattened.
fn batch_major(m: &Array2<f64>, n: usize, s: usize) -> Vec<f64> {
    let c = m.nrows();
    let m = m.as_standard_layout();
    let src = m.as_slice().unwrap();
    let mut out = vec![0.0; n * c * s];
    for ci in 0..c {
        for ni in 0..n {
            out[(ni * c + ci) * s..][..s].copy_from_slice(&src[ci * n * s + ni * s..][..s]);
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        self.push(
            value,
            &[a, b],
            Box::new(|g, _, _, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        self.push(
            value,
            &[a, b],
            Box::new(|g, _, _, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| -g)]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        self.push(
            value,
            &[a, b],
            Box::new(|g, p, _, needs| {
                vec![needs[0].then(|| g * p[1]), needs[1].then(|| g * p[0])]
            }),
        )
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).mapv(|v| scale * v + shift);
        self.push(value, &[x], Box::new(move |g, _, _, _| vec![Some(g * scale)]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let src_shape = self.shape(x).to_vec();
        let value = contiguous(self.value(x))
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|e| panic!("reshape {src_shape:?} -> {shape:?}: {e}"));
        self.push(
            value,
            &[x],
            Box::new(move |g, _, _, _| {
                vec![Some(
                    contiguous(g)
                        .into_shape_with_order(IxDyn(&src_shape))
                        .unwrap(),
                )]
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        self.push(
            value,
            &[x],
            Box::new(|g, p, _, _| {
                let mut dx = g.clone();
                Zip::from(&mut dx).and(p[0]).for_each(|d, &v| {
                    if v <= 0.0 {
                        *d = 0.0
                    }
                });
                vec![Some(dx)]
            }),
        )
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(gelu);
        self.push(
            value,
            &[x],
            Box::new(|g, p, _, _| {
                let mut dx = g.clone();
                Zip::from(&mut dx).and(p[0]).for_each(|d, &v| *d *= gelu_grad(v));
                vec![Some(dx)]
            }),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(
            value,
            &[x],
            Box::new(|g, _, out, _| {
                let mut dx = g.clone();
                Zip::from(&mut dx).and(out).for_each(|d, &y| *d *= y * (1.0 - y));
                vec![Some(dx)]
            }),
        )
    }

    /// Softmax over axis 1 (channels) of an N×C×… tensor.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let xin = as_ncs(self.value(x));
        let (n, c, s) = xin.dim();
        let mut out = ndarray::Array3::<f64>::zeros((n, c, s));
        for ni in 0..n {
            for si in 0..s {
                let col = xin.slice(s![ni, .., si]);
                let m = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let mut z = 0.0;
                for ci in 0..c {
                    let e = (col[ci] - m).exp();
                    out[[ni, ci, si]] = e;
                    z += e;
                }
                for ci in 0..c {
                    out[[ni, ci, si]] /= z;
                }
            }
        }
        let value = out.into_shape_with_order(IxDyn(&shape)).unwrap();
        self.push(
            value,
            &[x],
            Box::new(|g, _, out, _| {
                let y = as_ncs(out);
                let g3 = contiguous(g);
                let gv = as_ncs(&g3);
                let (n, c, s) = y.dim();
                let mut dx = ndarray::Array3::<f64>::zeros((n, c, s));
                for ni in 0..n {
                    for si in 0..s {
                        let mut dot = 0.0;
                        for ci in 0..c {
                            dot += y[[ni, ci, si]] * gv[[ni, ci, si]];
                        }
                        for ci in 0..c {
                            dx[[ni, ci, si]] = y[[ni, ci, si]] * (gv[[ni, ci, si]] - dot);
                        }
                    }
                }
                vec![Some(dx.into_shape_with_order(IxDyn(out.shape())).unwrap())]
            }),
        )
    }

    /// 2-D convolution (cross-correlation) of N×I×H×W input with an
    /// O×I×k×k kernel, optional length-O bias, square stride and padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, ci, h, wd) = view4(self.value(x)).dim();
        let (co, wi, k, k2) = view4(self.value(w)).dim();
        assert_eq!(ci, wi, "conv2d: input has {ci} channels, kernel expects {wi}");
        assert_eq!(k, k2, "conv2d: only square kernels");
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d: input smaller than kernel");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let geom = ConvGeom { n, c: ci, h, w: wd, k, stride, pad, ho, wo };

        let wmat = contiguous(self.value(w))
            .into_shape_with_order((co, ci * k * k))
            .unwrap();
        let xin = contiguous(self.value(x));
        let xs = xin.as_slice().unwrap();
        let cols = if geom.pointwise() {
            channels_major(xs, n, ci, h * wd)
        } else {
            im2col(xs, geom)
        };
        let mut o = wmat.dot(&cols);
        if let Some(b) = b {
            for (mut row, &bv) in o.outer_iter_mut().zip(view1(self.value(b)).iter()) {
                row += bv;
            }
        }
        let out = Tensor::from_shape_vec(IxDyn(&[n, co, ho, wo]), batch_major(&o, n, ho * wo)).unwrap();

        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        self.push(
            out,
            &parents,
            Box::new(move |g, p, _, needs| {
                let g = contiguous(g);
                let gmat = channels_major(g.as_slice().unwrap(), n, co, ho * wo);
                let dw = needs[1].then(|| {
                    gmat.dot(&cols.t())
                        .into_shape_with_order(IxDyn(&[co, ci, k, k]))
                        .unwrap()
                });
                let dx = needs[0].then(|| {
                    let wmat = contiguous(p[1])
                        .into_shape_with_order((co, ci * k * k))
                        .unwrap();
                    let dcols = wmat.t().dot(&gmat);
                    let flat = if geom.pointwise() {
                        batch_major(&dcols, n, h * wd)
                    } else {
                        col2im(&dcols, geom)
                    };
                    Tensor::from_shape_vec(IxDyn(&[n, ci, h, wd]), flat).unwrap()
                });
                let mut grads = vec![dx, dw];
                if p.len() > 2 {
                    grads.push(needs[2].then(|| gmat.sum_axis(Axis(1)).into_dyn()));
                }
                grads
            }),
        )
    }

    /// Batch normalization over every axis except axis 1.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: BnStats) -> BnOutput {
        let shape = self.shape(x).to_vec();
        let xin = contiguous(self.value(x));
        let x3 = as_ncs(&xin);
        let (n, c, s) = x3.dim();
        let count = (n * s) as f64;
        let gam = view1(self.value(gamma)).to_owned();
        let bet = view1(self.value(beta)).to_owned();
        assert_eq!(gam.len(), c, "batch_norm: gamma length != channels");

        let (mean, var, eps, batch_mode) = match &stats {
            BnStats::Batch { eps } => {
                let mut mean = Array1::zeros(c);
                let mut var = Array1::zeros(c);
                for ci in 0..c {
                    let ch = x3.slice(s![.., ci, ..]);
                    let m = ch.sum() / count;
                    let v = ch.fold(0.0, |a, &b| a + (b - m) * (b - m)) / count;
                    mean[ci] = m;
                    var[ci] = v;
                }
                (mean, var, *eps, true)
            }
            BnStats::Fixed { mean, var, eps } => (mean.clone(), var.clone(), *eps, false),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let mut xhat = ndarray::Array3::<f64>::zeros((n, c, s));
        let mut out = ndarray::Array3::<f64>::zeros((n, c, s));
        for ni in 0..n {
            for ci in 0..c {
                for si in 0..s {
                    let xh = (x3[[ni, ci, si]] - mean[ci]) * inv_std[ci];
                    xhat[[ni, ci, si]] = xh;
                    out[[ni, ci, si]] = gam[ci] * xh + bet[ci];
                }
            }
        }
        let batch_stats = batch_mode.then(|| {
            let unbiased = if count > 1.0 {
                var.mapv(|v| v * count / (count - 1.0))
            } else {
                var.clone()
            };
            (mean.clone(), unbiased)
        });
        let value = out.into_shape_with_order(IxDyn(&shape)).unwrap();
        let out = self.push(
            value,
            &[x, gamma, beta],
            Box::new(move |g, p, _, needs| {
                let g = contiguous(g);
                let g3 = as_ncs(&g);
                let gam = view1(p[1]);
                let dgamma = Array1::from_shape_fn(c, |ci| {
                    (&g3.slice(s![.., ci, ..]) * &xhat.slice(s![.., ci, ..])).sum()
                });
                let dbeta = Array1::from_shape_fn(c, |ci| g3.slice(s![.., ci, ..]).sum());
                let dx = needs[0].then(|| {
                    let mut dx = ndarray::Array3::<f64>::zeros((n, c, s));
                    for ci in 0..c {
                        let k = gam[ci] * inv_std[ci];
                        for ni in 0..n {
                            for si in 0..s {
                                dx[[ni, ci, si]] = if batch_mode {
                                    k / count
                                        * (count * g3[[ni, ci, si]]
                                            - dbeta[ci]
                                            - xhat[[ni, ci, si]] * dgamma[ci])
                                } else {
                                    k * g3[[ni, ci, si]]
                                };
                            }
                        }
                    }
                    dx.into_shape_with_order(IxDyn(p[0].shape())).unwrap()
                });
                vec![dx, needs[1].then(|| dgamma.into_dyn()), needs[2].then(|| dbeta.into_dyn())]
            }),
        );
        BnOutput { out, batch_stats }
    }

    /// Multiplies an N×C×… tensor by a constant N×… mask broadcast over
    /// channels.
    pub fn mask_channels(&mut self, x: Var, mask: &Tensor) -> Var {
        let shape = self.shape(x).to_vec();
        let (n, c, s) = as_ncs(&contiguous(self.value(x))).dim();
        assert_eq!(mask.len(), n * s, "mask_channels: mask does not match spatial shape");
        let m = contiguous(mask).into_shape_with_order((n, 1, s)).unwrap();
        let xin = contiguous(self.value(x)).into_shape_with_order((n, c, s)).unwrap();
        let value = (&xin * &m).into_shape_with_order(IxDyn(&shape)).unwrap();
        self.push(
            value,
            &[x],
            Box::new(move |g, _, _, _| {
                let g3 = contiguous(g).into_shape_with_order((n, c, s)).unwrap();
                vec![Some((&g3 * &m).into_shape_with_order(IxDyn(&shape)).unwrap())]
            }),
        )
    }

    /// Mean over every axis after the channel axis: N×C×… → N×C.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let xin = contiguous(self.value(x));
        let x3 = as_ncs(&xin);
        let (n, c, s) = x3.dim();
        let value = x3.sum_axis(Axis(2)).mapv(|v| v / s as f64).into_dyn();
        self.push(
            value,
            &[x],
            Box::new(move |g, _, _, _| {
                let g2 = view2(g);
                let dx = ndarray::Array3::from_shape_fn((n, c, s), |(ni, ci, _)| g2[[ni, ci]] / s as f64);
                vec![Some(dx.into_shape_with_order(IxDyn(&shape)).unwrap())]
            }),
        )
    }

    /// `x · wᵀ (+ b)` for x: N×F, w: O×F, b: O.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = view2(self.value(x)).to_owned();
        let wv = view2(self.value(w)).to_owned();
        assert_eq!(xv.ncols(), wv.ncols(), "linear: feature mismatch");
        let mut out = xv.dot(&wv.t());
        if let Some(b) = b {
            out += &view1(self.value(b));
        }
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        self.push(
            out.into_dyn(),
            &parents,
            Box::new(|g, p, _, needs| {
                let g2 = view2(g);
                let x2 = view2(p[0]);
                let w2 = view2(p[1]);
                let mut grads = vec![
                    needs[0].then(|| g2.dot(&w2).into_dyn()),
                    needs[1].then(|| g2.t().dot(&x2).into_dyn()),
                ];
                if p.len() > 2 {
                    grads.push(needs[2].then(|| g2.sum_axis(Axis(0)).into_dyn()));
                }
                grads
            }),
        )
    }

    /// Maximum over axis 1: N×L×… → N×…. Ties route the gradient to the
    /// first maximal index.
    pub fn max_axis1(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let (n, l) = (shape[0], shape[1]);
        let rest: usize = shape[2..].iter().product();
        let xin = contiguous(self.value(x)).into_shape_with_order((n, l, rest)).unwrap();
        let mut out = Array2::<f64>::zeros((n, rest));
        let mut arg = vec![0usize; n * rest];
        for ni in 0..n {
            for ri in 0..rest {
                let mut best = 0;
                for li in 1..l {
                    if xin[[ni, li, ri]] > xin[[ni, best, ri]] {
                        best = li;
                    }
                }
                arg[ni * rest + ri] = best;
                out[[ni, ri]] = xin[[ni, best, ri]];
            }
        }
        let mut out_shape = vec![n];
        out_shape.extend_from_slice(&shape[2..]);
        let value = out.into_shape_with_order(IxDyn(&out_shape)).unwrap();
        self.push(
            value,
            &[x],
            Box::new(move |g, _, _, _| {
                let g2 = contiguous(g).into_shape_with_order((n, rest)).unwrap();
                let mut dx = Array3::<f64>::zeros((n, l, rest));
                for ni in 0..n {
                    for ri in 0..rest {
                        dx[[ni, arg[ni * rest + ri], ri]] += g2[[ni, ri]];
                    }
                }
                vec![Some(dx.into_shape_with_order(IxDyn(&shape)).unwrap())]
            }),
        )
    }

    /// Horizontal part pooling: N×C×H×W → N×P×C, each part being the
    /// per-channel mean plus max over a horizontal strip. Strips have
    /// height ⌊H/P⌋; the last strip absorbs the remainder.
    pub fn part_pool(&mut self, x: Var, parts: usize) -> Var {
        let (n, c, h, w) = view4(self.value(x)).dim();
        assert!(parts >= 1 && parts <= h, "part_pool: {parts} parts for height {h}");
        let bounds = strip_bounds(h, parts);
        let xin = contiguous(self.value(x));
        let x4 = view4(&xin);
        let mut out = Array3::<f64>::zeros((n, parts, c));
        // flat argmax index into (h, w) per (n, p, c)
        let mut arg = vec![0usize; n * parts * c];
        for ni in 0..n {
            for (pi, &(y0, y1)) in bounds.iter().enumerate() {
                let count = ((y1 - y0) * w) as f64;
                for ci in 0..c {
                    let strip = x4.slice(s![ni, ci, y0..y1, ..]);
                    let mut best = (y0, 0);
                    let mut sum = 0.0;
                    for y in y0..y1 {
                        for xx in 0..w {
                            let v = strip[[y - y0, xx]];
                            sum += v;
                            if v > x4[[ni, ci, best.0, best.1]] {
                                best = (y, xx);
                            }
                        }
                    }
                    arg[(ni * parts + pi) * c + ci] = best.0 * w + best.1;
                    out[[ni, pi, ci]] = sum / count + x4[[ni, ci, best.0, best.1]];
                }
            }
        }
        self.push(
            out.into_dyn(),
            &[x],
            Box::new(move |g, _, _, _| {
                let g3 = view3(g);
                let mut dx = ndarray::Array4::<f64>::zeros((n, c, h, w));
                for ni in 0..n {
                    for (pi, &(y0, y1)) in bounds.iter().enumerate() {
                        let count = ((y1 - y0) * w) as f64;
                        for ci in 0..c {
                            let gv = g3[[ni, pi, ci]];
                            dx.slice_mut(s![ni, ci, y0..y1, ..])
                                .mapv_inplace(|v| v + gv / count);
                            let a = arg[(ni * parts + pi) * c + ci];
                            dx[[ni, ci, a / w, a % w]] += gv;
                        }
                    }
                }
                vec![Some(dx.into_dyn())]
            }),
        )
    }

    /// Independent per-part linear maps: x: N×P×F, w: P×F×O → N×P×O.
    pub fn part_linear(&mut self, x: Var, w: Var) -> Var {
        let x3 = view3(self.value(x)).to_owned();
        let w3 = view3(self.value(w)).to_owned();
        let (n, p, f) = x3.dim();
        let (wp, wf, o) = w3.dim();
        assert_eq!((p, f), (wp, wf), "part_linear: shape mismatch");
        let mut out = Array3::<f64>::zeros((n, p, o));
        for pi in 0..p {
            let y = x3.slice(s![.., pi, ..]).dot(&w3.slice(s![pi, .., ..]));
            out.slice_mut(s![.., pi, ..]).assign(&y);
        }
        self.push(
            out.into_dyn(),
            &[x, w],
            Box::new(move |g, par, _, needs| {
                let g3 = view3(g);
                let x3 = view3(par[0]);
                let w3 = view3(par[1]);
                let mut dx = needs[0].then(|| Array3::<f64>::zeros((n, p, f)));
                let mut dw = needs[1].then(|| Array3::<f64>::zeros((p, f, o)));
                for pi in 0..p {
                    let gp = g3.slice(s![.., pi, ..]);
                    if let Some(dx) = dx.as_mut() {
                        dx.slice_mut(s![.., pi, ..])
                            .assign(&gp.dot(&w3.slice(s![pi, .., ..]).t()));
                    }
                    if let Some(dw) = dw.as_mut() {
                        dw.slice_mut(s![pi, .., ..])
                            .assign(&x3.slice(s![.., pi, ..]).t().dot(&gp));
                    }
                }
                vec![dx.map(|d| d.into_dyn()), dw.map(|d| d.into_dyn())]
            }),
        )
    }

    /// Scales every channel map of x: N×C×… by s: N×C.
    pub fn channel_scale(&mut self, x: Var, scale: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let xin = contiguous(self.value(x));
        let x3 = as_ncs(&xin).to_owned();
        let (n, c, sp) = x3.dim();
        let sv = view2(self.value(scale)).to_owned();
        assert_eq!(sv.dim(), (n, c), "channel_scale: scale must be N×C");
        let s3 = sv.clone().into_shape_with_order((n, c, 1)).unwrap();
        let value = (&x3 * &s3).into_shape_with_order(IxDyn(&shape)).unwrap();
        self.push(
            value,
            &[x, scale],
            Box::new(move |g, _, _, needs| {
                let g3 = contiguous(g).into_shape_with_order((n, c, sp)).unwrap();
                vec![
                    needs[0].then(|| (&g3 * &s3).into_shape_with_order(IxDyn(&shape)).unwrap()),
                    needs[1].then(|| (&g3 * &x3).sum_axis(Axis(2)).into_dyn()),
                ]
            }),
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = scalar_tensor(self.value(x).sum());
        self.push(
            value,
            &[x],
            Box::new(|g, p, _, _| vec![Some(Tensor::from_elem(p[0].raw_dim(), g.sum()))]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let len = self.value(x).len() as f64;
        let value = scalar_tensor(self.value(x).sum() / len);
        self.push(
            value,
            &[x],
            Box::new(move |g, p, _, _| vec![Some(Tensor::from_elem(p[0].raw_dim(), g.sum() / len))]),
        )
    }

    /// Sum of scalar nodes with fixed weights.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let value = scalar_tensor(terms.iter().map(|(v, w)| w * self.scalar(*v)).sum());
        let weights: Vec<f64> = terms.iter().map(|(_, w)| *w).collect();
        let parents: Vec<Var> = terms.iter().map(|(v, _)| *v).collect();
        self.push(
            value,
            &parents,
            Box::new(move |g, p, _, needs| {
                let gs = g.sum();
                weights
                    .iter()
                    .zip(p)
                    .zip(needs)
                    .map(|((w, pv), need)| need.then(|| Tensor::from_elem(pv.raw_dim(), gs * w)))
                    .collect()
            }),
        )
    }

    /// Mean squared error between two equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mse: shape mismatch");
        let len = self.value(a).len() as f64;
        let diff = self.value(a) - self.value(b);
        let value = scalar_tensor(diff.iter().map(|d| d * d).sum::<f64>() / len);
        self.push(
            value,
            &[a, b],
            Box::new(move |g, _, _, needs| {
                let k = 2.0 * g.sum() / len;
                let d = &diff * k;
                vec![needs[0].then(|| d.clone()), needs[1].then(|| -&d)]
            }),
        )
    }
}

fn view1(t: &Tensor) -> ndarray::ArrayView1<'_, f64> {
    t.view()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("expected a 1-d tensor")
}

/// Row ranges of `parts` horizontal strips over a height-`h` map.
pub(crate) fn strip_bounds(h: usize, parts: usize) -> Vec<(usize, usize)> {
    let step = h / parts;
    (0..parts)
        .map(|p| {
            let y0 = p * step;
            let y1 = if p + 1 == parts { h } else { y0 + step };
            (y0, y1)
        })
        .collect()
}
