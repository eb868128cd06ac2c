//! Gait representation extractor: mask, appearance and denoising branches
//! on top of the frozen multi-level map f_c.
//!
//! The mask branch learns only from reconstruction; its binarized output
//! is a constant for everything downstream.

mod losses;
mod mask;

pub use losses::{diversity, diversity_loss, mean_channel_entropy, smoothness, smoothness_loss};
pub use mask::{apply_mask, binarize_close, center_scores, center_weights, select_foreground_channel};

use ndarray::{s, Array3, Axis, Ix4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{scalar_tensor, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Forward, ParamStore};

/// Largest permitted output width of the appearance / denoising branches.
pub const MAX_CHANNELS: usize = 128;

/// Which GRE branches are active. With every branch off the head sees f_c.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branches {
    pub mask: bool,
    pub appearance: bool,
    pub denoising: bool,
}

impl Branches {
    pub const FULL: Self = Self {
        mask: true,
        appearance: true,
        denoising: true,
    };
    pub const BYPASS: Self = Self {
        mask: false,
        appearance: false,
        denoising: false,
    };

    pub fn is_bypass(&self) -> bool {
        !self.appearance && !self.denoising
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreConfig {
    /// Channels of one tapped level (f4 width).
    pub embed_dim: usize,
    /// Output channels C of both branches.
    pub channels: usize,
    /// Hidden width of the denoising stack.
    pub hidden: usize,
    pub branches: Branches,
}

impl GreConfig {
    pub fn reference() -> Self {
        Self {
            embed_dim: 384,
            channels: 16,
            hidden: 256,
            branches: Branches::FULL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels > MAX_CHANNELS {
            return Err(Error::Config(format!(
                "GRE channels {} outside 1..={MAX_CHANNELS}",
                self.channels
            )));
        }
        if self.embed_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("GRE widths must be positive".into()));
        }
        Ok(())
    }

    pub fn fc_channels(&self) -> usize {
        4 * self.embed_dim
    }
}

/// Everything one GRE pass produces for a batch of N frames.
pub struct GreOutput {
    /// N×2×H×W mask softmax, when the mask branch is on.
    pub prob: Option<Var>,
    /// Selected foreground channel per frame.
    pub fg_channel: Vec<usize>,
    /// N×H×W binary mask (all ones when the mask branch is off).
    pub fg: Array3<f64>,
    /// Masked features, a constant.
    pub fm: Var,
    pub fap: Option<Var>,
    pub fde: Option<Var>,
    pub l_rec: Var,
    pub l_smo: Var,
    pub l_div: Var,
}

pub struct Gre {
    pub cfg: GreConfig,
    enc: Conv2d,
    dec: Conv2d,
    ap: Conv2d,
    de1: Conv2d,
    de_bn: BatchNorm,
    de2: Conv2d,
}

impl Gre {
    pub fn new(cfg: GreConfig) -> Result<Self> {
        cfg.validate()?;
        let e = cfg.embed_dim;
        let fc = cfg.fc_channels();
        Ok(Self {
            enc: Conv2d::pointwise("gre.mask.enc", e, 2),
            dec: Conv2d::pointwise("gre.mask.dec", 2, e),
            ap: Conv2d::pointwise("gre.ap", fc, cfg.channels),
            de1: Conv2d::pointwise("gre.de.conv1", fc, cfg.hidden),
            de_bn: BatchNorm::new("gre.de.bn", cfg.hidden),
            de2: Conv2d::pointwise("gre.de.conv2", cfg.hidden, cfg.channels),
            cfg,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let b = self.cfg.branches;
        if b.mask {
            self.enc.init(store, rng);
            self.dec.init(store, rng);
        }
        if b.appearance {
            self.ap.init(store, rng);
        }
        if b.denoising {
            self.de1.init(store, rng);
            self.de_bn.init(store);
            self.de2.init(store, rng);
        }
    }

    /// m = softmax(E(f4)), f4_rec = D(m), L_rec = mean (f4 − f4_rec)².
    /// `f4` is N×E×H×W.
    pub fn mask_forward(&self, f: &mut Forward, f4: Var) -> (Var, Var, Var) {
        let logits = self.enc.forward(f, f4);
        let m = f.graph.softmax_channels(logits);
        let rec = self.dec.forward(f, m);
        let loss = f.graph.mse(f4, rec);
        (m, rec, loss)
    }

    /// Per-frame foreground channel and closed binary mask from the mask
    /// softmax values (N×2×H×W).
    pub fn foreground(prob: &Tensor) -> (Vec<usize>, Array3<f64>) {
        let p = prob.view().into_dimensionality::<Ix4>().expect("mask softmax is N×2×H×W");
        let (n, _, h, w) = p.dim();
        let mut fg = Array3::zeros((n, h, w));
        let mut channels = Vec::with_capacity(n);
        for ni in 0..n {
            let m = p.index_axis(Axis(0), ni);
            let ch = select_foreground_channel(m);
            fg.index_axis_mut(Axis(0), ni).assign(&binarize_close(m.index_axis(Axis(0), ch)));
            channels.push(ch);
        }
        (channels, fg)
    }

    /// Full pass over N frames of f_c (N×4E×H×W, frozen).
    pub fn forward(&self, f: &mut Forward, fc: &Tensor) -> Result<GreOutput> {
        let shape = fc.shape().to_vec();
        if shape.len() != 4 || shape[1] != self.cfg.fc_channels() {
            return Err(Error::Shape(format!(
                "GRE expects N×{}×H×W, got {shape:?}",
                self.cfg.fc_channels()
            )));
        }
        if fc.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("f_c".into()));
        }
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let b = self.cfg.branches;
        let zero = f.graph.constant(scalar_tensor(0.0));
        let (prob, fg_channel, fg, l_rec) = if b.mask {
            let e = self.cfg.embed_dim;
            let f4 = fc.slice(s![.., 3 * e.., .., ..]).to_owned().into_dyn();
            let f4 = f.graph.constant(f4);
            let (m, _, loss) = self.mask_forward(f, f4);
            let (ch, fg) = Self::foreground(f.graph.value(m));
            (Some(m), ch, fg, loss)
        } else {
            (None, vec![0; n], Array3::ones((n, h, w)), zero)
        };
        let fc_var = f.graph.constant(fc.clone());
        let fm = if b.mask {
            f.graph.mask_channels(fc_var, &fg.clone().into_dyn())
        } else {
            fc_var
        };
        let fap = b.appearance.then(|| self.ap.forward(f, fm));
        let (fde, l_smo, l_div) = if b.denoising {
            let hdn = self.de1.forward(f, fm);
            let hdn = self.de_bn.forward(f, hdn);
            let hdn = f.graph.gelu(hdn);
            let logits = self.de2.forward(f, hdn);
            let fde = f.graph.softmax_channels(logits);
            let smo = smoothness_loss(&mut f.graph, fde, &fg);
            let div = diversity_loss(&mut f.graph, fde, &fg);
            (Some(fde), smo, div)
        } else {
            (None, zero, zero)
        };
        Ok(GreOutput {
            prob,
            fg_channel,
            fg,
            fm,
            fap,
            fde,
            l_rec,
            l_smo,
            l_div,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check;
    use crate::nn::Mode;
    use ndarray::{Array1, Array2, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> GreConfig {
        GreConfig {
            embed_dim: 6,
            channels: 4,
            hidden: 5,
            branches: Branches::FULL,
        }
    }

    fn random_fc(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_shape_simple_fn(IxDyn(&[n, c, h, w]), || rng.random::<f64>() * 2.0 - 1.0)
    }

    fn setup(seed: u64) -> (Gre, ParamStore) {
        let gre = Gre::new(small()).unwrap();
        let mut store = ParamStore::new();
        gre.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        (gre, store)
    }

    #[test]
    fn channel_bound_is_enforced() {
        let mut cfg = small();
        cfg.channels = 129;
        assert!(Gre::new(cfg).is_err());
    }

    #[test]
    fn softmax_outputs_are_distributions() {
        let (gre, store) = setup(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fc = random_fc(&mut rng, 2, 24, 8, 4);
        let mut f = Forward::new(&store, Mode::Train, false);
        let out = gre.forward(&mut f, &fc).unwrap();
        for v in [out.prob.unwrap(), out.fde.unwrap()] {
            let sums = f.graph.value(v).sum_axis(Axis(1));
            assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-6));
        }
        assert!(out.fg.iter().all(|&v| v == 0.0 || v == 1.0));
        let l = f.graph.scalar(out.l_div);
        assert!((0.0..=4f64.ln() + 1e-12).contains(&l));
        assert!(f.graph.scalar(out.l_smo) >= 0.0);
        assert!(f.graph.scalar(out.l_rec) >= 0.0);
    }

    #[test]
    fn zero_decoder_and_zero_input_reconstruct_exactly() {
        let (gre, mut store) = setup(0);
        store.param_mut("gre.mask.dec.weight").unwrap().fill(0.0);
        let mut f = Forward::new(&store, Mode::Eval, false);
        let f4 = f.graph.constant(Tensor::zeros(IxDyn(&[1, 6, 4, 4])));
        let (_, _, loss) = gre.mask_forward(&mut f, f4);
        assert_eq!(f.graph.scalar(loss), 0.0);
    }

    #[test]
    fn bypass_passes_fc_through() {
        let mut cfg = small();
        cfg.branches = Branches::BYPASS;
        let gre = Gre::new(cfg).unwrap();
        let store = ParamStore::new();
        let fc = random_fc(&mut ChaCha8Rng::seed_from_u64(3), 1, 24, 4, 4);
        let mut f = Forward::new(&store, Mode::Train, false);
        let out = gre.forward(&mut f, &fc).unwrap();
        assert_eq!(f.graph.value(out.fm), &fc);
        assert!(out.fap.is_none() && out.fde.is_none());
    }

    #[test]
    fn appearance_pixel_matches_matrix_vector_product() {
        let (gre, store) = setup(4);
        let fc = random_fc(&mut ChaCha8Rng::seed_from_u64(5), 1, 24, 3, 2);
        let mut f = Forward::new(&store, Mode::Eval, false);
        let x = f.graph.constant(fc.clone());
        let ap = gre.ap.forward(&mut f, x);
        let out = f.graph.value(ap).clone();
        let w = store.param("gre.ap.weight").unwrap();
        let b = store.param("gre.ap.bias").unwrap();
        for o in 0..4 {
            let mut acc = b[[o]];
            for i in 0..24 {
                acc += w[[o, i, 0, 0]] * fc[[0, i, 2, 1]];
            }
            assert!((acc - out[[0, o, 2, 1]]).abs() < 1e-12);
        }
    }

    #[test]
    fn denoise_pixel_matches_scalar_pipeline() {
        let (gre, mut store) = setup(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        store.param_mut("gre.de.bn.weight").unwrap().mapv_inplace(|_| rng.random::<f64>() + 0.5);
        store.param_mut("gre.de.bn.bias").unwrap().mapv_inplace(|_| rng.random::<f64>() - 0.5);
        let fc = random_fc(&mut rng, 1, 24, 2, 2);
        let mut f = Forward::new(&store, Mode::Eval, false);
        let x = f.graph.constant(fc.clone());
        let h = gre.de1.forward(&mut f, x);
        let h = gre.de_bn.forward(&mut f, h);
        let h = f.graph.gelu(h);
        let h = gre.de2.forward(&mut f, h);
        let out = f.graph.softmax_channels(h);
        let got = f.graph.value(out).slice(s![0, .., 1, 0]).to_owned();

        let p = |n: &str| store.param(n).unwrap().clone();
        let px: Array1<f64> = fc.slice(s![0, .., 1, 0]).to_owned();
        let w1 = p("gre.de.conv1.weight").into_shape_with_order((5, 24)).unwrap();
        let hid = w1.dot(&px) + &p("gre.de.conv1.bias").into_dimensionality::<ndarray::Ix1>().unwrap();
        let (g, bb) = (p("gre.de.bn.weight"), p("gre.de.bn.bias"));
        let (rm, rv) = (store.buffer("gre.de.bn.running_mean").unwrap(), store.buffer("gre.de.bn.running_var").unwrap());
        let act: Vec<f64> = (0..5)
            .map(|i| {
                let z = (hid[i] - rm[[i]]) / (rv[[i]] + 1e-5).sqrt() * g[[i]] + bb[[i]];
                0.5 * z * (1.0 + libm::erf(z / 2f64.sqrt()))
            })
            .collect();
        let w2 = p("gre.de.conv2.weight").into_shape_with_order((4, 5)).unwrap();
        let b2 = p("gre.de.conv2.bias");
        let logits: Vec<f64> = (0..4).map(|o| (0..5).map(|i| w2[[o, i]] * act[i]).sum::<f64>() + b2[[o]]).collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        for o in 0..4 {
            assert!((got[o] - (logits[o] - mx).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn reconstruction_gradient_matches_finite_differences() {
        let (gre, store) = setup(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f4 = random_fc(&mut rng, 1, 6, 8, 8);
        let e = check::relative_error(&f4, 1e-5, |g, x| {
            let mut f = Forward::new(&store, Mode::Train, false);
            std::mem::swap(&mut f.graph, g);
            let (_, _, loss) = gre.mask_forward(&mut f, x);
            std::mem::swap(&mut f.graph, g);
            loss
        });
        assert!(e <= 1e-4, "{e}");
    }

    #[test]
    fn foreground_uses_central_channel() {
        let mut p = Tensor::zeros(IxDyn(&[1, 2, 8, 4]));
        let centre = Array2::from_shape_fn((8, 4), |(y, x)| ((2..6).contains(&y) && (1..3).contains(&x)) as u8 as f64);
        p.slice_mut(s![0, 1, .., ..]).assign(&centre);
        p.slice_mut(s![0, 0, .., ..]).assign(&centre.mapv(|v| 1.0 - v));
        let (ch, fg) = Gre::foreground(&p);
        assert_eq!(ch, vec![1]);
        assert_eq!(fg.index_axis(Axis(0), 0), centre);
    }
}
