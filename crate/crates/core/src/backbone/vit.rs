//! Pre-norm ViT forward pass for pretrained self-supervised weights
//! (the `lvm-adapter` provider).
//!
//! Weights are read from a tensor archive whose metadata holds a
//! [`VitConfig`] under `"vit"`. Tensor names follow the usual layout:
//! `patch_embed.proj.{weight,bias}`, `cls_token`, `pos_embed`,
//! `blocks.{i}.{norm1,attn.qkv,attn.proj,ls1,norm2,mlp.fc1,mlp.fc2,ls2}.*`
//! and `norm.{weight,bias}`. Layer-scale tensors are optional.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, Axis, Ix1, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{TokenGrid, TokenProvider};
use crate::archive;
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::ingest::Frame;
use crate::interp::resize_plane;

pub const PROVIDER_NAME: &str = "lvm-adapter";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    pub mlp_ratio: usize,
    /// Token grid the positional embedding was trained on.
    pub pos_grid: (usize, usize),
    pub layer_norm_eps: f64,
    /// Apply the final LayerNorm to tapped tokens.
    pub norm_taps: bool,
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
}

impl VitConfig {
    /// ViT-S/14 with the 518-pixel pretraining grid.
    pub fn small14() -> Self {
        Self {
            embed_dim: 384,
            depth: 12,
            num_heads: 6,
            patch_size: 14,
            mlp_ratio: 4,
            pos_grid: (37, 37),
            layer_norm_eps: 1e-6,
            norm_taps: true,
            pixel_mean: [0.485, 0.456, 0.406],
            pixel_std: [0.229, 0.224, 0.225],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if self.depth == 0 || self.patch_size == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("depth, patch_size and mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

struct LayerNorm {
    weight: Array1<f64>,
    bias: Array1<f64>,
}

struct Dense {
    /// out × in
    weight: Array2<f64>,
    bias: Array1<f64>,
}

impl Dense {
    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

struct Block {
    norm1: LayerNorm,
    qkv: Dense,
    proj: Dense,
    ls1: Option<Array1<f64>>,
    norm2: LayerNorm,
    fc1: Dense,
    fc2: Dense,
    ls2: Option<Array1<f64>>,
}

pub struct VitAdapter {
    cfg: VitConfig,
    /// E × (3·p·p)
    patch_weight: Array2<f64>,
    patch_bias: Array1<f64>,
    cls_token: Array1<f64>,
    /// (1 + gh·gw) × E at the pretraining grid
    pos_embed: Array2<f64>,
    blocks: Vec<Block>,
    norm: LayerNorm,
    digest: String,
}

fn unavailable(reason: impl Into<String>) -> Error {
    Error::ProviderUnavailable {
        provider: PROVIDER_NAME.into(),
        reason: reason.into(),
    }
}

struct Weights(BTreeMap<String, Tensor>);

impl Weights {
    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self
            .0
            .remove(name)
            .ok_or_else(|| unavailable(format!("missing weight `{name}`")))?;
        if t.len() != shape.iter().product::<usize>() {
            return Err(unavailable(format!(
                "weight `{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t.into_shape_with_order(shape.to_vec()).unwrap())
    }

    fn vec(&mut self, name: &str, len: usize) -> Result<Array1<f64>> {
        Ok(self.take(name, &[len])?.into_dimensionality::<Ix1>().unwrap())
    }

    fn mat(&mut self, name: &str, rows: usize, cols: usize) -> Result<Array2<f64>> {
        Ok(self.take(name, &[rows, cols])?.into_dimensionality::<Ix2>().unwrap())
    }

    fn opt_vec(&mut self, name: &str, len: usize) -> Result<Option<Array1<f64>>> {
        if self.0.contains_key(name) {
            self.vec(name, len).map(Some)
        } else {
            Ok(None)
        }
    }

    fn norm(&mut self, prefix: &str, e: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            weight: self.vec(&format!("{prefix}.weight"), e)?,
            bias: self.vec(&format!("{prefix}.bias"), e)?,
        })
    }

    fn dense(&mut self, prefix: &str, out: usize, inp: usize) -> Result<Dense> {
        Ok(Dense {
            weight: self.mat(&format!("{prefix}.weight"), out, inp)?,
            bias: self.vec(&format!("{prefix}.bias"), out)?,
        })
    }
}

impl VitAdapter {
    /// Loads weights; any failure is reported as the provider being
    /// unavailable.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(unavailable(format!("weights file {} not found", path.display())));
        }
        let (meta, tensors) = archive::read(path).map_err(|e| unavailable(e.to_string()))?;
        let cfg: VitConfig = serde_json::from_value(meta.get("vit").cloned().unwrap_or_default())
            .map_err(|e| unavailable(format!("bad `vit` metadata: {e}")))?;
        Self::from_tensors(cfg, archive::into_map(tensors))
    }

    pub fn from_tensors(cfg: VitConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        cfg.validate().map_err(|e| unavailable(e.to_string()))?;
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&cfg)?);
        for (name, t) in &tensors {
            h.update(name.as_bytes());
            for v in t.iter() {
                h.update(v.to_le_bytes());
            }
        }
        let digest = hex::encode(h.finalize());
        let e = cfg.embed_dim;
        let p = cfg.patch_size;
        let hidden = e * cfg.mlp_ratio;
        let n_pos = 1 + cfg.pos_grid.0 * cfg.pos_grid.1;
        let mut w = Weights(tensors);
        let patch_weight = w.take("patch_embed.proj.weight", &[e, 3 * p * p])?;
        let patch_weight = patch_weight.into_dimensionality::<Ix2>().unwrap();
        let patch_bias = w.vec("patch_embed.proj.bias", e)?;
        let cls_token = w.vec("cls_token", e)?;
        let pos_embed = w.mat("pos_embed", n_pos, e)?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let b = format!("blocks.{i}");
            blocks.push(Block {
                norm1: w.norm(&format!("{b}.norm1"), e)?,
                qkv: w.dense(&format!("{b}.attn.qkv"), 3 * e, e)?,
                proj: w.dense(&format!("{b}.attn.proj"), e, e)?,
                ls1: w.opt_vec(&format!("{b}.ls1.gamma"), e)?,
                norm2: w.norm(&format!("{b}.norm2"), e)?,
                fc1: w.dense(&format!("{b}.mlp.fc1"), hidden, e)?,
                fc2: w.dense(&format!("{b}.mlp.fc2"), e, hidden)?,
                ls2: w.opt_vec(&format!("{b}.ls2.gamma"), e)?,
            });
        }
        let norm = w.norm("norm", e)?;
        Ok(Self {
            cfg,
            patch_weight,
            patch_bias,
            cls_token,
            pos_embed,
            blocks,
            norm,
            digest,
        })
    }

    /// Randomly initialized weights in the archive layout, for tests and
    /// smoke runs.
    pub fn random_tensors(cfg: &VitConfig, seed: u64) -> BTreeMap<String, Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = cfg.embed_dim;
        let p = cfg.patch_size;
        let hidden = e * cfg.mlp_ratio;
        let mut out = BTreeMap::new();
        let mut normal = |shape: &[usize], std: f64| {
            let d = Normal::new(0.0, std).unwrap();
            Tensor::from_shape_simple_fn(shape.to_vec(), || d.sample(&mut rng))
        };
        let mut put = |name: String, t: Tensor| {
            out.insert(name, t);
        };
        put("patch_embed.proj.weight".into(), normal(&[e, 3 * p * p], 0.1));
        put("patch_embed.proj.bias".into(), normal(&[e], 0.02));
        put("cls_token".into(), normal(&[e], 0.02));
        put("pos_embed".into(), normal(&[1 + cfg.pos_grid.0 * cfg.pos_grid.1, e], 0.02));
        for i in 0..cfg.depth {
            let b = format!("blocks.{i}");
            for (name, o, inp) in [
                ("attn.qkv", 3 * e, e),
                ("attn.proj", e, e),
                ("mlp.fc1", hidden, e),
                ("mlp.fc2", e, hidden),
            ] {
                put(format!("{b}.{name}.weight"), normal(&[o, inp], 1.0 / (inp as f64).sqrt()));
                put(format!("{b}.{name}.bias"), normal(&[o], 0.02));
            }
            for n in ["norm1", "norm2"] {
                put(format!("{b}.{n}.weight"), Tensor::ones(vec![e]));
                put(format!("{b}.{n}.bias"), Tensor::zeros(vec![e]));
            }
            put(format!("{b}.ls1.gamma"), Tensor::from_elem(vec![e], 0.5));
            put(format!("{b}.ls2.gamma"), Tensor::from_elem(vec![e], 0.5));
        }
        put("norm.weight".into(), Tensor::ones(vec![e]));
        put("norm.bias".into(), Tensor::zeros(vec![e]));
        out
    }

    pub fn config(&self) -> &VitConfig {
        &self.cfg
    }

    /// Patch positional embeddings resized to the `rows × cols` grid
    /// (bilinear, half-pixel centres).
    fn positional(&self, rows: usize, cols: usize) -> Array2<f64> {
        let e = self.cfg.embed_dim;
        let (gh, gw) = self.cfg.pos_grid;
        let mut out = Array2::zeros((1 + rows * cols, e));
        out.row_mut(0).assign(&self.pos_embed.row(0));
        let patch = self.pos_embed.slice(s![1.., ..]);
        for c in 0..e {
            let plane = patch.column(c).to_owned().into_shape_with_order((gh, gw)).unwrap();
            let r = if (gh, gw) == (rows, cols) {
                plane
            } else {
                resize_plane(plane.view(), rows, cols)
            };
            out.slice_mut(s![1.., c]).assign(&Array1::from_iter(r.iter().copied()));
        }
        out
    }

    fn embed(&self, frame: &Frame) -> Result<(Array2<f64>, usize, usize)> {
        let (h, w, ch) = frame.dim();
        let p = self.cfg.patch_size;
        if ch != 3 || h % p != 0 || w % p != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("frame {h}x{w}x{ch} is not a multiple of patch {p}")));
        }
        let (rows, cols) = (h / p, w / p);
        // rows of patches flattened as (channel, dy, dx) to match the conv weight
        let mut patches = Array2::zeros((rows * cols, 3 * p * p));
        for r in 0..rows {
            for c in 0..cols {
                let mut row = patches.row_mut(r * cols + c);
                for k in 0..3 {
                    for dy in 0..p {
                        for dx in 0..p {
                            let v = frame[[r * p + dy, c * p + dx, k]];
                            row[k * p * p + dy * p + dx] = (v - self.cfg.pixel_mean[k]) / self.cfg.pixel_std[k];
                        }
                    }
                }
            }
        }
        let tok = patches.dot(&self.patch_weight.t()) + &self.patch_bias;
        let mut x = Array2::zeros((1 + rows * cols, self.cfg.embed_dim));
        x.row_mut(0).assign(&self.cls_token);
        x.slice_mut(s![1.., ..]).assign(&tok);
        x += &self.positional(rows, cols);
        Ok((x, rows, cols))
    }

    fn layer_norm(&self, x: &Array2<f64>, ln: &LayerNorm) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let mean = row.mean().unwrap();
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (var + self.cfg.layer_norm_eps).sqrt();
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * ln.weight[i] + ln.bias[i];
            }
        }
        out
    }

    fn attention(&self, x: &Array2<f64>, b: &Block) -> Array2<f64> {
        let e = self.cfg.embed_dim;
        let heads = self.cfg.num_heads;
        let hd = e / heads;
        let n = x.nrows();
        let qkv = b.qkv.apply(x);
        let scale = 1.0 / (hd as f64).sqrt();
        let mut ctx = Array2::zeros((n, e));
        for hi in 0..heads {
            let q = qkv.slice(s![.., hi * hd..(hi + 1) * hd]);
            let k = qkv.slice(s![.., e + hi * hd..e + (hi + 1) * hd]);
            let v = qkv.slice(s![.., 2 * e + hi * hd..2 * e + (hi + 1) * hd]);
            let mut att = q.dot(&k.t()) * scale;
            for mut row in att.axis_iter_mut(Axis(0)) {
                let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                row.mapv_inplace(|z| (z - m).exp());
                let s = row.sum();
                row /= s;
            }
            ctx.slice_mut(s![.., hi * hd..(hi + 1) * hd]).assign(&att.dot(&v));
        }
        b.proj.apply(&ctx)
    }

    fn block(&self, x: &mut Array2<f64>, b: &Block) {
        let mut a = self.attention(&self.layer_norm(x, &b.norm1), b);
        if let Some(g) = &b.ls1 {
            a *= g;
        }
        *x += &a;
        let mut m = b.fc1.apply(&self.layer_norm(x, &b.norm2));
        m.mapv_inplace(|z| 0.5 * z * (1.0 + libm::erf(z / std::f64::consts::SQRT_2)));
        let mut m = b.fc2.apply(&m);
        if let Some(g) = &b.ls2 {
            m *= g;
        }
        *x += &m;
    }
}

impl TokenProvider for VitAdapter {
    fn name(&self) -> &str {
        PROVIDER_NAME
    }

    fn tokens(&self, frame: &Frame, tap_layers: &[usize]) -> Result<Vec<TokenGrid>> {
        if let Some(&bad) = tap_layers.iter().find(|&&t| t == 0 || t > self.cfg.depth) {
            return Err(Error::InvalidArgument(format!(
                "tap layer {bad} outside 1..={}",
                self.cfg.depth
            )));
        }
        let (mut x, rows, cols) = self.embed(frame)?;
        let last = tap_layers.iter().copied().max().unwrap_or(0);
        let mut taps = BTreeMap::new();
        for (i, b) in self.blocks.iter().enumerate().take(last) {
            self.block(&mut x, b);
            if tap_layers.contains(&(i + 1)) {
                let t = if self.cfg.norm_taps {
                    self.layer_norm(&x, &self.norm)
                } else {
                    x.clone()
                };
                taps.insert(i + 1, t);
            }
        }
        Ok(tap_layers
            .iter()
            .map(|l| {
                let t = &taps[l];
                Array3::from_shape_vec((rows, cols, self.cfg.embed_dim), t.slice(s![1.., ..]).iter().copied().collect())
                    .unwrap()
            })
            .collect())
    }

    fn digest(&self) -> String {
        self.digest.clone()
    }
}
