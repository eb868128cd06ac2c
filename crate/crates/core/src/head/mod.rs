//! Two-stream recognition head: separate first stages for f_ap and f_de,
//! channel-wise cross-and-select fusion, shared deeper stages, temporal
//! max pooling, horizontal part pooling, per-part projections and a
//! BNNeck classifier.

mod blocks;
mod embedding;

pub use blocks::{BasicBlock, Stem};
pub use embedding::{read_embedding_cache, write_embedding_cache, GaitEmbedding};

use ndarray::{Array2, Array3, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Forward, Init, Linear, ParamStore, PartLinear};

/// Downstream variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// Temporal max pooling after the last stage.
    #[default]
    Base,
    /// Set pooling after the second stage; the deeper stages run on the
    /// pooled set-level map.
    SetPool,
}

/// Names of activations exposed for saliency maps.
pub const TAP_B1_AP: &str = "head-B1-ap";
pub const TAP_B1_DE: &str = "head-B1-de";
pub const TAP_FUSED: &str = "head-fused";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Channels of each input stream.
    pub in_channels: usize,
    /// Output widths of stages B1..B4.
    pub widths: [usize; 4],
    pub parts: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    /// Squeeze width of the fusion block is `max(4, width / reduction)`.
    pub fuse_reduction: usize,
    /// Two input streams fused after B1; otherwise a single stream.
    pub two_stream: bool,
    /// Batch normalization everywhere (off only for the scale test mode).
    pub normalize: bool,
    pub kind: HeadKind,
}

impl HeadConfig {
    pub fn reference(in_channels: usize, num_classes: usize) -> Self {
        Self {
            in_channels,
            widths: [64, 64, 128, 256],
            parts: 16,
            embed_dim: 256,
            num_classes,
            fuse_reduction: 4,
            two_stream: true,
            normalize: true,
            kind: HeadKind::Base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.widths.contains(&0) || self.parts == 0 || self.embed_dim == 0 {
            return Err(Error::Config("head widths, parts and embedding size must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.fuse_reduction == 0 {
            return Err(Error::Config("fuse_reduction must be positive".into()));
        }
        Ok(())
    }

    /// Feature-map height after the strided stages.
    pub fn output_height(&self, h: usize) -> usize {
        h.div_ceil(2).div_ceil(2)
    }

    fn squeeze(&self) -> usize {
        (self.widths[0] / self.fuse_reduction).max(4)
    }
}

/// Cross-and-select channel attention between two equally shaped maps.
pub struct Fuse {
    squeeze: Linear,
    excite_a: Linear,
    excite_b: Linear,
}

impl Fuse {
    pub fn new(name: &str, channels: usize, squeeze: usize) -> Self {
        Self {
            squeeze: Linear::new(format!("{name}.squeeze"), channels, squeeze, true),
            excite_a: Linear::new(format!("{name}.excite_a"), squeeze, channels, true),
            excite_b: Linear::new(format!("{name}.excite_b"), squeeze, channels, true),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.squeeze.init(store, rng);
        self.excite_a.init(store, rng);
        self.excite_b.init(store, rng);
    }

    /// Channel weight of stream `a` (N×C); stream `b` gets `1 - w_a`.
    pub fn weights(&self, f: &mut Forward, a: Var, b: Var) -> Result<Var> {
        if f.graph.shape(a) != f.graph.shape(b) {
            return Err(Error::Shape(format!(
                "fusion inputs differ: {:?} vs {:?}",
                f.graph.shape(a),
                f.graph.shape(b)
            )));
        }
        let sum = f.graph.add(a, b);
        let s = f.graph.global_avg_pool(sum);
        let z = self.squeeze.forward(f, s);
        let z = f.graph.relu(z);
        let la = self.excite_a.forward(f, z);
        let lb = self.excite_b.forward(f, z);
        // two-way softmax over (la, lb) = sigmoid(la - lb)
        let d = f.graph.sub(la, lb);
        Ok(f.graph.sigmoid(d))
    }

    pub fn forward(&self, f: &mut Forward, a: Var, b: Var) -> Result<Var> {
        let wa = self.weights(f, a, b)?;
        let wb = f.graph.affine(wa, -1.0, 1.0);
        let pa = f.graph.channel_scale(a, wa);
        let pb = f.graph.channel_scale(b, wb);
        Ok(f.graph.add(pa, pb))
    }
}

pub struct HeadOutput {
    /// N×P×D pre-BN embedding (triplet path).
    pub embedding: Var,
    /// N×P×K class logits from the BN-neck features.
    pub logits: Option<Var>,
}

/// Forward-pass switches.
#[derive(Clone, Copy, Debug, Default)]
pub struct HeadOptions {
    pub logits: bool,
    /// Insert gradient-tracking identities at the saliency taps.
    pub watch_taps: bool,
}

pub struct Head {
    pub cfg: HeadConfig,
    b1_ap: Stem,
    b1_de: Option<Stem>,
    fuse: Option<Fuse>,
    b2: BasicBlock,
    b3: BasicBlock,
    b4: BasicBlock,
    proj: PartLinear,
    neck: Option<BatchNorm>,
    classifier: PartLinear,
}

impl Head {
    pub fn new(cfg: HeadConfig) -> Result<Self> {
        cfg.validate()?;
        let [w1, w2, w3, w4] = cfg.widths;
        let n = cfg.normalize;
        Ok(Self {
            b1_ap: Stem::new("head.b1_ap", cfg.in_channels, w1, n),
            b1_de: cfg.two_stream.then(|| Stem::new("head.b1_de", cfg.in_channels, w1, n)),
            fuse: cfg.two_stream.then(|| Fuse::new("head.fuse", w1, cfg.squeeze())),
            b2: BasicBlock::new("head.b2", w1, w2, 2, n),
            b3: BasicBlock::new("head.b3", w2, w3, 2, n),
            b4: BasicBlock::new("head.b4", w3, w4, 1, n),
            proj: PartLinear {
                name: "head.proj".into(),
                parts: cfg.parts,
                in_features: w4,
                out_features: cfg.embed_dim,
                init: Init::FanOutNormal,
            },
            neck: n.then(|| BatchNorm::new("head.neck", cfg.parts * cfg.embed_dim)),
            classifier: PartLinear {
                name: "head.classifier".into(),
                parts: cfg.parts,
                in_features: cfg.embed_dim,
                out_features: cfg.num_classes,
                init: Init::Normal(0.001),
            },
            cfg,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.b1_ap.init(store, rng);
        if let Some(b) = &self.b1_de {
            b.init(store, rng);
        }
        if let Some(fu) = &self.fuse {
            fu.init(store, rng);
        }
        self.b2.init(store, rng);
        self.b3.init(store, rng);
        self.b4.init(store, rng);
        self.proj.init(store, rng);
        if let Some(bn) = &self.neck {
            bn.init(store);
        }
        self.classifier.init(store, rng);
    }

    fn watched(f: &mut Forward, name: &str, v: Var, opts: HeadOptions) -> Var {
        let v = if opts.watch_taps { f.graph.watch(v) } else { v };
        f.tap(name, v);
        v
    }

    /// `ap` and (for two streams) `de` are (N·L)×C×H×W, grouped by sequence.
    pub fn forward(
        &self,
        f: &mut Forward,
        ap: Var,
        de: Option<Var>,
        frames_per_seq: usize,
        opts: HeadOptions,
    ) -> Result<HeadOutput> {
        let shape = f.graph.shape(ap).to_vec();
        if shape.len() != 4 || shape[1] != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "head expects (N·L)×{}×H×W, got {shape:?}",
                self.cfg.in_channels
            )));
        }
        if frames_per_seq == 0 || shape[0] == 0 || shape[0] % frames_per_seq != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} frames do not split into sequences of {frames_per_seq}",
                shape[0]
            )));
        }
        let n_seq = shape[0] / frames_per_seq;
        let a = self.b1_ap.forward(f, ap);
        let a = Self::watched(f, TAP_B1_AP, a, opts);
        let x = match (&self.b1_de, &self.fuse, de) {
            (Some(b1_de), Some(fuse), Some(de)) => {
                if f.graph.shape(de) != shape.as_slice() {
                    return Err(Error::Shape("appearance and denoising streams differ in shape".into()));
                }
                let b = b1_de.forward(f, de);
                let b = Self::watched(f, TAP_B1_DE, b, opts);
                let fused = fuse.forward(f, a, b)?;
                Self::watched(f, TAP_FUSED, fused, opts)
            }
            (None, None, None) => a,
            _ => {
                return Err(Error::InvalidArgument(
                    "stream count does not match the head configuration".into(),
                ))
            }
        };
        let x = self.b2.forward(f, x);
        let pooled = match self.cfg.kind {
            HeadKind::Base => {
                let x = self.b3.forward(f, x);
                let x = self.b4.forward(f, x);
                temporal_max(&mut f.graph, x, n_seq, frames_per_seq)
            }
            HeadKind::SetPool => {
                let x = temporal_max(&mut f.graph, x, n_seq, frames_per_seq);
                let x = self.b3.forward(f, x);
                self.b4.forward(f, x)
            }
        };
        let parts = f.graph.part_pool(pooled, self.cfg.parts);
        let embedding = self.proj.forward(f, parts);
        let logits = if opts.logits {
            let feat = match &self.neck {
                Some(bn) => {
                    let flat = f.graph.reshape(embedding, &[n_seq, self.cfg.parts * self.cfg.embed_dim]);
                    let normed = bn.forward(f, flat);
                    f.graph.reshape(normed, &[n_seq, self.cfg.parts, self.cfg.embed_dim])
                }
                None => embedding,
            };
            Some(self.classifier.forward(f, feat))
        } else {
            None
        };
        Ok(HeadOutput { embedding, logits })
    }
}

/// (N·L)×C×H×W → N×C×H×W by elementwise max over each sequence's frames.
pub fn temporal_max(g: &mut Graph, x: Var, n_seq: usize, frames: usize) -> Var {
    let s = g.shape(x).to_vec();
    let grouped = g.reshape(x, &[n_seq, frames, s[1], s[2], s[3]]);
    g.max_axis1(grouped)
}

/// Mean plus max over P horizontal strips of a C×H×W map (last strip
/// absorbs the remainder): P×C.
pub fn horizontal_part_pool(feat: &Array3<f64>, parts: usize) -> Result<Array2<f64>> {
    let (c, h, w) = feat.dim();
    if parts == 0 || parts > h {
        return Err(Error::InvalidArgument(format!("{parts} parts for height {h}")));
    }
    let mut g = Graph::new();
    let x = g.constant(feat.clone().into_shape_with_order(IxDyn(&[1, c, h, w])).unwrap());
    let p = g.part_pool(x, parts);
    Ok(g.value(p).clone().into_shape_with_order((parts, c)).unwrap())
}
