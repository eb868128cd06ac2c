//! Named parameters and the handful of layers the extractor and head are
//! built from.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use ndarray::{Array1, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{BnStats, Graph, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Trainable tensors and non-trainable buffers, keyed by dotted name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
    no_decay: BTreeSet<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_param(&mut self, name: impl Into<String>, value: Tensor, decay: bool) {
        let name = name.into();
        if !decay {
            self.no_decay.insert(name.clone());
        }
        self.params.insert(name, value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn decays(&self, name: &str) -> bool {
        !self.no_decay.contains(name)
    }

    pub fn no_decay_names(&self) -> impl Iterator<Item = &String> {
        self.no_decay.iter()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Folds batch statistics into running buffers:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            for (suffix, stat) in [("running_mean", &u.mean), ("running_var", &u.var)] {
                let key = format!("{}.{suffix}", u.layer);
                let buf = self
                    .buffers
                    .get_mut(&key)
                    .unwrap_or_else(|| panic!("missing buffer {key}"));
                let stat = stat.view().into_dyn();
                buf.zip_mut_with(&stat, |r, &b| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b);
            }
        }
    }
}

/// Batch statistics produced by one training-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub layer: String,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: a fresh graph with parameters bound lazily as leaves.
pub struct Forward<'s> {
    pub graph: Graph,
    store: &'s ParamStore,
    bound: HashMap<String, Var>,
    mode: Mode,
    track_params: bool,
    bn_updates: Vec<BnUpdate>,
    taps: Vec<(String, Var)>,
}

impl<'s> Forward<'s> {
    /// `track_params = false` binds parameters as constants (inference).
    pub fn new(store: &'s ParamStore, mode: Mode, track_params: bool) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: HashMap::new(),
            mode,
            track_params,
            bn_updates: Vec::new(),
            taps: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&mut self, name: &str) -> Var {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let value = self
            .store
            .param(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .clone();
        let v = if self.track_params {
            self.graph.leaf(value)
        } else {
            self.graph.constant(value)
        };
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn buffer(&self, name: &str) -> &Tensor {
        self.store
            .buffer(name)
            .unwrap_or_else(|| panic!("unknown buffer {name}"))
    }

    /// Parameters bound during this pass.
    pub fn bound_params(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.bound.iter()
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Records a named intermediate activation (for saliency maps).
    pub fn tap(&mut self, name: &str, v: Var) {
        self.taps.push((name.to_string(), v));
    }

    pub fn tapped(&self, name: &str) -> Option<Var> {
        self.taps.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Weight initialization rules.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_out)`.
    FanOutNormal,
    Normal(f64),
    Zeros,
    Ones,
}

fn init_tensor(shape: &[usize], fan_out: usize, init: Init, rng: &mut impl Rng) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(IxDyn(shape)),
        Init::Ones => Tensor::ones(IxDyn(shape)),
        Init::FanOutNormal | Init::Normal(_) => {
            let std = match init {
                Init::Normal(s) => s,
                _ => (2.0 / fan_out.max(1) as f64).sqrt(),
            };
            let dist = Normal::new(0.0, std).unwrap();
            Tensor::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng))
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            pad: kernel / 2,
            bias: false,
        }
    }

    /// 1×1 convolution with bias: a per-pixel affine map over channels.
    pub fn pointwise(name: impl Into<String>, in_ch: usize, out_ch: usize) -> Self {
        Self {
            bias: true,
            ..Self::new(name, in_ch, out_ch, 1)
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let k = self.kernel;
        let w = init_tensor(
            &[self.out_ch, self.in_ch, k, k],
            self.out_ch * k * k,
            Init::FanOutNormal,
            rng,
        );
        store.insert_param(self.weight_name(), w, true);
        if self.bias {
            store.insert_param(self.bias_name(), Tensor::zeros(IxDyn(&[self.out_ch])), true);
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Var {
        let w = f.param(&self.weight_name());
        let b = self.bias.then(|| f.param(&self.bias_name()));
        f.graph.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        let c = self.channels;
        store.insert_param(format!("{}.weight", self.name), Tensor::ones(IxDyn(&[c])), false);
        store.insert_param(format!("{}.bias", self.name), Tensor::zeros(IxDyn(&[c])), false);
        store.insert_buffer(format!("{}.running_mean", self.name), Tensor::zeros(IxDyn(&[c])));
        store.insert_buffer(format!("{}.running_var", self.name), Tensor::ones(IxDyn(&[c])));
    }

    /// Normalizes over every axis but axis 1. Training mode uses batch
    /// statistics and records them for the running averages.
    pub fn forward(&self, f: &mut Forward, x: Var) -> Var {
        let gamma = f.param(&format!("{}.weight", self.name));
        let beta = f.param(&format!("{}.bias", self.name));
        let stats = match f.mode() {
            Mode::Train => BnStats::Batch { eps: BN_EPS },
            Mode::Eval => BnStats::Fixed {
                mean: to_array1(f.buffer(&format!("{}.running_mean", self.name))),
                var: to_array1(f.buffer(&format!("{}.running_var", self.name))),
                eps: BN_EPS,
            },
        };
        let out = f.graph.batch_norm(x, gamma, beta, stats);
        if let Some((mean, var)) = out.batch_stats {
            f.bn_updates.push(BnUpdate {
                layer: self.name.clone(),
                mean,
                var,
            });
        }
        out.out
    }
}

fn to_array1(t: &Tensor) -> Array1<f64> {
    t.iter().copied().collect()
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_features: usize, out_features: usize, bias: bool) -> Self {
        Self {
            name: name.into(),
            in_features,
            out_features,
            bias,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let w = init_tensor(
            &[self.out_features, self.in_features],
            self.out_features,
            Init::FanOutNormal,
            rng,
        );
        store.insert_param(format!("{}.weight", self.name), w, true);
        if self.bias {
            store.insert_param(
                format!("{}.bias", self.name),
                Tensor::zeros(IxDyn(&[self.out_features])),
                true,
            );
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Var {
        let w = f.param(&format!("{}.weight", self.name));
        let b = self.bias.then(|| f.param(&format!("{}.bias", self.name)));
        f.graph.linear(x, w, b)
    }
}

/// Stack of independent per-part linear maps (P×F×O weight, no bias).
#[derive(Clone, Debug)]
pub struct PartLinear {
    pub name: String,
    pub parts: usize,
    pub in_features: usize,
    pub out_features: usize,
    pub init: Init,
}

impl PartLinear {
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let w = init_tensor(
            &[self.parts, self.in_features, self.out_features],
            self.out_features,
            self.init,
            rng,
        );
        store.insert_param(format!("{}.weight", self.name), w, true);
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Var {
        let w = f.param(&format!("{}.weight", self.name));
        f.graph.part_linear(x, w)
    }
}
