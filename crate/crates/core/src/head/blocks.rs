use rand::Rng;

use crate::autograd::Var;
use crate::nn::{BatchNorm, Conv2d, Forward, ParamStore};

fn norm(f: &mut Forward, bn: &Option<BatchNorm>, x: Var) -> Var {
    match bn {
        Some(bn) => bn.forward(f, x),
        None => x,
    }
}

/// conv3×3 → BN → ReLU → conv3×3 → BN, plus a projected shortcut when the
/// shape changes, then ReLU.
pub struct BasicBlock {
    conv1: Conv2d,
    bn1: Option<BatchNorm>,
    conv2: Conv2d,
    bn2: Option<BatchNorm>,
    shortcut: Option<(Conv2d, Option<BatchNorm>)>,
}

impl BasicBlock {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, stride: usize, normalize: bool) -> Self {
        let bn = |suffix: &str| normalize.then(|| BatchNorm::new(format!("{name}.{suffix}"), out_ch));
        let shortcut = (stride != 1 || in_ch != out_ch).then(|| {
            (
                Conv2d::new(format!("{name}.down"), in_ch, out_ch, 1).stride(stride),
                bn("down_bn"),
            )
        });
        Self {
            conv1: Conv2d::new(format!("{name}.conv1"), in_ch, out_ch, 3).stride(stride),
            bn1: bn("bn1"),
            conv2: Conv2d::new(format!("{name}.conv2"), out_ch, out_ch, 3),
            bn2: bn("bn2"),
            shortcut,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.conv1.init(store, rng);
        self.conv2.init(store, rng);
        for bn in [&self.bn1, &self.bn2].into_iter().flatten() {
            bn.init(store);
        }
        if let Some((conv, bn)) = &self.shortcut {
            conv.init(store, rng);
            if let Some(bn) = bn {
                bn.init(store);
            }
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Var {
        let y = self.conv1.forward(f, x);
        let y = norm(f, &self.bn1, y);
        let y = f.graph.relu(y);
        let y = self.conv2.forward(f, y);
        let y = norm(f, &self.bn2, y);
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(f, x);
                norm(f, bn, s)
            }
            None => x,
        };
        let sum = f.graph.add(y, skip);
        f.graph.relu(sum)
    }
}

/// First stage: conv3×3 → BN → ReLU followed by one basic block.
pub struct Stem {
    pub(crate) conv: Conv2d,
    pub(crate) bn: Option<BatchNorm>,
    block: BasicBlock,
}

impl Stem {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, normalize: bool) -> Self {
        Self {
            conv: Conv2d::new(format!("{name}.conv"), in_ch, out_ch, 3),
            bn: normalize.then(|| BatchNorm::new(format!("{name}.bn"), out_ch)),
            block: BasicBlock::new(&format!("{name}.block"), out_ch, out_ch, 1, normalize),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.conv.init(store, rng);
        if let Some(bn) = &self.bn {
            bn.init(store);
        }
        self.block.init(store, rng);
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Var {
        let y = self.conv.forward(f, x);
        let y = norm(f, &self.bn, y);
        let y = f.graph.relu(y);
        self.block.forward(f, y)
    }
}
