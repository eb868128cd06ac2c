//! SGD with momentum and L2 weight decay, in the PyTorch update order:
//! d = g + wd·p; buf = m·buf + d (buf = d on first use); p -= lr·buf.

use std::collections::BTreeMap;

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Apply weight decay to parameters registered without it (BN affine).
    pub decay_bn: bool,
    pub grad_clip: Option<f64>,
    buffers: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64, decay_bn: bool) -> Self {
        Self {
            momentum,
            weight_decay,
            decay_bn,
            grad_clip: None,
            buffers: BTreeMap::new(),
        }
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn set_buffers(&mut self, buffers: BTreeMap<String, Tensor>) {
        self.buffers = buffers;
    }

    /// One update. Gradients are checked for finiteness before any
    /// parameter is touched; the error names the first offending parameter
    /// in name order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        if let Some((name, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("gradient of parameter {name}")));
        }
        let scale = match self.grad_clip {
            Some(max) => {
                let norm = grads.values().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for (name, grad) in grads {
            let decay = if store.decays(name) || self.decay_bn { self.weight_decay } else { 0.0 };
            let param = store
                .param_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter {name}")))?;
            if param.shape() != grad.shape() {
                return Err(Error::Shape(format!("gradient of {name} has shape {:?}", grad.shape())));
            }
            let mut d = if scale == 1.0 { grad.clone() } else { grad * scale };
            if decay != 0.0 {
                d.zip_mut_with(param, |d, p| *d += decay * p);
            }
            let m = self.momentum;
            let fresh = m == 0.0 || !self.buffers.contains_key(name);
            let buf = self.buffers.entry(name.clone()).or_insert_with(|| Tensor::zeros(d.raw_dim()));
            if fresh {
                *buf = d;
            } else {
                buf.zip_mut_with(&d, |b, d| *b = m * *b + d);
            }
            param.zip_mut_with(buf, |p, b| *p -= lr * b);
        }
        Ok(())
    }
}
