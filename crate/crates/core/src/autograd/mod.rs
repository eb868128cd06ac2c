//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value,
//! its parents and a closure mapping the output gradient to parent
//! gradients. [`Graph::backward`] walks the tape in reverse. Graphs are
//! built fresh for every forward pass and dropped afterwards.

mod ops;

pub use ops::{BnOutput, BnStats};

use ndarray::{ArrayD, IxDyn};

pub type Tensor = ArrayD<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps (output gradient, parent values, output value, parent needs-grad
/// flags) to one optional gradient per parent.
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "scalar() on tensor of shape {:?}", t.shape());
        *t.iter().next().unwrap()
    }

    /// Appends an operation node. The backward closure is dropped when no
    /// parent requires a gradient.
    pub fn push(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.requires_grad(*p));
        self.nodes.push(Node {
            value,
            parents: parents.to_vec(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Identity node that is forced to track gradients, used to read the
    /// gradient at an intermediate activation of an otherwise frozen graph.
    pub fn watch(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.nodes.push(Node {
            value,
            parents: vec![v],
            backward: Some(Box::new(|g, _, _, needs| vec![needs[0].then(|| g.clone())])),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.value(root).len(),
            1,
            "backward() needs a scalar root, got shape {:?}",
            self.shape(root)
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(self.value(root).raw_dim()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].as_ref() else {
                continue;
            };
            let parent_values: Vec<&Tensor> =
                node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let parent_grads = backward(g, &parent_values, &node.value, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p.0].value.shape());
                match grads[p.0].as_mut() {
                    Some(acc) => *acc += &pg,
                    None => grads[p.0] = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed in.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(like.raw_dim()))
    }
}

pub fn scalar_tensor(x: f64) -> Tensor {
    ArrayD::from_elem(IxDyn(&[]), x)
}

/// Finite-difference gradient checking.
pub mod check {
    use super::*;

    /// Relative error `|a - n| / max(|a|, |n|)` (Euclidean norms over all
    /// entries) between the analytic gradient of `f(graph, x)` and central
    /// finite differences with the given step.
    pub fn relative_error(x: &Tensor, step: f64, f: impl Fn(&mut Graph, Var) -> Var) -> f64 {
        let (analytic, numeric) = gradients(x, step, f);
        let diff = analytic
            .iter()
            .zip(numeric.iter())
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = norm(&analytic).max(norm(&numeric));
        if scale == 0.0 {
            0.0
        } else {
            diff / scale
        }
    }

    /// Analytic and central-difference gradients of `f(graph, x)`.
    pub fn gradients(
        x: &Tensor,
        step: f64,
        f: impl Fn(&mut Graph, Var) -> Var,
    ) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let out = f(&mut g, xv);
        let analytic = g.backward(out).get_or_zeros(xv, x);

        let eval = |t: Tensor| {
            let mut g = Graph::new();
            let v = g.leaf(t);
            let out = f(&mut g, v);
            g.scalar(out)
        };
        let x = x.as_standard_layout().to_owned();
        let mut numeric = Tensor::zeros(x.raw_dim());
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.as_slice_mut().unwrap()[i] += step;
            let mut minus = x.clone();
            minus.as_slice_mut().unwrap()[i] -= step;
            numeric.as_slice_mut().unwrap()[i] = (eval(plus) - eval(minus)) / (2.0 * step);
        }
        (analytic, numeric)
    }

    fn norm(t: &Tensor) -> f64 {
        t.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}
