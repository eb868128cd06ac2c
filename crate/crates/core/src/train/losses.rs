//! Recognition losses and the weighted training objective.

use ndarray::{Array3, Ix3};
use serde::{Deserialize, Serialize};

use crate::autograd::{scalar_tensor, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gamma_rec: f64,
    pub gamma_smo: f64,
    pub gamma_div: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma_rec: 1.0,
            gamma_smo: 0.01,
            gamma_div: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.gamma_rec, self.gamma_smo, self.gamma_div].iter().all(|w| *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be ≥ 0, got {self:?}")))
        }
    }
}

/// The five pre-weighting components of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub tri: f64,
    pub ce: f64,
    pub rec: f64,
    pub smo: f64,
    pub div: f64,
}

impl LossComponents {
    fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("L_tri", self.tri),
            ("L_ce", self.ce),
            ("L_rec", self.rec),
            ("L_smo", self.smo),
            ("L_div", self.div),
        ]
    }

    /// First non-finite component, by name.
    pub fn check_finite(&self) -> Result<()> {
        match self.named().into_iter().find(|(_, v)| !v.is_finite()) {
            Some((name, _)) => Err(Error::NonFinite(name.into())),
            None => Ok(()),
        }
    }
}

/// L_tri + L_ce + γ_rec·L_rec + γ_smo·L_smo + γ_div·L_div.
pub fn combined_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    c.check_finite()?;
    Ok(c.tri + c.ce + w.gamma_rec * c.rec + w.gamma_smo * c.smo + w.gamma_div * c.div)
}

/// Graph form of [`combined_loss`]; `parts` is (tri, ce, rec, smo, div).
pub fn combined(g: &mut Graph, parts: [Var; 5], w: &LossWeights) -> Result<Var> {
    let c = LossComponents {
        tri: g.scalar(parts[0]),
        ce: g.scalar(parts[1]),
        rec: g.scalar(parts[2]),
        smo: g.scalar(parts[3]),
        div: g.scalar(parts[4]),
    };
    c.check_finite()?;
    Ok(g.weighted_sum(&[
        (parts[0], 1.0),
        (parts[1], 1.0),
        (parts[2], w.gamma_rec),
        (parts[3], w.gamma_smo),
        (parts[4], w.gamma_div),
    ]))
}

fn as3(t: &Tensor, what: &str) -> Result<Array3<f64>> {
    t.view()
        .into_dimensionality::<Ix3>()
        .map(|v| v.as_standard_layout().to_owned())
        .map_err(|_| Error::Shape(format!("{what} must be 3-d, got {:?}", t.shape())))
}

/// Euclidean distances between rows `i`, `j` of part `p`, for all pairs.
fn part_distances(x: &Array3<f64>, p: usize) -> Vec<Vec<f64>> {
    let n = x.dim().0;
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let a = x.slice(ndarray::s![i, p, ..]);
            let b = x.slice(ndarray::s![j, p, ..]);
            let s: f64 = a.iter().zip(b.iter()).map(|(u, v)| (u - v) * (u - v)).sum();
            d[i][j] = s.sqrt();
            d[j][i] = d[i][j];
        }
    }
    d
}

/// Batch-all triplet loss on N×P×D embeddings.
///
/// Per part: hinge terms over every (a, p, n) with a ≠ p, label(a) =
/// label(p) ≠ label(n), averaged over the nonzero terms (0 when none);
/// then averaged over parts.
pub fn triplet_loss(g: &mut Graph, emb: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let x = as3(g.value(emb), "triplet embeddings")?;
    let (n, parts, dim) = x.dim();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} embeddings", labels.len())));
    }
    let valid = (0..n).any(|a| {
        (0..n).any(|p| p != a && labels[p] == labels[a]) && (0..n).any(|q| labels[q] != labels[a])
    });
    if !valid {
        return Err(Error::NoValidTriplet);
    }
    let mut total = 0.0;
    // d loss / d distance(i, j), per part
    let mut dist_grad = Vec::with_capacity(parts);
    let mut dists = Vec::with_capacity(parts);
    for p in 0..parts {
        let d = part_distances(&x, p);
        let mut coef = vec![vec![0.0; n]; n];
        let mut sum = 0.0;
        let mut active = 0usize;
        for a in 0..n {
            for q in 0..n {
                if q == a || labels[q] != labels[a] {
                    continue;
                }
                for r in 0..n {
                    if labels[r] == labels[a] {
                        continue;
                    }
                    let term = d[a][q] - d[a][r] + margin;
                    if term > 0.0 {
                        sum += term;
                        active += 1;
                        coef[a][q] += 1.0;
                        coef[a][r] -= 1.0;
                    }
                }
            }
        }
        if active > 0 {
            total += sum / active as f64;
            let k = 1.0 / (active as f64 * parts as f64);
            coef.iter_mut().flatten().for_each(|c| *c *= k);
        }
        dist_grad.push(coef);
        dists.push(d);
    }
    let value = scalar_tensor(total / parts as f64);
    Ok(g.push(
        value,
        &[emb],
        Box::new(move |grad, _, _, _| {
            let go = grad.sum();
            let mut dx = Array3::<f64>::zeros((n, parts, dim));
            for p in 0..parts {
                for i in 0..n {
                    for j in 0..n {
                        let c = dist_grad[p][i][j];
                        let d = dists[p][i][j];
                        if c == 0.0 || d == 0.0 {
                            continue;
                        }
                        let s = go * c / d;
                        for k in 0..dim {
                            let diff = x[[i, p, k]] - x[[j, p, k]];
                            dx[[i, p, k]] += s * diff;
                            dx[[j, p, k]] -= s * diff;
                        }
                    }
                }
            }
            vec![Some(dx.into_dyn())]
        }),
    ))
}

/// Per-part softmax cross-entropy on N×P×K logits, averaged over samples
/// and parts.
pub fn ce_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let x = as3(g.value(logits), "logits")?;
    let (n, parts, k) = x.dim();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} logit rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
    }
    let mut probs = Array3::<f64>::zeros((n, parts, k));
    let mut total = 0.0;
    for i in 0..n {
        for p in 0..parts {
            let row = x.slice(ndarray::s![i, p, ..]);
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[labels[i]];
            for c in 0..k {
                probs[[i, p, c]] = (row[c] - lse).exp();
            }
        }
    }
    let scale = 1.0 / (n * parts) as f64;
    let labels = labels.to_vec();
    Ok(g.push(
        scalar_tensor(total * scale),
        &[logits],
        Box::new(move |grad, _, _, _| {
            let go = grad.sum() * scale;
            let mut dx = probs.clone();
            for (i, &l) in labels.iter().enumerate() {
                for p in 0..parts {
                    dx[[i, p, l]] -= 1.0;
                }
            }
            vec![Some((dx * go).into_dyn())]
        }),
    ))
}
