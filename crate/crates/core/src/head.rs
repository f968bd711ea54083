//! Residual embedding, cosine scores and the weighted binomial deviance loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activation::ActivationMap;
use crate::error::{Error, Result};
use crate::graph::{sigmoid, softplus, Graph, Var};
use crate::init::glorot_uniform;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Embedding width `E`.
    pub embed_dim: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { embed_dim: 512 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 2.0, beta: 0.5 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "loss.alpha must be positive and finite (alpha={}, beta={})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Fully connected projection shared by both residual branches.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    /// `K·K·D × E`
    pub w_fc: Tensor<T>,
    pub b_fc: Tensor<T>,
}

impl<T: Real> HeadParams<T> {
    pub fn init(k: usize, d: usize, cfg: &HeadConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.embed_dim < 2 {
            return Err(Error::Config(format!("head.embed_dim must be at least 2, got {}", cfg.embed_dim)));
        }
        let n = k * k * d;
        Ok(HeadParams {
            w_fc: glorot_uniform([n, cfg.embed_dim], n, cfg.embed_dim, rng),
            b_fc: Tensor::zeros([cfg.embed_dim]),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.w_fc.shape()[1]
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![("w_fc", &self.w_fc), ("b_fc", &self.b_fc)]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.w_fc, &mut self.b_fc]
    }

    pub(crate) fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> (Var, Var) {
        (g.param(&self.w_fc), g.param(&self.b_fc))
    }
}

/// `normalize(W_fcᵀ·flatten(|g − F̃|) + b_fc)` on the graph.
pub(crate) fn embed_vars<T: Real>(
    g: &mut Graph<'_, T>,
    map: Var,
    context: Var,
    (w, b): (Var, Var),
) -> Result<Var> {
    let diff = g.sub(map, context)?;
    let mag = g.abs(diff);
    let n = g.value(mag).len();
    let flat = g.reshape(mag, &[n])?;
    let e = g.affine(flat, w, b)?;
    g.l2_normalize(e)
}

/// Embedding of one branch. The flag is set when the pre-normalization vector
/// was zero and the result was left unnormalized.
pub fn residual_embed<T: Real>(
    map: &ActivationMap<T>,
    context: &ActivationMap<T>,
    head: &HeadParams<T>,
) -> Result<(Tensor<T>, bool)> {
    if map.tensor().shape() != context.tensor().shape() {
        return Err(Error::shape("residual_embed", map.tensor().shape(), context.tensor().shape()));
    }
    let flat_len = map.tensor().len();
    if head.w_fc.shape()[0] != flat_len {
        return Err(Error::shape("residual_embed", &[flat_len], head.w_fc.shape()));
    }
    let mut g = Graph::new();
    let a = g.constant(map.tensor().clone());
    let c = g.constant(context.tensor().clone());
    let vars = head.bind(&mut g);
    let e = embed_vars(&mut g, a, c, vars)?;
    Ok((g.value(e).clone(), g.is_degenerate_norm(e)))
}

/// `S[i][j] = cos(a_i, b_j)` as an `n_a × n_b` tensor.
pub fn cosine_similarity_matrix<T: Real>(a: &[Tensor<T>], b: &[Tensor<T>]) -> Result<Tensor<T>> {
    let norms = |side: &'static str, v: &[Tensor<T>]| -> Result<Vec<T>> {
        v.iter()
            .enumerate()
            .map(|(i, x)| {
                let n = x.norm();
                if n == T::zero() {
                    Err(Error::Degenerate {
                        op: "cosine_similarity_matrix",
                        msg: format!("zero vector at {side}[{i}]"),
                    })
                } else {
                    Ok(n)
                }
            })
            .collect()
    };
    let (na, nb) = (norms("a", a)?, norms("b", b)?);
    let mut out = Vec::with_capacity(a.len() * b.len());
    for (x, &nx) in a.iter().zip(&na) {
        for (y, &ny) in b.iter().zip(&nb) {
            if x.shape() != y.shape() {
                return Err(Error::shape("cosine_similarity_matrix", x.shape(), y.shape()));
            }
            let c = x.dot(y) / (nx * ny);
            out.push(c.max(-T::one()).min(T::one()));
        }
    }
    Tensor::new([a.len(), b.len()], out)
}

/// Pair labels and class-balancing weights over all `n²` ordered pairs of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Supervision {
    pub n: usize,
    /// `+1` same identity, `−1` otherwise; row-major `n×n`.
    pub m: Vec<f64>,
    /// `1/n1` on positives, `1/n2` on negatives.
    pub w: Vec<f64>,
    pub n1: usize,
    pub n2: usize,
}

impl Supervision {
    pub fn from_labels(labels: &[usize]) -> Result<Self> {
        let n = labels.len();
        let m: Vec<f64> = labels
            .iter()
            .flat_map(|a| labels.iter().map(move |b| if a == b { 1.0 } else { -1.0 }))
            .collect();
        let n1 = m.iter().filter(|&&v| v > 0.0).count();
        let n2 = n * n - n1;
        if n1 == 0 || n2 == 0 {
            return Err(Error::Invalid {
                op: "supervision",
                msg: format!("batch needs positive and negative pairs (n1={n1}, n2={n2})"),
            });
        }
        let (w1, w2) = (1.0 / n1 as f64, 1.0 / n2 as f64);
        let w = m.iter().map(|&v| if v > 0.0 { w1 } else { w2 }).collect();
        Ok(Supervision { n, m, w, n1, n2 })
    }

    pub fn at(&self, i: usize, j: usize) -> (f64, f64) {
        (self.m[i * self.n + j], self.w[i * self.n + j])
    }
}

fn check_scores<T: Real>(s: &Tensor<T>, sup: &Supervision) -> Result<()> {
    if s.shape() != [sup.n, sup.n] {
        return Err(Error::shape("binomial_deviance_loss", s.shape(), &[sup.n, sup.n]));
    }
    s.ensure_finite("score matrix")
}

/// `Σ W ⊙ softplus(−α(S−β) ⊙ M)`.
pub fn binomial_deviance_loss<T: Real>(s: &Tensor<T>, sup: &Supervision, cfg: &LossConfig) -> Result<T> {
    check_scores(s, sup)?;
    let (alpha, beta) = (T::of(cfg.alpha), T::of(cfg.beta));
    Ok(s.data()
        .iter()
        .zip(sup.m.iter().zip(&sup.w))
        .map(|(&sv, (&m, &w))| T::of(w) * softplus(-alpha * (sv - beta) * T::of(m)))
        .sum())
}

/// `∂L/∂S = −W ⊙ α M ⊙ σ(−α(S−β) ⊙ M)`.
pub fn binomial_deviance_grad<T: Real>(
    s: &Tensor<T>,
    sup: &Supervision,
    cfg: &LossConfig,
) -> Result<Tensor<T>> {
    check_scores(s, sup)?;
    let (alpha, beta) = (T::of(cfg.alpha), T::of(cfg.beta));
    let g = s
        .data()
        .iter()
        .zip(sup.m.iter().zip(&sup.w))
        .map(|(&sv, (&m, &w))| {
            let m = T::of(m);
            -T::of(w) * alpha * m * sigmoid(-alpha * (sv - beta) * m)
        })
        .collect();
    Tensor::new(s.shape().to_vec(), g)
}
