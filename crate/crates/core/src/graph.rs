//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! already a topological order, so backward is a single reverse scan that
//! visits each node once. Parameters are borrowed, so binding a model to a
//! fresh graph copies nothing.

use std::borrow::Cow;

use crate::conv::{col2im, im2col, ConvGeom};
use crate::error::{Error, Result};
use crate::spatial::irnn::{sweep_backward, sweep_forward};
use crate::spatial::pool::{bin_tile_backward, bin_tile_forward, spp_forward, spp_len};
use crate::spatial::Direction;
use crate::tensor::{matmul, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation families, used for reporting and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Hadamard,
    Scale,
    MulConst,
    Abs,
    Relu,
    Sigmoid,
    Linear,
    BiasAdd,
    Concat,
    Reshape,
    Sum,
    Sweep,
    Conv2d,
    SppPool,
    BinTile,
    GlobalAvgUnpool,
    L2Normalize,
    Cosine,
    Deviance,
}

impl std::str::FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kinds = [
            OpKind::Add,
            OpKind::Sub,
            OpKind::Hadamard,
            OpKind::Scale,
            OpKind::MulConst,
            OpKind::Abs,
            OpKind::Relu,
            OpKind::Sigmoid,
            OpKind::Linear,
            OpKind::BiasAdd,
            OpKind::Concat,
            OpKind::Reshape,
            OpKind::Sum,
            OpKind::Sweep,
            OpKind::Conv2d,
            OpKind::SppPool,
            OpKind::BinTile,
            OpKind::GlobalAvgUnpool,
            OpKind::L2Normalize,
            OpKind::Cosine,
            OpKind::Deviance,
        ];
        kinds
            .into_iter()
            .find(|k| format!("{k:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown op kind {s:?}")))
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, T),
    MulConst(Var, Vec<T>),
    Abs(Var),
    Relu(Var),
    Sigmoid(Var),
    Linear { x: Var, w: Var },
    BiasAdd { x: Var, b: Var },
    Concat { parts: Vec<Var>, widths: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    Sweep { x: Var, w: Var, dir: Direction },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<T> },
    SppPool { x: Var, argmax: Vec<usize> },
    BinTile { v: Var, levels: Vec<usize>, k: usize },
    GlobalAvgUnpool(Var),
    L2Normalize { x: Var, norm: T },
    Cosine { a: Var, b: Var },
    Deviance { s: Var, m: Vec<T>, w: Vec<T>, alpha: T, beta: T },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Hadamard(..) => OpKind::Hadamard,
            Op::Scale(..) => OpKind::Scale,
            Op::MulConst(..) => OpKind::MulConst,
            Op::Abs(_) => OpKind::Abs,
            Op::Relu(_) => OpKind::Relu,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Linear { .. } => OpKind::Linear,
            Op::BiasAdd { .. } => OpKind::BiasAdd,
            Op::Concat { .. } => OpKind::Concat,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Sum(_) => OpKind::Sum,
            Op::Sweep { .. } => OpKind::Sweep,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::SppPool { .. } => OpKind::SppPool,
            Op::BinTile { .. } => OpKind::BinTile,
            Op::GlobalAvgUnpool(_) => OpKind::GlobalAvgUnpool,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::Cosine { .. } => OpKind::Cosine,
            Op::Deviance { .. } => OpKind::Deviance,
        }
    }
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// A differentiation tape. Parameters may be borrowed for the graph's lifetime.
pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    fault: Option<OpKind>,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Gradient of `v`, or zeros shaped like `v` when nothing flowed into it.
    pub fn take_or_zeros(&mut self, v: Var, graph: &Graph<'_, T>) -> Tensor<T> {
        self.take(v)
            .unwrap_or_else(|| Tensor::zeros(graph.value(v).shape().to_vec()))
    }
}

fn rows_of(shape: &[usize]) -> usize {
    shape[..shape.len() - 1].iter().product()
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Negates every backward contribution of one op kind. Exists so tests can
    /// confirm the gradient checker detects a broken backward.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `[1]`-shaped node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf borrowing its value (model parameters).
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf; `needs_grad` selects whether gradients flow into it.
    pub fn input(&mut self, t: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.input(t, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "hadamard", |x, y| x * y)?;
        Ok(self.push(out, Op::Hadamard(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: &Tensor<T>) -> Result<Var> {
        let out = self.value(a).zip_map(mask, "mul_const", |x, y| x * y)?;
        Ok(self.push(out, Op::MulConst(a, mask.data().to_vec()), &[a]))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.abs());
        self.push(out, Op::Abs(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    /// Contracts the last axis of `x` (`[.., n]`) with `w` (`[n, m]`): `xᵀW` per row.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws.len() != 2 || *xs.last().unwrap() != ws[0] {
            return Err(Error::shape("linear", xs, ws));
        }
        let (rows, n, m) = (rows_of(xs), ws[0], ws[1]);
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = m;
        let mut out = vec![T::zero(); rows * m];
        matmul(
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            rows,
            n,
            m,
            false,
        );
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::Linear { x, w }, &[x, w]))
    }

    /// Adds `b` (`[m]`) to every row of `x` (`[.., m]`).
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if bs.len() != 1 || *xs.last().unwrap() != bs[0] {
            return Err(Error::shape("bias_add", xs, bs));
        }
        let m = bs[0];
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        for row in out.data_mut().chunks_mut(m) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::BiasAdd { x, b }, &[x, b]))
    }

    /// `Wᵀx + b` along the last axis.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.linear(x, w)?;
        self.bias_add(y, b)
    }

    /// Concatenates along the last axis; all leading dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", self.shape(*first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                widths,
            },
            parts,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    /// One directional ReLU recurrence over a `K×K×H` map with recurrent matrix `w` (`H×H`).
    pub fn sweep(&mut self, x: Var, w: Var, dir: Direction) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 3 || xs[0] != xs[1] || ws.len() != 2 || ws[0] != xs[2] || ws[1] != xs[2] {
            return Err(Error::shape("irnn_sweep", xs, ws));
        }
        let (k, h) = (xs[0], xs[2]);
        let out = sweep_forward(self.value(x).data(), k, h, self.value(w).data(), dir);
        let out = Tensor::new(xs.to_vec(), out)?;
        Ok(self.push(out, Op::Sweep { x, w, dir }, &[x, w]))
    }

    /// Convolution of an `H×W×C` map with weights `[k, k, C, O]` and bias `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 3 || ws.len() != 4 || ws[0] != ws[1] || ws[2] != xs[2] || bs != [ws[3]] {
            return Err(Error::shape("conv2d", xs, ws));
        }
        let geom = ConvGeom {
            in_h: xs[0],
            in_w: xs[1],
            in_c: xs[2],
            kernel: ws[0],
            stride,
            pad,
            out_c: ws[3],
        };
        geom.validate()?;
        let cols = im2col(self.value(x).data(), &geom);
        let rows = geom.out_h() * geom.out_w();
        let mut out = vec![T::zero(); rows * geom.out_c];
        matmul(
            &cols,
            false,
            self.value(w).data(),
            false,
            &mut out,
            rows,
            geom.patch_len(),
            geom.out_c,
            false,
        );
        let bias = self.value(b).data();
        for row in out.chunks_mut(geom.out_c) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let out = Tensor::new([geom.out_h(), geom.out_w(), geom.out_c], out)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, geom, cols }, &[x, w, b]))
    }

    /// Multi-level max pooling of a `K×K×D` map into a `D·ΣL²` vector.
    pub fn spp_pool(&mut self, x: Var, levels: &[usize]) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 3 || xs[0] != xs[1] {
            return Err(Error::shape("spp_pool", xs, &[]));
        }
        let (k, d) = (xs[0], xs[2]);
        check_levels(levels, k)?;
        let (out, argmax) = spp_forward(self.value(x).data(), k, d, levels);
        let out = Tensor::new([out.len()], out)?;
        Ok(self.push(out, Op::SppPool { x, argmax }, &[x]))
    }

    /// Tiles pooled bins back onto a `K×K×D` map, averaging across levels.
    pub fn bin_tile(&mut self, v: Var, levels: &[usize], k: usize, d: usize) -> Result<Var> {
        check_levels(levels, k)?;
        if self.shape(v) != [d * spp_len(levels)] {
            return Err(Error::shape("bin_tile", self.shape(v), &[d * spp_len(levels)]));
        }
        let out = bin_tile_forward(self.value(v).data(), k, d, levels);
        let out = Tensor::new([k, k, d], out)?;
        Ok(self.push(
            out,
            Op::BinTile {
                v,
                levels: levels.to_vec(),
                k,
            },
            &[v],
        ))
    }

    /// Spatial mean of a `K×K×D` map, repeated at every cell.
    pub fn global_avg_unpool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("global_avg_unpool", &xs, &[]));
        }
        let (cells, d) = (xs[0] * xs[1], xs[2]);
        let mean = channel_mean(self.value(x).data(), cells, d);
        let mut out = Vec::with_capacity(cells * d);
        for _ in 0..cells {
            out.extend_from_slice(&mean);
        }
        let out = Tensor::new(xs, out)?;
        Ok(self.push(out, Op::GlobalAvgUnpool(x), &[x]))
    }

    /// Scales a vector to unit L2 norm. A zero vector passes through unchanged;
    /// [`Graph::is_degenerate_norm`] reports that case.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 1 {
            return Err(Error::shape("l2_normalize", self.shape(x), &[]));
        }
        let norm = self.value(x).norm();
        let out = if norm > T::zero() {
            self.value(x).scale(T::one() / norm)
        } else {
            self.value(x).clone()
        };
        Ok(self.push(out, Op::L2Normalize { x, norm }, &[x]))
    }

    /// True if `v` is an [`Graph::l2_normalize`] node whose input was the zero vector.
    pub fn is_degenerate_norm(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::L2Normalize { norm, .. } if norm == T::zero())
    }

    /// Cosine of the angle between two equal-length vectors.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let (na, nb) = (va.norm(), vb.norm());
        if na == T::zero() || nb == T::zero() {
            return Err(Error::Degenerate {
                op: "cosine",
                msg: format!("zero-norm input (|a|={na}, |b|={nb})"),
            });
        }
        let out = Tensor::scalar(va.dot(vb) / (na * nb));
        Ok(self.push(out, Op::Cosine { a, b }, &[a, b]))
    }

    /// Weighted binomial deviance `Σ W·softplus(−α(S−β)⊙M)` over an `n×n` score matrix.
    pub fn binomial_deviance(
        &mut self,
        s: Var,
        m: &[T],
        w: &[T],
        alpha: T,
        beta: T,
    ) -> Result<Var> {
        let n = self.value(s).len();
        if m.len() != n || w.len() != n {
            return Err(Error::shape("binomial_deviance", self.shape(s), &[m.len(), w.len()]));
        }
        let total = self
            .value(s)
            .data()
            .iter()
            .zip(m.iter().zip(w))
            .map(|(&sv, (&mv, &wv))| wv * softplus(-alpha * (sv - beta) * mv))
            .sum();
        let out = Tensor::scalar(total);
        Ok(self.push(
            out,
            Op::Deviance {
                s,
                m: m.to_vec(),
                w: w.to_vec(),
                alpha,
                beta,
            },
            &[s],
        ))
    }

    /// Backward from a scalar root with seed 1.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("root must be scalar, got shape {:?}", self.shape(root)),
            ));
        }
        self.backward_from(vec![(root, Tensor::scalar(T::one()))])
    }

    /// Backward from arbitrary seeds (vector-Jacobian product).
    pub fn backward_from(&self, seeds: Vec<(Var, Tensor<T>)>) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            if g.shape() != self.shape(v) {
                return Err(Error::shape("backward seed", g.shape(), self.shape(v)));
            }
            accumulate(&mut grads[v.0], g);
            last = last.max(v.0);
        }
        for idx in (0..=last).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            let flip = self.fault == Some(self.nodes[idx].op.kind());
            let mut contribs = self.node_backward(idx, &gout);
            if flip {
                for (_, g) in contribs.iter_mut() {
                    *g = g.scale(-T::one());
                }
            }
            for (v, g) in contribs {
                if self.nodes[v.0].needs_grad {
                    accumulate(&mut grads[v.0], g);
                }
            }
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn node_backward(&self, idx: usize, gout: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let g = gout.data();
        let mut res = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                res.push((*a, gout.clone()));
                res.push((*b, gout.clone()));
            }
            Op::Sub(a, b) => {
                res.push((*a, gout.clone()));
                res.push((*b, gout.scale(-T::one())));
            }
            Op::Hadamard(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    res.push((*a, zip(gout, vb, |g, y| g * y)));
                }
                if self.wants(*b) {
                    res.push((*b, zip(gout, va, |g, x| g * x)));
                }
            }
            Op::Scale(a, s) => res.push((*a, gout.scale(*s))),
            Op::MulConst(a, mask) => {
                let d = g.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                res.push((*a, retag(gout, d)));
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                res.push((*a, zip(gout, x, |g, x| g * sign(x))));
            }
            Op::Relu(a) => {
                // Subgradient at exactly zero is zero.
                res.push((*a, zip(gout, out, |g, y| if y > T::zero() { g } else { T::zero() })));
            }
            Op::Sigmoid(a) => {
                res.push((*a, zip(gout, out, |g, y| g * y * (T::one() - y))));
            }
            Op::Linear { x, w } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, m) = (vw.shape()[0], vw.shape()[1]);
                let rows = rows_of(vx.shape());
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); rows * n];
                    matmul(g, false, vw.data(), true, &mut dx, rows, m, n, false);
                    res.push((*x, retag(vx, dx)));
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); n * m];
                    matmul(vx.data(), true, g, false, &mut dw, n, rows, m, false);
                    res.push((*w, retag(vw, dw)));
                }
            }
            Op::BiasAdd { x, b } => {
                if self.wants(*b) {
                    let m = self.value(*b).len();
                    let mut db = vec![T::zero(); m];
                    for row in g.chunks(m) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    res.push((*b, retag(self.value(*b), db)));
                }
                res.push((*x, gout.clone()));
            }
            Op::Concat { parts, widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        res.push((p, retag(self.value(p), d)));
                    }
                    offset += w;
                }
            }
            Op::Reshape(x) => res.push((*x, retag(self.value(*x), g.to_vec()))),
            Op::Sum(x) => {
                let vx = self.value(*x);
                res.push((*x, Tensor::full(vx.shape().to_vec(), g[0])));
            }
            Op::Sweep { x, w, dir } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (k, h) = (vx.shape()[0], vx.shape()[2]);
                let mut dx = vec![T::zero(); vx.len()];
                let mut dw = vec![T::zero(); vw.len()];
                sweep_backward(out.data(), g, k, h, vw.data(), *dir, &mut dx, &mut dw);
                res.push((*x, retag(vx, dx)));
                if self.wants(*w) {
                    res.push((*w, retag(vw, dw)));
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let rows = geom.out_h() * geom.out_w();
                let pl = geom.patch_len();
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); pl * geom.out_c];
                    matmul(cols, true, g, false, &mut dw, pl, rows, geom.out_c, false);
                    res.push((*w, retag(self.value(*w), dw)));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); geom.out_c];
                    for row in g.chunks(geom.out_c) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    res.push((*b, retag(self.value(*b), db)));
                }
                if self.wants(*x) {
                    let mut dcols = vec![T::zero(); rows * pl];
                    matmul(g, false, self.value(*w).data(), true, &mut dcols, rows, geom.out_c, pl, false);
                    let mut dx = vec![T::zero(); self.value(*x).len()];
                    col2im(&dcols, geom, &mut dx);
                    res.push((*x, retag(self.value(*x), dx)));
                }
            }
            Op::SppPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] += gv;
                }
                res.push((*x, retag(self.value(*x), dx)));
            }
            Op::BinTile { v, levels, k } => {
                let vv = self.value(*v);
                let d = vv.len() / spp_len(levels);
                let dv = bin_tile_backward(g, *k, d, levels);
                res.push((*v, retag(vv, dv)));
            }
            Op::GlobalAvgUnpool(x) => {
                let vx = self.value(*x);
                let d = vx.last_dim();
                let cells = vx.len() / d;
                let mean = channel_mean(g, cells, d);
                let mut dx = Vec::with_capacity(vx.len());
                for _ in 0..cells {
                    dx.extend_from_slice(&mean);
                }
                res.push((*x, retag(vx, dx)));
            }
            Op::L2Normalize { x, norm } => {
                if *norm == T::zero() {
                    res.push((*x, gout.clone()));
                } else {
                    let proj = out.dot(gout);
                    let inv = T::one() / *norm;
                    res.push((*x, zip(gout, out, |g, y| (g - y * proj) * inv)));
                }
            }
            Op::Cosine { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (na, nb) = (va.norm(), vb.norm());
                let s = out.data()[0];
                let gs = g[0];
                let inv = T::one() / (na * nb);
                if self.wants(*a) {
                    let c = s / (na * na);
                    res.push((*a, zip(vb, va, |y, x| gs * (y * inv - c * x))));
                }
                if self.wants(*b) {
                    let c = s / (nb * nb);
                    res.push((*b, zip(va, vb, |x, y| gs * (x * inv - c * y))));
                }
            }
            Op::Deviance { s, m, w, alpha, beta } => {
                let vs = self.value(*s);
                let gs = g[0];
                let d = vs
                    .data()
                    .iter()
                    .zip(m.iter().zip(w))
                    .map(|(&sv, (&mv, &wv))| {
                        let z = -*alpha * (sv - *beta) * mv;
                        -gs * wv * *alpha * mv * sigmoid(z)
                    })
                    .collect();
                res.push((*s, retag(vs, d)));
            }
        }
        res
    }
}

fn check_levels(levels: &[usize], k: usize) -> Result<()> {
    if levels.is_empty() || levels.iter().any(|&l| l == 0 || l > k) {
        return Err(Error::invalid(
            "spp_pool",
            format!("levels {levels:?} must be nonempty with each level in 1..={k}"),
        ));
    }
    Ok(())
}

fn channel_mean<T: Real>(x: &[T], cells: usize, d: usize) -> Vec<T> {
    let mut mean = vec![T::zero(); d];
    for cell in x.chunks(d) {
        for (m, &v) in mean.iter_mut().zip(cell) {
            *m += v;
        }
    }
    let inv = T::one() / T::of(cells as f64);
    mean.iter_mut().for_each(|m| *m *= inv);
    mean
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn retag<T: Real>(like: &Tensor<T>, data: Vec<T>) -> Tensor<T> {
    Tensor::new(like.shape().to_vec(), data).expect("gradient shape")
}

fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    retag(a, data)
}

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + eᶻ)` in the branch form that never overflows.
pub fn softplus<T: Real>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn hadamard_forward_and_grads() {
        let mut g = Graph::new();
        let a = g.input(t(&[3], &[1.0, 2.0, 3.0]), true);
        let b = g.input(t(&[3], &[4.0, 5.0, 6.0]), true);
        let c = g.hadamard(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 10.0, 18.0]);
        let s = g.sum(c);
        let mut grads = g.backward(s).unwrap();
        assert_eq!(grads.take(a).unwrap().data(), &[4.0, 5.0, 6.0]);
        assert_eq!(grads.take(b).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn hadamard_shape_error_names_both() {
        let mut g = Graph::new();
        let a = g.input(t(&[3], &[1.0, 2.0, 3.0]), true);
        let b = g.input(t(&[2], &[4.0, 5.0]), true);
        let err = g.hadamard(a, b).unwrap_err().to_string();
        assert!(err.contains("[3]") && err.contains("[2]"), "{err}");
    }

    #[test]
    fn affine_examples() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[3.0, 7.0]), false);
        let w = g.input(Tensor::eye(2), false);
        let b = g.input(Tensor::zeros([2]), false);
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 7.0]);

        let x = g.input(t(&[2], &[1.0, 1.0]), false);
        let w = g.input(t(&[2, 1], &[2.0, 3.0]), false);
        let b = g.input(t(&[1], &[1.0]), false);
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[6.0]);
    }

    #[test]
    fn affine_rejects_inner_mismatch() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[1.0, 2.0, 3.0]), false);
        let w = g.input(Tensor::eye(2), false);
        assert!(matches!(g.linear(x, w), Err(Error::Shape { .. })));
    }

    #[test]
    fn sigmoid_and_relu_examples() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[0.0, 1.7, -1.7]), false);
        let y = g.sigmoid(x);
        let v = g.value(y).data().to_vec();
        assert_eq!(v[0], 0.5);
        assert!((v[1] + v[2] - 1.0).abs() < 1e-15);

        let x = g.input(t(&[3], &[-1.0, 0.0, 2.0]), true);
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let y2 = g.relu(y);
        assert_eq!(g.value(y2).data(), g.value(y).data());
        let s = g.sum(y2);
        let grads = g.backward(s).unwrap();
        // Zero input gets zero subgradient.
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softplus_is_stable() {
        for z in [-1e4, -50.0, -1.0, 0.0, 1.0, 50.0, 1e4] {
            let v: f64 = softplus(z);
            assert!(v.is_finite());
            assert!(v >= z.max(0.0));
            assert!(v - z.max(0.0) <= std::f64::consts::LN_2 + 1e-15);
        }
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn gradients_of_summed_losses_add() {
        // d(f + g) = df + dg through a shared subgraph.
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[0.3, -0.7]), true);
        let s1 = g.sigmoid(x);
        let a = g.sum(s1);
        let sq = g.hadamard(x, x).unwrap();
        let b = g.sum(sq);
        let both = g.add(a, b).unwrap();
        let ga = g.backward(a).unwrap().take(x).unwrap();
        let gb = g.backward(b).unwrap().take(x).unwrap();
        let gboth = g.backward(both).unwrap().take(x).unwrap();
        let mut expect = ga.clone();
        expect.add_assign(&gb);
        assert!(gboth.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn fault_injection_flips_one_kind() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[0.3, -0.7]), true);
        let y = g.sigmoid(x);
        let s = g.sum(y);
        let clean = g.backward(s).unwrap().take(x).unwrap();
        g.inject_fault(OpKind::Sigmoid);
        let broken = g.backward(s).unwrap().take(x).unwrap();
        assert!(clean.max_abs_diff(&broken.scale(-1.0)) < 1e-15);
    }

    #[test]
    fn op_kind_parses_case_insensitively() {
        assert_eq!("sweep".parse::<OpKind>().unwrap(), OpKind::Sweep);
        assert!("bogus".parse::<OpKind>().is_err());
    }
}
