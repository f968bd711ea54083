//! Four-directional IRNN layers.
//!
//! A layer applies a shared 1×1 input-to-hidden map, runs four independent
//! ReLU recurrences across the grid (one per [`Direction`]) and mixes the
//! concatenated `4H` hidden states back down with another 1×1 map.

use rand::Rng;

use super::{dropout_mask, Direction};
use crate::activation::ActivationMap;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::init::glorot_uniform;
use crate::tensor::{matmul, Real, Tensor};

/// Cell addressing for one sweep: `lane * lane_stride + step * step_stride` (in cells).
struct Lanes {
    lane_stride: usize,
    step_stride: usize,
    reverse: bool,
}

impl Lanes {
    fn new(k: usize, dir: Direction) -> Self {
        match dir {
            Direction::LeftToRight => Lanes { lane_stride: k, step_stride: 1, reverse: false },
            Direction::RightToLeft => Lanes { lane_stride: k, step_stride: 1, reverse: true },
            Direction::TopToBottom => Lanes { lane_stride: 1, step_stride: k, reverse: false },
            Direction::BottomToTop => Lanes { lane_stride: 1, step_stride: k, reverse: true },
        }
    }

    /// Step index along the sweep for the `s`-th visited position.
    fn step(&self, s: usize, k: usize) -> usize {
        if self.reverse {
            k - 1 - s
        } else {
            s
        }
    }

    fn cell(&self, lane: usize, step: usize) -> usize {
        lane * self.lane_stride + step * self.step_stride
    }
}

/// `h(cell) = max(W_hhᵀ·h(prev) + x(cell), 0)`, with a zero state before the first cell.
///
/// All `k` lanes advance together so each step is one `k×H · H×H` product.
pub fn sweep_forward<T: Real>(x: &[T], k: usize, h: usize, w: &[T], dir: Direction) -> Vec<T> {
    let lanes = Lanes::new(k, dir);
    let mut out = vec![T::zero(); x.len()];
    let mut prev = vec![T::zero(); k * h];
    let mut pre = vec![T::zero(); k * h];
    for s in 0..k {
        let step = lanes.step(s, k);
        if s > 0 {
            matmul(&prev, false, w, false, &mut pre, k, h, h, false);
        }
        for lane in 0..k {
            let c = lanes.cell(lane, step) * h;
            let row = &mut pre[lane * h..(lane + 1) * h];
            for j in 0..h {
                let v = if s > 0 { row[j] + x[c + j] } else { x[c + j] };
                let v = if v > T::zero() { v } else { T::zero() };
                out[c + j] = v;
                prev[lane * h + j] = v;
            }
        }
    }
    out
}

/// Backward of [`sweep_forward`] given its output. Accumulates into `dx` and `dw`.
#[allow(clippy::too_many_arguments)]
pub fn sweep_backward<T: Real>(
    out: &[T],
    dout: &[T],
    k: usize,
    h: usize,
    w: &[T],
    dir: Direction,
    dx: &mut [T],
    dw: &mut [T],
) {
    let lanes = Lanes::new(k, dir);
    let mut carried = vec![T::zero(); k * h];
    let mut delta = vec![T::zero(); k * h];
    let mut prev = vec![T::zero(); k * h];
    for s in (0..k).rev() {
        let step = lanes.step(s, k);
        for lane in 0..k {
            let c = lanes.cell(lane, step) * h;
            for j in 0..h {
                let gate = out[c + j] > T::zero();
                let d = if gate { dout[c + j] + carried[lane * h + j] } else { T::zero() };
                delta[lane * h + j] = d;
                dx[c + j] += d;
            }
        }
        if s > 0 {
            let pstep = lanes.step(s - 1, k);
            for lane in 0..k {
                let c = lanes.cell(lane, pstep) * h;
                prev[lane * h..(lane + 1) * h].copy_from_slice(&out[c..c + h]);
            }
            matmul(&prev, true, &delta, false, dw, h, k, h, true);
            matmul(&delta, false, w, true, &mut carried, k, h, h, false);
        }
    }
}

/// Single directional sweep on a standalone map (no gradient tracking).
pub fn irnn_sweep<T: Real>(
    x: &ActivationMap<T>,
    dir: Direction,
    w_hh: &Tensor<T>,
) -> Result<ActivationMap<T>> {
    let mut g = Graph::new();
    let xv = g.constant(x.tensor().clone());
    let wv = g.param(w_hh);
    let y = g.sweep(xv, wv, dir)?;
    ActivationMap::from_tensor(g.value(y).clone())
}

/// Parameters of one four-directional layer.
#[derive(Debug, Clone, PartialEq)]
pub struct IrnnLayerParams<T> {
    /// Shared 1×1 input-to-hidden weights, `C_in × H`.
    pub w_in: Tensor<T>,
    pub b_in: Tensor<T>,
    /// Recurrent matrices in [`Direction::ALL`] order.
    pub w_hh: [Tensor<T>; 4],
    /// 1×1 reduction of the concatenated states, `4H × C_out`.
    pub w_mix: Tensor<T>,
    pub b_mix: Tensor<T>,
}

pub(crate) struct IrnnLayerVars {
    w_in: Var,
    b_in: Var,
    w_hh: [Var; 4],
    w_mix: Var,
    b_mix: Var,
}

impl IrnnLayerVars {
    /// Vars in [`IrnnLayerParams::tensors`] order.
    pub(crate) fn from_slice(v: &[Var]) -> Self {
        IrnnLayerVars {
            w_in: v[0],
            b_in: v[1],
            w_hh: [v[2], v[3], v[4], v[5]],
            w_mix: v[6],
            b_mix: v[7],
        }
    }

    pub(crate) fn all(&self) -> Vec<Var> {
        let mut v = vec![self.w_in, self.b_in];
        v.extend(self.w_hh);
        v.extend([self.w_mix, self.b_mix]);
        v
    }
}

impl<T: Real> IrnnLayerParams<T> {
    /// Recurrent matrices start at the identity; 1×1 maps are Glorot-uniform, biases zero.
    pub fn init(c_in: usize, hidden: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        IrnnLayerParams {
            w_in: glorot_uniform([c_in, hidden], c_in, hidden, rng),
            b_in: Tensor::zeros([hidden]),
            w_hh: std::array::from_fn(|_| Tensor::eye(hidden)),
            w_mix: glorot_uniform([4 * hidden, c_out], 4 * hidden, c_out, rng),
            b_mix: Tensor::zeros([c_out]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_in.shape()[1]
    }

    pub fn c_in(&self) -> usize {
        self.w_in.shape()[0]
    }

    pub fn c_out(&self) -> usize {
        self.w_mix.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let (c_in, h, c_out) = (self.c_in(), self.hidden(), self.c_out());
        let ok = self.b_in.shape() == [h]
            && self.w_hh.iter().all(|w| w.shape() == [h, h])
            && self.w_mix.shape() == [4 * h, c_out]
            && self.b_mix.shape() == [c_out];
        if !ok {
            return Err(Error::invalid(
                "irnn layer",
                format!("inconsistent parameter shapes for C_in={c_in}, H={h}, C_out={c_out}"),
            ));
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        vec![
            ("w_in", &self.w_in),
            ("b_in", &self.b_in),
            ("w_hh_left_to_right", &self.w_hh[0]),
            ("w_hh_right_to_left", &self.w_hh[1]),
            ("w_hh_top_to_bottom", &self.w_hh[2]),
            ("w_hh_bottom_to_top", &self.w_hh[3]),
            ("w_mix", &self.w_mix),
            ("b_mix", &self.b_mix),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let [a, b, c, d] = &mut self.w_hh;
        vec![&mut self.w_in, &mut self.b_in, a, b, c, d, &mut self.w_mix, &mut self.b_mix]
    }

    pub(crate) fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> IrnnLayerVars {
        IrnnLayerVars {
            w_in: g.param(&self.w_in),
            b_in: g.param(&self.b_in),
            w_hh: std::array::from_fn(|i| g.param(&self.w_hh[i])),
            w_mix: g.param(&self.w_mix),
            b_mix: g.param(&self.b_mix),
        }
    }
}

/// Shared 1×1 input map, four sweeps, concatenation, 1×1 reduction.
pub(crate) fn four_dir_layer_vars<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    p: &IrnnLayerVars,
) -> Result<Var> {
    let a = g.affine(x, p.w_in, p.b_in)?;
    let mut states = [a; 4];
    for (i, dir) in Direction::ALL.into_iter().enumerate() {
        states[i] = g.sweep(a, p.w_hh[i], dir)?;
    }
    let cat = g.concat(&states)?;
    g.affine(cat, p.w_mix, p.b_mix)
}

/// One four-directional layer on the graph.
pub fn four_dir_layer<'a, T: Real>(
    g: &mut Graph<'a, T>,
    x: Var,
    params: &'a IrnnLayerParams<T>,
) -> Result<Var> {
    let vars = params.bind(g);
    four_dir_layer_vars(g, x, &vars)
}

/// Two stacked four-directional layers with inverted dropout on each layer's
/// output when `dropout` is `Some((p, seed))`.
pub(crate) fn stacked_irnn_vars<T: Real>(
    g: &mut Graph<'_, T>,
    f: Var,
    layers: &[&IrnnLayerVars],
    dropout: Option<(f64, u64)>,
) -> Result<Var> {
    let mut x = f;
    for (i, layer) in layers.iter().enumerate() {
        x = four_dir_layer_vars(g, x, layer)?;
        if let Some((p, seed)) = dropout {
            if p > 0.0 {
                let mask = dropout_mask::<T>(g.shape(x), p, seed, i as u64);
                x = g.mul_const(x, &mask)?;
            }
        }
    }
    Ok(x)
}

/// Spatially recurrent pooling of `f` by two stacked layers.
///
/// With `training` set, inverted dropout with probability `dropout_p` is applied
/// to each layer's output using masks derived from `seed`.
pub fn stacked_irnn_pool<T: Real>(
    f: &ActivationMap<T>,
    layer1: &IrnnLayerParams<T>,
    layer2: &IrnnLayerParams<T>,
    dropout_p: f64,
    training: bool,
    seed: u64,
) -> Result<ActivationMap<T>> {
    if layer1.c_in() != f.depth() || layer2.c_in() != layer1.c_out() || layer2.c_out() != f.depth()
    {
        return Err(Error::invalid(
            "stacked_irnn_pool",
            format!(
                "layer channels {}→{}→{}→{} do not chain on a D={} map",
                layer1.c_in(),
                layer1.c_out(),
                layer2.c_in(),
                layer2.c_out(),
                f.depth()
            ),
        ));
    }
    let mut g = Graph::new();
    let x = g.constant(f.tensor().clone());
    let v1 = layer1.bind(&mut g);
    let v2 = layer2.bind(&mut g);
    let dropout = training.then_some((dropout_p, seed));
    let y = stacked_irnn_vars(&mut g, x, &[&v1, &v2], dropout)?;
    ActivationMap::from_tensor(g.value(y).clone())
}
