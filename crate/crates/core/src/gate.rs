//! Multiplicative integration gate.
//!
//! At every location the two stream activations are embedded by `U` and `V`,
//! multiplied elementwise and projected back to `D` channels by `P`:
//!
//! * linear:  `F = Pᵀ((Uᵀg_A + b_A) ⊙ (Vᵀg_B + b_B)) + b`
//! * gated:   `F = Pᵀ(σ(Uᵀg_A + b_A) ⊙ σ(Vᵀg_B + b_B)) + b`
//!
//! The concatenation fusion `F = P_cᵀ[g_A; g_B] + b` is kept as an ablation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activation::ActivationMap;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::init::glorot_uniform;
use crate::tensor::{matmul, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Linear,
    #[default]
    Gated,
    Concat,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Linear => "linear",
            FusionMode::Gated => "gated",
            FusionMode::Concat => "concat",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(FusionMode::Linear),
            "gated" => Ok(FusionMode::Gated),
            "concat" => Ok(FusionMode::Concat),
            _ => Err(Error::Config(format!(
                "unknown fusion mode {s:?} (expected linear, gated or concat)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    pub mode: FusionMode,
    /// Joint embedding width `d`; defaults to `D`.
    pub embed_dim: Option<usize>,
    /// Share `U`/`b_A` between both streams (`V = U`, `b_B = b_A`), which makes
    /// the gate symmetric in its two inputs.
    pub tie_embeddings: bool,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            mode: FusionMode::Gated,
            embed_dim: None,
            tie_embeddings: true,
        }
    }
}

/// Parameters of the multiplicative gate. `v`/`b_b` are `None` when tied to `u`/`b_a`.
#[derive(Debug, Clone, PartialEq)]
pub struct MiGateParams<T> {
    pub gated: bool,
    /// `D×d`
    pub u: Tensor<T>,
    pub v: Option<Tensor<T>>,
    /// `d`
    pub b_a: Tensor<T>,
    pub b_b: Option<Tensor<T>>,
    /// `d×D`
    pub p: Tensor<T>,
    /// `D`
    pub b: Tensor<T>,
}

/// Concatenation fusion used by the ablation: `P_c` is `2D×D`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatParams<T> {
    pub p: Tensor<T>,
    pub b: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Fusion<T> {
    Mi(MiGateParams<T>),
    Concat(ConcatParams<T>),
}

/// Gradients of a gate with separate (untied) embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct MiGateGrads<T> {
    pub u: Tensor<T>,
    pub v: Tensor<T>,
    pub b_a: Tensor<T>,
    pub b_b: Tensor<T>,
    pub p: Tensor<T>,
    pub b: Tensor<T>,
}

pub(crate) enum FusionVars {
    Mi {
        gated: bool,
        u: Var,
        v: Var,
        b_a: Var,
        b_b: Var,
        p: Var,
        b: Var,
        tied: bool,
    },
    Concat {
        p: Var,
        b: Var,
    },
}

impl FusionVars {
    pub(crate) fn all(&self) -> Vec<Var> {
        match *self {
            FusionVars::Mi { u, v, b_a, b_b, p, b, tied, .. } => {
                if tied {
                    vec![u, b_a, p, b]
                } else {
                    vec![u, v, b_a, b_b, p, b]
                }
            }
            FusionVars::Concat { p, b } => vec![p, b],
        }
    }
}

impl<T: Real> MiGateParams<T> {
    /// Glorot-uniform matrices, zero biases.
    pub fn init(d_in: usize, d_embed: usize, gated: bool, tied: bool, rng: &mut impl Rng) -> Self {
        let u = glorot_uniform([d_in, d_embed], d_in, d_embed, rng);
        let v = (!tied).then(|| glorot_uniform([d_in, d_embed], d_in, d_embed, rng));
        MiGateParams {
            gated,
            u,
            v,
            b_a: Tensor::zeros([d_embed]),
            b_b: (!tied).then(|| Tensor::zeros([d_embed])),
            p: glorot_uniform([d_embed, d_in], d_embed, d_in, rng),
            b: Tensor::zeros([d_in]),
        }
    }

    pub fn tied(&self) -> bool {
        self.v.is_none()
    }

    pub fn v(&self) -> &Tensor<T> {
        self.v.as_ref().unwrap_or(&self.u)
    }

    pub fn b_b(&self) -> &Tensor<T> {
        self.b_b.as_ref().unwrap_or(&self.b_a)
    }

    /// Input depth `D`.
    pub fn depth(&self) -> usize {
        self.u.shape()[0]
    }

    /// Joint embedding width `d`.
    pub fn embed_dim(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let (dd, d) = (self.depth(), self.embed_dim());
        let ok = self.v().shape() == [dd, d]
            && self.b_a.shape() == [d]
            && self.b_b().shape() == [d]
            && self.p.shape() == [d, dd]
            && self.b.shape() == [dd];
        if !ok {
            return Err(Error::invalid(
                "mi gate",
                format!("inconsistent parameter shapes for D={dd}, d={d}"),
            ));
        }
        Ok(())
    }
}

impl<T: Real> Fusion<T> {
    pub fn init(cfg: &GateConfig, d_in: usize, rng: &mut impl Rng) -> Result<Self> {
        let d_embed = cfg.embed_dim.unwrap_or(d_in);
        if d_embed == 0 {
            return Err(Error::Config("gate.embed_dim must be at least 1".into()));
        }
        Ok(match cfg.mode {
            FusionMode::Linear | FusionMode::Gated => Fusion::Mi(MiGateParams::init(
                d_in,
                d_embed,
                cfg.mode == FusionMode::Gated,
                cfg.tie_embeddings,
                rng,
            )),
            FusionMode::Concat => Fusion::Concat(ConcatParams {
                p: glorot_uniform([2 * d_in, d_in], 2 * d_in, d_in, rng),
                b: Tensor::zeros([d_in]),
            }),
        })
    }

    pub fn mode(&self) -> FusionMode {
        match self {
            Fusion::Mi(p) if p.gated => FusionMode::Gated,
            Fusion::Mi(_) => FusionMode::Linear,
            Fusion::Concat(_) => FusionMode::Concat,
        }
    }

    /// Whether `F(g_A, g_B) == F(g_B, g_A)` by construction.
    pub fn is_symmetric(&self) -> bool {
        matches!(self, Fusion::Mi(p) if p.tied())
    }

    /// Parameter tensors in binding order.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        match self {
            Fusion::Mi(p) => {
                let mut v = vec![("u", &p.u)];
                if let Some(vv) = &p.v {
                    v.push(("v", vv));
                }
                v.push(("b_a", &p.b_a));
                if let Some(bb) = &p.b_b {
                    v.push(("b_b", bb));
                }
                v.extend([("p", &p.p), ("b", &p.b)]);
                v
            }
            Fusion::Concat(c) => vec![("p_concat", &c.p), ("b", &c.b)],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Fusion::Mi(p) => {
                let mut v = vec![&mut p.u];
                if let Some(vv) = &mut p.v {
                    v.push(vv);
                }
                v.push(&mut p.b_a);
                if let Some(bb) = &mut p.b_b {
                    v.push(bb);
                }
                v.extend([&mut p.p, &mut p.b]);
                v
            }
            Fusion::Concat(c) => vec![&mut c.p, &mut c.b],
        }
    }

    pub(crate) fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> FusionVars {
        match self {
            Fusion::Mi(p) => {
                let u = g.param(&p.u);
                let v = p.v.as_ref().map_or(u, |v| g.param(v));
                let b_a = g.param(&p.b_a);
                let b_b = p.b_b.as_ref().map_or(b_a, |b| g.param(b));
                FusionVars::Mi {
                    gated: p.gated,
                    u,
                    v,
                    b_a,
                    b_b,
                    p: g.param(&p.p),
                    b: g.param(&p.b),
                    tied: p.tied(),
                }
            }
            Fusion::Concat(c) => FusionVars::Concat {
                p: g.param(&c.p),
                b: g.param(&c.b),
            },
        }
    }
}

/// Fuses two `K×K×D` maps on the graph.
pub(crate) fn fuse<T: Real>(g: &mut Graph<'_, T>, vars: &FusionVars, ga: Var, gb: Var) -> Result<Var> {
    if g.shape(ga) != g.shape(gb) {
        return Err(Error::shape("mi_forward", g.shape(ga), g.shape(gb)));
    }
    match *vars {
        FusionVars::Mi { gated, u, v, b_a, b_b, p, b, .. } => {
            let mut ea = g.affine(ga, u, b_a)?;
            let mut eb = g.affine(gb, v, b_b)?;
            if gated {
                ea = g.sigmoid(ea);
                eb = g.sigmoid(eb);
            }
            let joint = g.hadamard(ea, eb)?;
            g.affine(joint, p, b)
        }
        FusionVars::Concat { p, b } => {
            let cat = g.concat(&[ga, gb])?;
            g.affine(cat, p, b)
        }
    }
}

fn check_pair<T: Real>(ga: &ActivationMap<T>, gb: &ActivationMap<T>, depth: usize) -> Result<()> {
    if ga.tensor().shape() != gb.tensor().shape() {
        return Err(Error::shape("mi_forward", ga.tensor().shape(), gb.tensor().shape()));
    }
    if ga.depth() != depth {
        return Err(Error::shape("mi_forward", ga.tensor().shape(), &[depth]));
    }
    ga.tensor().ensure_finite("mi_forward g_A")?;
    gb.tensor().ensure_finite("mi_forward g_B")
}

/// Fused map `F` for a pair of stream activations.
pub fn mi_forward<T: Real>(
    ga: &ActivationMap<T>,
    gb: &ActivationMap<T>,
    params: &Fusion<T>,
) -> Result<ActivationMap<T>> {
    let depth = match params {
        Fusion::Mi(p) => {
            p.validate()?;
            p.depth()
        }
        Fusion::Concat(c) => c.b.len(),
    };
    check_pair(ga, gb, depth)?;
    let mut g = Graph::new();
    let a = g.constant(ga.tensor().clone());
    let b = g.constant(gb.tensor().clone());
    let vars = params.bind(&mut g);
    let f = fuse(&mut g, &vars, a, b)?;
    ActivationMap::from_tensor(g.value(f).clone())
}

/// Hand-derived backward of the linear gate with `P = I` and zero `b_A`, `b_B`.
///
/// Per location, with `a = Uᵀg_A`, `c = Vᵀg_B` and upstream `δ = ∂L/∂F`:
/// `∂L/∂g_A = U·diag(c)·δ` and `∂L/∂g_B = V·diag(a)·δ`. The parameter gradients
/// are returned as if `U` and `V` were separate, even when the gate ties them.
pub fn mi_backward_closed_form<T: Real>(
    ga: &ActivationMap<T>,
    gb: &ActivationMap<T>,
    params: &MiGateParams<T>,
    upstream: &ActivationMap<T>,
) -> Result<(ActivationMap<T>, ActivationMap<T>, MiGateGrads<T>)> {
    params.validate()?;
    let identity = params.embed_dim() == params.depth()
        && params.p == Tensor::eye(params.depth());
    let zero_bias = |t: &Tensor<T>| t.data().iter().all(|&x| x == T::zero());
    if params.gated || !identity || !zero_bias(&params.b_a) || !zero_bias(params.b_b()) {
        return Err(Error::invalid(
            "mi_backward_closed_form",
            "requires the linear gate with P = I and zero embedding biases",
        ));
    }
    check_pair(ga, gb, params.depth())?;
    if upstream.tensor().shape() != ga.tensor().shape() {
        return Err(Error::shape(
            "mi_backward_closed_form",
            upstream.tensor().shape(),
            ga.tensor().shape(),
        ));
    }
    let (k, d) = (ga.side(), ga.depth());
    let cells = k * k;
    let (u, v) = (params.u.data(), params.v().data());
    // a = g_A U, c = g_B V for all locations at once (rows are locations).
    let mut a = vec![T::zero(); cells * d];
    let mut c = vec![T::zero(); cells * d];
    matmul(ga.tensor().data(), false, u, false, &mut a, cells, d, d, false);
    matmul(gb.tensor().data(), false, v, false, &mut c, cells, d, d, false);
    let delta = upstream.tensor().data();
    let c_delta: Vec<T> = c.iter().zip(delta).map(|(&x, &y)| x * y).collect();
    let a_delta: Vec<T> = a.iter().zip(delta).map(|(&x, &y)| x * y).collect();

    // U·diag(c)·δ per location is the row vector (c ⊙ δ)·Uᵀ.
    let mut dga = vec![T::zero(); cells * d];
    let mut dgb = vec![T::zero(); cells * d];
    matmul(&c_delta, false, u, true, &mut dga, cells, d, d, false);
    matmul(&a_delta, false, v, true, &mut dgb, cells, d, d, false);

    let mut du = vec![T::zero(); d * d];
    let mut dv = vec![T::zero(); d * d];
    matmul(ga.tensor().data(), true, &c_delta, false, &mut du, d, cells, d, false);
    matmul(gb.tensor().data(), true, &a_delta, false, &mut dv, d, cells, d, false);

    let joint: Vec<T> = a.iter().zip(&c).map(|(&x, &y)| x * y).collect();
    let mut dp = vec![T::zero(); d * d];
    matmul(&joint, true, delta, false, &mut dp, d, cells, d, false);

    let col_sum = |x: &[T]| {
        let mut s = vec![T::zero(); d];
        for row in x.chunks(d) {
            for (acc, &v) in s.iter_mut().zip(row) {
                *acc += v;
            }
        }
        Tensor::new([d], s).expect("bias shape")
    };
    let grads = MiGateGrads {
        u: Tensor::new([d, d], du)?,
        v: Tensor::new([d, d], dv)?,
        b_a: col_sum(&c_delta),
        b_b: col_sum(&a_delta),
        p: Tensor::new([d, d], dp)?,
        b: col_sum(delta),
    };
    Ok((ActivationMap::new(k, d, dga)?, ActivationMap::new(k, d, dgb)?, grads))
}

/// Gate gradients via the generic graph backward, for comparison with the closed form.
pub fn mi_backward_autodiff<T: Real>(
    ga: &ActivationMap<T>,
    gb: &ActivationMap<T>,
    params: &MiGateParams<T>,
    upstream: &ActivationMap<T>,
) -> Result<(ActivationMap<T>, ActivationMap<T>, MiGateGrads<T>)> {
    // Bind U and V separately so the gradients stay untied.
    let untied = MiGateParams {
        v: Some(params.v().clone()),
        b_b: Some(params.b_b().clone()),
        ..params.clone()
    };
    let fusion = Fusion::Mi(untied);
    let mut g = Graph::new();
    let in_a = g.input(ga.tensor().clone(), true);
    let in_b = g.input(gb.tensor().clone(), true);
    let vars = fusion.bind(&mut g);
    let f = fuse(&mut g, &vars, in_a, in_b)?;
    let mut grads = g.backward_from(vec![(f, upstream.tensor().clone())])?;
    let FusionVars::Mi { u, v, b_a, b_b, p, b, .. } = vars else { unreachable!() };
    let mut take = |x: Var| grads.take_or_zeros(x, &g);
    let dga = ActivationMap::from_tensor(take(in_a))?;
    let dgb = ActivationMap::from_tensor(take(in_b))?;
    let out = MiGateGrads {
        u: take(u),
        v: take(v),
        b_a: take(b_a),
        b_b: take(b_b),
        p: take(p),
        b: take(b),
    };
    Ok((dga, dgb, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn scalar_map(v: f64) -> ActivationMap<f64> {
        ActivationMap::new(1, 1, vec![v]).unwrap()
    }

    fn scalar_gate(gated: bool) -> MiGateParams<f64> {
        MiGateParams {
            gated,
            u: Tensor::from_f64([1, 1], &[2.0]).unwrap(),
            v: Some(Tensor::from_f64([1, 1], &[3.0]).unwrap()),
            b_a: Tensor::zeros([1]),
            b_b: Some(Tensor::zeros([1])),
            p: Tensor::eye(1),
            b: Tensor::zeros([1]),
        }
    }

    #[test]
    fn scalar_linear_gate() {
        let f = mi_forward(&scalar_map(1.0), &scalar_map(1.0), &Fusion::Mi(scalar_gate(false))).unwrap();
        assert_eq!(f.at(0, 0, 0), 6.0);
    }

    #[test]
    fn scalar_closed_form_gradient() {
        let (dga, dgb, _) = mi_backward_closed_form(
            &scalar_map(1.0),
            &scalar_map(1.0),
            &scalar_gate(false),
            &scalar_map(1.0),
        )
        .unwrap();
        assert_eq!(dga.at(0, 0, 0), 6.0);
        assert_eq!(dgb.at(0, 0, 0), 6.0);
    }

    #[test]
    fn scalar_autodiff_gradient() {
        let (dga, dgb, grads) = mi_backward_autodiff(
            &scalar_map(1.0),
            &scalar_map(2.0),
            &scalar_gate(false),
            &scalar_map(1.0),
        )
        .unwrap();
        // F = (2·1)(3·2): ∂/∂g_A = 2·6, ∂/∂g_B = 3·2, ∂/∂b = 1.
        assert_eq!(dga.at(0, 0, 0), 12.0);
        assert_eq!(dgb.at(0, 0, 0), 6.0);
        assert_eq!(grads.b.data(), &[1.0]);
    }

    #[test]
    fn gated_zero_inputs_give_quarter() {
        let mut r = rng::seeded(4);
        let p = MiGateParams::<f64>::init(3, 2, true, false, &mut r);
        let z = ActivationMap::zeros(2, 3);
        let f = mi_forward(&z, &z, &Fusion::Mi(p.clone())).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                for c in 0..3 {
                    let expect: f64 = (0..2).map(|l| 0.25 * p.p.at(&[l, c])).sum();
                    assert!((f.at(i, j, c) - expect).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn identity_linear_gate_squares() {
        let p = MiGateParams {
            gated: false,
            u: Tensor::eye(3),
            v: None,
            b_a: Tensor::zeros([3]),
            b_b: None,
            p: Tensor::eye(3),
            b: Tensor::zeros([3]),
        };
        let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let g = ActivationMap::new(2, 3, data.clone()).unwrap();
        let f = mi_forward(&g, &g, &Fusion::Mi(p)).unwrap();
        let sq: Vec<f64> = data.iter().map(|x| x * x).collect();
        assert_eq!(f.tensor().data(), &sq[..]);
    }

    #[test]
    fn zero_second_stream_annihilates_gradient() {
        let mut r = rng::seeded(9);
        let mut p = MiGateParams::<f64>::init(3, 3, false, false, &mut r);
        p.p = Tensor::eye(3);
        let ga = ActivationMap::new(2, 3, (0..12).map(|i| i as f64).collect()).unwrap();
        let gb = ActivationMap::zeros(2, 3);
        let up = ActivationMap::new(2, 3, vec![1.0; 12]).unwrap();
        let (dga, _, _) = mi_backward_closed_form(&ga, &gb, &p, &up).unwrap();
        assert!(dga.tensor().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn closed_form_rejects_other_configurations() {
        let up = scalar_map(1.0);
        assert!(mi_backward_closed_form(&up, &up, &scalar_gate(true), &up).is_err());
        let mut biased = scalar_gate(false);
        biased.b_a = Tensor::full([1], 0.1);
        assert!(mi_backward_closed_form(&up, &up, &biased, &up).is_err());
    }

    #[test]
    fn mismatched_streams_rejected() {
        let p = Fusion::Mi(scalar_gate(false));
        let a = ActivationMap::<f64>::zeros(1, 1);
        let b = ActivationMap::<f64>::zeros(2, 1);
        assert!(matches!(mi_forward(&a, &b, &p), Err(Error::Shape { .. })));
        let nan = ActivationMap::new(1, 1, vec![f64::NAN]).unwrap();
        assert!(matches!(mi_forward(&nan, &a, &p), Err(Error::NonFinite { .. })));
    }
}
