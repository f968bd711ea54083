//! Central-difference gradient checking.
//!
//! Relative error per entry is `|a − n| / max(|a|, |n|, floor)` where `a` is the
//! analytic and `n` the numerical derivative. The floor keeps entries whose
//! true derivative is zero from being judged on rounding noise alone.

use std::fmt;

use crate::encoder::{ConvLayerSpec, EncoderConfig};
use crate::error::{Error, Result};
use crate::gate::{fuse, FusionMode, FusionVars, GateConfig};
use crate::graph::{Graph, OpKind, Var};
use crate::head::{embed_vars, HeadConfig, LossConfig};
use crate::init::uniform;
use crate::model::{Model, ModelConfig};
use crate::rng;
use crate::spatial::{stacked_irnn_vars, IrnnLayerVars, ContextConfig, ContextKind, Direction};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-4,
            tol: 1e-5,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    /// `(tensor, flat index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<34} {:>6} entries  max rel err {:.3e}  {}",
            self.name,
            self.entries,
            self.max_rel_error,
            if self.passed() { "ok" } else { "FAIL" }
        )?;
        if let (false, Some((t, i))) = (self.passed(), self.worst) {
            write!(f, " (tensor {t}, index {i})")?;
        }
        Ok(())
    }
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Central difference at `eps`, refined by Richardson extrapolation.
///
/// Piecewise-linear operations (ReLU, abs, max) put kinks in the loss. When the
/// estimates at `h` and `h/2` disagree, a kink lies inside the stencil and `h`
/// is reduced tenfold, down to `eps·1e-3`.
fn numerical_derivative(
    mut central: impl FnMut(f64) -> Result<f64>,
    cfg: &GradCheckConfig,
) -> Result<f64> {
    let mut h = cfg.eps;
    loop {
        let (d1, d2) = (central(h)?, central(h / 2.0)?);
        let richardson = (4.0 * d2 - d1) / 3.0;
        if relative_error(d1, d2, cfg.floor) < cfg.tol || h <= cfg.eps * 1e-3 {
            return Ok(richardson);
        }
        h /= 10.0;
    }
}

/// Compares `analytic` against central differences of `value` around `params`.
pub fn grad_check(
    name: &str,
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    mut value: impl FnMut(&[Tensor<f64>]) -> Result<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if analytic.len() != params.len() {
        return Err(Error::invalid(
            "grad_check",
            format!("{} gradients for {} parameters", analytic.len(), params.len()),
        ));
    }
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        name: name.to_string(),
        entries: 0,
        max_rel_error: 0.0,
        worst: None,
        tol: cfg.tol,
    };
    for t in 0..work.len() {
        if analytic[t].shape() != work[t].shape() {
            return Err(Error::shape("grad_check", analytic[t].shape(), work[t].shape()));
        }
        for i in 0..work[t].len() {
            let orig = work[t].data()[i];
            let mut central = |h: f64, work: &mut Vec<Tensor<f64>>| -> Result<f64> {
                let mut at = |x: f64| -> Result<f64> {
                    work[t].data_mut()[i] = x;
                    let v = value(work)?;
                    if !v.is_finite() {
                        return Err(Error::NonFinite {
                            context: format!("{name}: loss at perturbed parameter {t}"),
                            index: i,
                        });
                    }
                    Ok(v)
                };
                let d = (at(orig + h)? - at(orig - h)?) / (2.0 * h);
                work[t].data_mut()[i] = orig;
                Ok(d)
            };
            let numeric = numerical_derivative(|h| central(h, &mut work), cfg)?;
            let err = relative_error(analytic[t].data()[i], numeric, cfg.floor);
            report.entries += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = Some((t, i));
            }
        }
    }
    Ok(report)
}

/// Checks a graph-built function of `inputs`, reduced to a scalar by a fixed
/// random weighting of its output.
pub fn check_graph(
    name: &str,
    inputs: Vec<Tensor<f64>>,
    build: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
    seed: u64,
    cfg: &GradCheckConfig,
    fault: Option<OpKind>,
) -> Result<GradCheckReport> {
    let run = |xs: &[Tensor<f64>], grad: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        if let Some(f) = fault {
            g.inject_fault(f);
        }
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone(), true)).collect();
        let out = build(&mut g, &vars)?;
        let weights: Tensor<f64> = uniform(g.shape(out).to_vec(), -1.0, 1.0, &mut rng::seeded(seed ^ 0x5eed));
        let w = g.constant(weights);
        let prod = g.hadamard(out, w)?;
        let loss = g.sum(prod);
        let value = g.scalar(loss);
        if !grad {
            return Ok((value, vec![]));
        }
        let mut grads = g.backward(loss)?;
        Ok((value, vars.iter().map(|&v| grads.take_or_zeros(v, &g)).collect()))
    };
    let (_, analytic) = run(&inputs, true)?;
    grad_check(name, &inputs, &analytic, |xs| Ok(run(xs, false)?.0), cfg)
}

/// Smallest model exercising every stage: 8×8×3 images, `K = 4`, `D = 3`.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            input: [8, 8, 3],
            layers: vec![
                ConvLayerSpec { kernel: 3, stride: 2, channels: 4, relu: true },
                ConvLayerSpec { kernel: 3, stride: 1, channels: 3, relu: true },
            ],
            shared_streams: true,
            pixel_mean: Some(vec![0.5; 3]),
        },
        gate: GateConfig {
            mode: FusionMode::Gated,
            embed_dim: None,
            tie_embeddings: true,
        },
        context: ContextConfig {
            model: ContextKind::Irnn2,
            hidden: 3,
            mid_channels: Some(3),
            spp_levels: vec![1, 2],
            dropout: 0.5,
        },
        head: HeadConfig { embed_dim: 4 },
        loss: LossConfig::default(),
    }
}

/// Two pairs: images `0,1` share an identity, as do `2,3`.
pub fn micro_batch(cfg: &ModelConfig, seed: u64) -> (Vec<Tensor<f64>>, Vec<usize>) {
    let mut r = rng::seeded(seed);
    let images = (0..4).map(|_| uniform(cfg.encoder.input.to_vec(), 0.0, 1.0, &mut r)).collect();
    (images, vec![0, 0, 1, 1])
}

/// End-to-end check of the batch loss over every trainable tensor, dropout off.
pub fn composite_check(
    cfg: &ModelConfig,
    seed: u64,
    gc: &GradCheckConfig,
    fault: Option<OpKind>,
) -> Result<GradCheckReport> {
    let mut model = Model::<f64>::init(cfg.clone(), seed)?;
    perturb_away_from_init(&mut model, seed);
    let (images, labels) = micro_batch(cfg, seed);
    let refs: Vec<&Tensor<f64>> = images.iter().collect();
    let eval = model.loss_and_grad(&refs, &labels, None, true, fault)?;
    let params: Vec<Tensor<f64>> = model.tensors_mut().into_iter().map(|t| t.clone()).collect();
    let analytic = eval.grads.expect("requested");
    let mut probe = model.clone();
    grad_check(
        "end-to-end",
        &params,
        &analytic,
        |xs| {
            for (dst, src) in probe.tensors_mut().into_iter().zip(xs) {
                dst.data_mut().copy_from_slice(src.data());
            }
            Ok(probe.loss_and_grad(&refs, &labels, None, false, fault)?.loss)
        },
        gc,
    )
}

/// Nonzero biases and non-identity recurrences so no term is trivially zero.
fn perturb_away_from_init(model: &mut Model<f64>, seed: u64) {
    let mut r = rng::seeded(seed.wrapping_add(17));
    for t in model.tensors_mut() {
        let noise: Tensor<f64> = uniform(t.shape().to_vec(), -0.1, 0.1, &mut r);
        t.add_assign(&noise);
    }
}

fn rand_t(shape: &[usize], r: &mut rng::Rng) -> Tensor<f64> {
    uniform(shape.to_vec(), -1.0, 1.0, r)
}

/// Inputs bounded away from zero, for kinked operations.
fn rand_away(shape: &[usize], r: &mut rng::Rng) -> Tensor<f64> {
    rand_t(shape, r).map(|v| if v.abs() < 0.1 { v.signum() * 0.1 + v } else { v })
}

/// Per-module checks, grouped by module name.
pub fn module_suite(
    seed: u64,
    gc: &GradCheckConfig,
    fault: Option<OpKind>,
) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut r = rng::seeded(seed);
    let mut out = Vec::new();
    let mut push = |module: &'static str, rep: Result<GradCheckReport>| -> Result<()> {
        out.push((module, rep?));
        Ok(())
    };

    push(
        "tensor-core",
        check_graph("hadamard", vec![rand_t(&[3, 3], &mut r), rand_t(&[3, 3], &mut r)], |g, v| g.hadamard(v[0], v[1]), seed, gc, fault),
    )?;
    push(
        "tensor-core",
        check_graph(
            "affine",
            vec![rand_t(&[4], &mut r), rand_t(&[4, 3], &mut r), rand_t(&[3], &mut r)],
            |g, v| g.affine(v[0], v[1], v[2]),
            seed,
            gc,
            fault,
        ),
    )?;
    push("tensor-core", check_graph("sigmoid", vec![rand_t(&[5], &mut r)], |g, v| Ok(g.sigmoid(v[0])), seed, gc, fault))?;
    push("tensor-core", check_graph("relu", vec![rand_away(&[6], &mut r)], |g, v| Ok(g.relu(v[0])), seed, gc, fault))?;
    push("tensor-core", check_graph("abs", vec![rand_away(&[6], &mut r)], |g, v| Ok(g.abs(v[0])), seed, gc, fault))?;
    push(
        "tensor-core",
        check_graph("l2_normalize", vec![rand_t(&[5], &mut r)], |g, v| g.l2_normalize(v[0]), seed, gc, fault),
    )?;

    for mode in [FusionMode::Linear, FusionMode::Gated] {
        let name = if mode == FusionMode::Gated { "mi gate (gated)" } else { "mi gate (linear)" };
        let (k, d, e) = (2, 3, 2);
        let inputs = vec![
            rand_t(&[k, k, d], &mut r),
            rand_t(&[k, k, d], &mut r),
            rand_t(&[d, e], &mut r),
            rand_t(&[d, e], &mut r),
            rand_t(&[e], &mut r),
            rand_t(&[e], &mut r),
            rand_t(&[e, d], &mut r),
            rand_t(&[d], &mut r),
        ];
        push(
            "mi-gate",
            check_graph(
                name,
                inputs,
                |g, v| {
                    let vars = FusionVars::Mi {
                        gated: mode == FusionMode::Gated,
                        u: v[2],
                        v: v[3],
                        b_a: v[4],
                        b_b: v[5],
                        p: v[6],
                        b: v[7],
                        tied: false,
                    };
                    fuse(g, &vars, v[0], v[1])
                },
                seed,
                gc,
                fault,
            ),
        )?;
    }
    push(
        "mi-gate",
        check_graph(
            "concat fusion",
            vec![rand_t(&[2, 2, 3], &mut r), rand_t(&[2, 2, 3], &mut r), rand_t(&[6, 3], &mut r), rand_t(&[3], &mut r)],
            |g, v| fuse(g, &FusionVars::Concat { p: v[2], b: v[3] }, v[0], v[1]),
            seed,
            gc,
            fault,
        ),
    )?;

    for dir in Direction::ALL {
        let w = rand_t(&[2, 2], &mut r).map(|v| 0.5 * v);
        push(
            "spatial-context",
            check_graph(
                &format!("sweep {}", dir.name()),
                vec![rand_t(&[3, 3, 2], &mut r), w],
                move |g, v| g.sweep(v[0], v[1], dir),
                seed,
                gc,
                fault,
            ),
        )?;
    }
    let layer_inputs = |r: &mut rng::Rng, c_in: usize, h: usize, c_out: usize| {
        let mut v = vec![rand_t(&[c_in, h], r), rand_t(&[h], r)];
        v.extend((0..4).map(|_| rand_t(&[h, h], r).map(|x| 0.5 * x)));
        v.extend([rand_t(&[4 * h, c_out], r), rand_t(&[c_out], r)]);
        v
    };
    let layer_vars = |v: &[Var]| IrnnLayerVars::from_slice(v);
    {
        let mut inputs = vec![rand_t(&[3, 3, 2], &mut r)];
        inputs.extend(layer_inputs(&mut r, 2, 3, 2));
        push(
            "spatial-context",
            check_graph(
                "four-direction layer",
                inputs,
                |g, v| stacked_irnn_vars(g, v[0], &[&layer_vars(&v[1..9])], None),
                seed,
                gc,
                fault,
            ),
        )?;
    }
    {
        let mut inputs = vec![rand_t(&[3, 3, 2], &mut r)];
        inputs.extend(layer_inputs(&mut r, 2, 3, 3));
        inputs.extend(layer_inputs(&mut r, 3, 2, 2));
        push(
            "spatial-context",
            check_graph(
                "stacked irnn",
                inputs,
                |g, v| {
                    let (l1, l2) = (layer_vars(&v[1..9]), layer_vars(&v[9..17]));
                    stacked_irnn_vars(g, v[0], &[&l1, &l2], None)
                },
                seed,
                gc,
                fault,
            ),
        )?;
    }
    push(
        "spatial-context",
        check_graph(
            "spp pool + tile",
            vec![rand_t(&[4, 4, 2], &mut r)],
            |g, v| {
                let p = g.spp_pool(v[0], &[1, 2])?;
                g.bin_tile(p, &[1, 2], 4, 2)
            },
            seed,
            gc,
            fault,
        ),
    )?;
    push(
        "spatial-context",
        check_graph("global average + unpool", vec![rand_t(&[3, 3, 2], &mut r)], |g, v| g.global_avg_unpool(v[0]), seed, gc, fault),
    )?;
    push(
        "spatial-context",
        check_graph(
            "stacked 3x3 convolutions",
            vec![
                rand_t(&[5, 5, 2], &mut r),
                rand_t(&[3, 3, 2, 2], &mut r),
                rand_t(&[2], &mut r),
                rand_t(&[3, 3, 2, 2], &mut r),
                rand_t(&[2], &mut r),
            ],
            |g, v| {
                let a = g.conv2d(v[0], v[1], v[2], 1, 1)?;
                let a = g.relu(a);
                let b = g.conv2d(a, v[3], v[4], 1, 1)?;
                Ok(g.relu(b))
            },
            seed,
            gc,
            fault,
        ),
    )?;

    push(
        "encoder",
        check_graph(
            "conv stack",
            vec![
                rand_t(&[6, 6, 2], &mut r),
                rand_t(&[3, 3, 2, 3], &mut r),
                rand_t(&[3], &mut r),
                rand_t(&[3, 3, 3, 2], &mut r),
                rand_t(&[2], &mut r),
            ],
            |g, v| {
                let a = g.conv2d(v[0], v[1], v[2], 2, 1)?;
                let a = g.relu(a);
                let b = g.conv2d(a, v[3], v[4], 1, 1)?;
                Ok(g.relu(b))
            },
            seed,
            gc,
            fault,
        ),
    )?;

    push(
        "matching-head",
        check_graph(
            "residual embedding + cosine",
            vec![
                rand_t(&[2, 2, 2], &mut r),
                rand_t(&[2, 2, 2], &mut r),
                rand_t(&[2, 2, 2], &mut r),
                rand_t(&[8, 3], &mut r),
                rand_t(&[3], &mut r),
            ],
            |g, v| {
                let ea = embed_vars(g, v[0], v[2], (v[3], v[4]))?;
                let eb = embed_vars(g, v[1], v[2], (v[3], v[4]))?;
                g.cosine(ea, eb)
            },
            seed,
            gc,
            fault,
        ),
    )?;
    push(
        "matching-head",
        check_graph(
            "binomial deviance",
            vec![rand_t(&[3, 3], &mut r)],
            |g, v| {
                let m = [1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0];
                let w = [0.2, 0.25, 0.2, 0.25, 0.2, 0.25, 0.2, 0.25, 0.2];
                g.binomial_deviance(v[0], &m, &w, 2.0, 0.5)
            },
            seed,
            gc,
            fault,
        ),
    )?;

    push("end-to-end", composite_check(&micro_config(), seed, gc, fault))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_of_squares(xs: &[Tensor<f64>]) -> Result<f64> {
        Ok(xs[0].data().iter().map(|v| v * v).sum())
    }

    #[test]
    fn quadratic_passes() {
        let x = vec![Tensor::from_f64([2], &[1.0, 2.0]).unwrap()];
        let analytic = vec![Tensor::from_f64([2], &[2.0, 4.0]).unwrap()];
        let cfg = GradCheckConfig { tol: 1e-6, ..Default::default() };
        let r = grad_check("x^2", &x, &analytic, sum_of_squares, &cfg).unwrap();
        assert!(r.passed(), "{r}");
        assert_eq!(r.entries, 2);
    }

    #[test]
    fn wrong_gradient_fails_at_its_index() {
        let x = vec![Tensor::from_f64([2], &[1.0, 2.0]).unwrap()];
        let analytic = vec![Tensor::from_f64([2], &[2.0, -4.0]).unwrap()];
        let r = grad_check("x^2", &x, &analytic, sum_of_squares, &GradCheckConfig::default()).unwrap();
        assert!(!r.passed());
        assert_eq!(r.worst, Some((0, 1)));
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = vec![Tensor::from_f64([3], &[0.3, -2.0, 5.0]).unwrap()];
        let r = grad_check("c", &x, &[Tensor::zeros([3])], |_| Ok(4.25), &GradCheckConfig::default()).unwrap();
        assert!(r.passed());
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_loss_names_the_entry() {
        let x = vec![Tensor::from_f64([2], &[1.0, 2.0]).unwrap()];
        let err = grad_check(
            "blowup",
            &x,
            &[Tensor::zeros([2])],
            |xs| Ok(if xs[0].data()[1] > 2.0 { f64::NAN } else { 0.0 }),
            &GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }), "{err}");
    }

    #[test]
    fn kinks_near_the_point_are_stepped_over() {
        // |x| with x within eps of the kink: plain central differences at eps
        // would give 0.5, the refined estimate recovers the slope 1.
        let x = vec![Tensor::from_f64([1], &[5e-5]).unwrap()];
        let analytic = vec![Tensor::from_f64([1], &[1.0]).unwrap()];
        let r = grad_check("abs", &x, &analytic, |xs| Ok(xs[0].data()[0].abs()), &GradCheckConfig::default()).unwrap();
        assert!(r.passed(), "{r}");
    }
}
