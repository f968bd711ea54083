//! Full matching network: encoder, fusion gate, context model and head.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::ActivationMap;
use crate::encoder::{encode, EncodedBatch, EncoderConfig, EncoderParams, Stream};
use crate::error::{Error, Result};
use crate::gate::{fuse, Fusion, FusionVars, GateConfig};
use crate::graph::{softplus, Graph, OpKind, Var};
use crate::head::{embed_vars, HeadConfig, HeadParams, LossConfig, Supervision};
use crate::rng;
use crate::spatial::{ContextConfig, ContextParams, ContextVars};
use crate::tensor::{Real, Tensor};

/// Pairs per work unit. Gradients are summed within a unit and then across
/// units in index order, so results do not depend on the thread count.
const PAIRS_PER_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub gate: GateConfig,
    pub context: ContextConfig,
    pub head: HeadConfig,
    pub loss: LossConfig,
}

impl ModelConfig {
    /// Validates every section and returns the map geometry `(K, D)`.
    pub fn validate(&self) -> Result<(usize, usize)> {
        let (k, d) = self.encoder.output()?;
        self.context.validate(k)?;
        self.loss.validate()?;
        if self.head.embed_dim < 2 {
            return Err(Error::Config(format!(
                "head.embed_dim must be at least 2, got {}",
                self.head.embed_dim
            )));
        }
        if self.gate.embed_dim == Some(0) {
            return Err(Error::Config("gate.embed_dim must be at least 1".into()));
        }
        Ok((k, d))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub encoder: EncoderParams<T>,
    pub fusion: Fusion<T>,
    pub context: ContextParams<T>,
    pub head: HeadParams<T>,
}

/// Everything after the encoder, bound to one graph.
pub(crate) struct TailVars {
    fusion: FusionVars,
    context: ContextVars,
    head: (Var, Var),
}

impl TailVars {
    fn all(&self) -> Vec<Var> {
        let mut v = self.fusion.all();
        v.extend(self.context.all());
        v.extend([self.head.0, self.head.1]);
        v
    }
}

/// Loss of a batch and, when requested, its gradient per parameter tensor in
/// [`Model::tensors_mut`] order.
#[derive(Debug, Clone)]
pub struct LossEval<T> {
    pub loss: T,
    pub grads: Option<Vec<Tensor<T>>>,
}

struct ChunkAcc<T> {
    loss: T,
    tail: Option<Vec<Tensor<T>>>,
    /// Gradient w.r.t. each image's map, per stream.
    maps: Vec<[Option<Tensor<T>>; 2]>,
}

fn owned<'a, T>(v: Vec<(&'static str, &'a Tensor<T>)>) -> Vec<(String, &'a Tensor<T>)> {
    v.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

fn add_into<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<T: Real> Model<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let (k, d) = config.validate()?;
        let mut r = rng::seeded(seed);
        let encoder = EncoderParams::init(&config.encoder, &mut r)?;
        let fusion = Fusion::init(&config.gate, d, &mut r)?;
        let context = ContextParams::init(&config.context, k, d, &mut r);
        let head = HeadParams::init(k, d, &config.head, &mut r)?;
        Ok(Model {
            config,
            encoder,
            fusion,
            context,
            head,
        })
    }

    /// `(K, D)` of the activation maps.
    pub fn map_shape(&self) -> (usize, usize) {
        self.config.encoder.output().expect("validated at construction")
    }

    /// `s(a, b) == s(b, a)` by construction: shared streams and a tied gate.
    pub fn is_symmetric(&self) -> bool {
        self.encoder.shared() && self.fusion.is_symmetric()
    }

    /// Parameter sections with named tensors, in [`Model::tensors_mut`] order.
    pub fn groups(&self) -> Vec<(String, Vec<(String, &Tensor<T>)>)> {
        let mut out = vec![
            ("encoder".to_string(), self.encoder.tensors()),
            ("gate".to_string(), owned(self.fusion.tensors())),
        ];
        for (name, ts) in self.context.groups() {
            out.push((name.to_string(), owned(ts)));
        }
        out.push(("head".to_string(), owned(self.head.tensors())));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.fusion.tensors_mut());
        v.extend(self.context.tensors_mut());
        v.extend(self.head.tensors_mut());
        v
    }

    /// `(section.tensor, count)` for every trainable tensor.
    pub fn param_counts(&self) -> Vec<(String, usize)> {
        self.groups()
            .into_iter()
            .flat_map(|(sec, ts)| {
                ts.into_iter()
                    .map(move |(name, t)| (format!("{sec}.{name}"), t.len()))
            })
            .collect()
    }

    pub fn param_total(&self) -> usize {
        self.param_counts().iter().map(|(_, n)| n).sum()
    }

    fn bind_tail<'a>(&'a self, g: &mut Graph<'a, T>) -> TailVars {
        TailVars {
            fusion: self.fusion.bind(g),
            context: self.context.bind(g),
            head: self.head.bind(g),
        }
    }

    /// Both branch embeddings for a pair of maps.
    fn embed_on(
        &self,
        g: &mut Graph<'_, T>,
        tail: &TailVars,
        ga: Var,
        gb: Var,
        dropout: Option<(f64, u64)>,
    ) -> Result<(Var, Var)> {
        let f = fuse(g, &tail.fusion, ga, gb)?;
        let ft = self.context.apply(g, &tail.context, f, dropout)?;
        let ea = embed_vars(g, ga, ft, tail.head)?;
        let eb = embed_vars(g, gb, ft, tail.head)?;
        Ok((ea, eb))
    }

    /// Embeddings of the A and B branches for precomputed maps (inference).
    pub fn embed_pair(
        &self,
        ga: &ActivationMap<T>,
        gb: &ActivationMap<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let a = g.constant(ga.tensor().clone());
        let b = g.constant(gb.tensor().clone());
        let tail = self.bind_tail(&mut g);
        let (ea, eb) = self.embed_on(&mut g, &tail, a, b, None)?;
        Ok((g.value(ea).clone(), g.value(eb).clone()))
    }

    /// Similarity of two precomputed maps, dropout off.
    pub fn map_similarity(&self, ga: &ActivationMap<T>, gb: &ActivationMap<T>) -> Result<T> {
        let mut g = Graph::new();
        let a = g.constant(ga.tensor().clone());
        let b = g.constant(gb.tensor().clone());
        let tail = self.bind_tail(&mut g);
        let (ea, eb) = self.embed_on(&mut g, &tail, a, b, None)?;
        let s = g.cosine(ea, eb)?;
        Ok(g.scalar(s))
    }

    pub fn encode(&self, image: &Tensor<T>, stream: Stream) -> Result<ActivationMap<T>> {
        encode(image, &self.config.encoder, &self.encoder, stream)
    }

    /// Similarity of image `a` (stream A) against image `b` (stream B).
    pub fn pair_similarity(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
        let ga = self.encode(a, Stream::A)?;
        let gb = self.encode(b, Stream::B)?;
        self.map_similarity(&ga, &gb)
    }

    /// Probe × gallery similarities; probes use stream A, gallery stream B.
    pub fn score_matrix(&self, probes: &[&Tensor<T>], gallery: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let enc = |set: &[&Tensor<T>], s: Stream| -> Result<Vec<ActivationMap<T>>> {
            set.par_iter().map(|img| self.encode(img, s)).collect()
        };
        let pa = enc(probes, Stream::A)?;
        let gb = enc(gallery, Stream::B)?;
        let cols = gallery.len();
        let scores: Vec<T> = (0..probes.len() * cols)
            .into_par_iter()
            .map(|idx| self.map_similarity(&pa[idx / cols], &gb[idx % cols]))
            .collect::<Result<_>>()?;
        Tensor::new([probes.len(), cols], scores)
    }

    /// Weighted binomial deviance of a batch, optionally with gradients.
    ///
    /// `dropout` is `(p, seed)` for a training step; masks are derived per pair
    /// from the seed. For a symmetric model only pairs `i < j` are evaluated
    /// (each standing for both ordered entries), and the diagonal, whose score
    /// is exactly 1 with zero gradient, contributes a constant.
    pub fn loss_and_grad(
        &self,
        images: &[&Tensor<T>],
        labels: &[usize],
        dropout: Option<(f64, u64)>,
        want_grad: bool,
        fault: Option<OpKind>,
    ) -> Result<LossEval<T>> {
        if images.len() != labels.len() {
            return Err(Error::invalid(
                "loss_and_grad",
                format!("{} images but {} labels", images.len(), labels.len()),
            ));
        }
        let sup = Supervision::from_labels(labels)?;
        let loss_cfg = self.config.loss;
        let (alpha, beta) = (T::of(loss_cfg.alpha), T::of(loss_cfg.beta));
        let n = images.len();
        let enc = EncodedBatch::new(images, &self.config.encoder, &self.encoder, fault)?;
        let symmetric = self.is_symmetric();

        let mut base_loss = T::zero();
        let mut pairs: Vec<(usize, usize, T, T)> = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let (m, w) = sup.at(i, j);
                if symmetric {
                    if i == j {
                        base_loss += T::of(w) * softplus(-alpha * (T::one() - beta) * T::of(m));
                    } else if i < j {
                        pairs.push((i, j, T::of(m), T::of(2.0 * w)));
                    }
                } else {
                    pairs.push((i, j, T::of(m), T::of(w)));
                }
            }
        }

        let chunks: Vec<ChunkAcc<T>> = pairs
            .par_chunks(PAIRS_PER_CHUNK)
            .map(|chunk| -> Result<ChunkAcc<T>> {
                let mut acc = ChunkAcc {
                    loss: T::zero(),
                    tail: None,
                    maps: (0..n).map(|_| [None, None]).collect(),
                };
                for &(i, j, m, w) in chunk {
                    let mut g = Graph::new();
                    if let Some(f) = fault {
                        g.inject_fault(f);
                    }
                    let ga = g.input(enc.map(i, Stream::A).clone(), want_grad);
                    let gb = g.input(enc.map(j, Stream::B).clone(), want_grad);
                    let tail = self.bind_tail(&mut g);
                    let pair_dropout = dropout.map(|(p, seed)| (p, rng::mix(&[seed, i as u64, j as u64])));
                    let (ea, eb) = self.embed_on(&mut g, &tail, ga, gb, pair_dropout)?;
                    let s = g.cosine(ea, eb)?;
                    let l = g.binomial_deviance(s, &[m], &[w], alpha, beta)?;
                    let lv = g.scalar(l);
                    if !lv.is_finite() {
                        return Err(Error::NonFinite {
                            context: format!("loss of pair ({i}, {j})"),
                            index: 0,
                        });
                    }
                    acc.loss += lv;
                    if !want_grad {
                        continue;
                    }
                    let mut grads = g.backward(l)?;
                    let tail_grads: Vec<Tensor<T>> =
                        tail.all().into_iter().map(|v| grads.take_or_zeros(v, &g)).collect();
                    match &mut acc.tail {
                        Some(sum) => {
                            for (s, t) in sum.iter_mut().zip(&tail_grads) {
                                s.add_assign(t);
                            }
                        }
                        None => acc.tail = Some(tail_grads),
                    }
                    add_into(&mut acc.maps[i][0], grads.take_or_zeros(ga, &g));
                    add_into(&mut acc.maps[j][1], grads.take_or_zeros(gb, &g));
                }
                Ok(acc)
            })
            .collect::<Result<_>>()?;

        let mut loss = base_loss;
        let mut tail_sum: Option<Vec<Tensor<T>>> = None;
        let mut map_grads: Vec<[Option<Tensor<T>>; 2]> = (0..n).map(|_| [None, None]).collect();
        for c in chunks {
            loss += c.loss;
            if let Some(t) = c.tail {
                match &mut tail_sum {
                    Some(sum) => sum.iter_mut().zip(&t).for_each(|(s, x)| s.add_assign(x)),
                    None => tail_sum = Some(t),
                }
            }
            for (dst, src) in map_grads.iter_mut().zip(c.maps) {
                for (d, s) in dst.iter_mut().zip(src) {
                    if let Some(s) = s {
                        add_into(d, s);
                    }
                }
            }
        }
        if !want_grad {
            return Ok(LossEval { loss, grads: None });
        }

        let mut seeds = Vec::new();
        for (i, streams) in map_grads.into_iter().enumerate() {
            for (s, g) in streams.into_iter().enumerate() {
                if let Some(g) = g {
                    seeds.push((enc.outputs[i][s], g));
                }
            }
        }
        let mut enc_grads = enc.graph.backward_from(seeds)?;
        let mut grads: Vec<Tensor<T>> = EncoderParams::<T>::vars_in_order(&enc.vars, self.encoder.shared())
            .into_iter()
            .map(|v| enc_grads.take_or_zeros(v, &enc.graph))
            .collect();
        grads.extend(tail_sum.unwrap_or_else(|| {
            // No pairs were scored; every tail gradient is zero.
            let mut g = Graph::new();
            let tail = self.bind_tail(&mut g);
            tail.all().into_iter().map(|v| Tensor::zeros(g.shape(v).to_vec())).collect()
        }));
        for (idx, g) in grads.iter().enumerate() {
            if let Some(bad) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("gradient of parameter tensor {idx}"),
                    index: bad,
                });
            }
        }
        Ok(LossEval {
            loss,
            grads: Some(grads),
        })
    }

    /// Full `n×n` score matrix of a batch against itself (dropout off).
    pub fn batch_scores(&self, images: &[&Tensor<T>]) -> Result<Tensor<T>> {
        self.score_matrix(images, images)
    }

    /// Copies every parameter into another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut out = Model::<U>::init(self.config.clone(), 0).expect("config already validated");
        let src: Vec<Tensor<U>> = {
            let mut me = self.clone();
            me.tensors_mut().into_iter().map(|t| t.cast()).collect()
        };
        for (dst, s) in out.tensors_mut().into_iter().zip(src) {
            *dst = s;
        }
        out
    }
}
