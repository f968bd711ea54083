//! Small convolutional encoder producing `K×K×D` activation maps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activation::ActivationMap;
use crate::conv::{ConvGeom, ConvParams};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

/// One convolution of the stack. Padding is `kernel / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayerSpec {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
    #[serde(default = "yes")]
    pub relu: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// `[height, width, channels]` of input images.
    pub input: [usize; 3],
    pub layers: Vec<ConvLayerSpec>,
    /// One parameter set for both streams.
    pub shared_streams: bool,
    /// Per-channel mean subtracted from `[0,1]` pixels; filled from the
    /// training split when absent.
    pub pixel_mean: Option<Vec<f64>>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let layer = |stride, channels| ConvLayerSpec {
            kernel: 3,
            stride,
            channels,
            relu: true,
        };
        EncoderConfig {
            input: [64, 64, 3],
            layers: vec![layer(2, 16), layer(2, 32), layer(2, 64), layer(1, 64)],
            shared_streams: true,
            pixel_mean: None,
        }
    }
}

impl EncoderConfig {
    /// Geometry of every layer, checked to end on a square grid.
    pub fn geometry(&self) -> Result<Vec<ConvGeom>> {
        let [mut h, mut w, mut c] = self.input;
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Config(format!("encoder.input {:?} has a zero extent", self.input)));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("encoder.layers is empty".into()));
        }
        if let Some(mean) = &self.pixel_mean {
            if mean.len() != c {
                return Err(Error::Config(format!(
                    "encoder.pixel_mean has {} entries for {c} channels",
                    mean.len()
                )));
            }
        }
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let g = ConvGeom {
                in_h: h,
                in_w: w,
                in_c: c,
                kernel: l.kernel,
                stride: l.stride,
                pad: l.kernel / 2,
                out_c: l.channels,
            };
            g.validate()
                .map_err(|e| Error::Config(format!("encoder.layers[{i}]: {e}")))?;
            (h, w, c) = (g.out_h(), g.out_w(), g.out_c);
            out.push(g);
        }
        if h != w {
            return Err(Error::Config(format!(
                "encoder output grid is {h}x{w}; activation maps must be square"
            )));
        }
        Ok(out)
    }

    /// `(K, D)` of the produced maps.
    pub fn output(&self) -> Result<(usize, usize)> {
        let g = self.geometry()?;
        let last = g.last().expect("nonempty");
        Ok((last.out_h(), last.out_c))
    }
}

/// Convolution stacks for the two streams. `stream_b` is `None` when shared.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub stream_a: Vec<ConvParams<T>>,
    pub stream_b: Option<Vec<ConvParams<T>>>,
}

fn init_stack<T: Real>(geom: &[ConvGeom], rng: &mut impl Rng) -> Vec<ConvParams<T>> {
    geom.iter()
        .map(|g| ConvParams::init(g.kernel, g.in_c, g.out_c, rng))
        .collect()
}

/// Which stream an image is encoded by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    A,
    B,
}

pub(crate) type StackVars = Vec<(Var, Var)>;

impl<T: Real> EncoderParams<T> {
    pub fn init(cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let geom = cfg.geometry()?;
        let stream_a = init_stack(&geom, rng);
        let stream_b = (!cfg.shared_streams).then(|| init_stack(&geom, rng));
        Ok(EncoderParams { stream_a, stream_b })
    }

    pub fn shared(&self) -> bool {
        self.stream_b.is_none()
    }

    pub fn stack(&self, s: Stream) -> &[ConvParams<T>] {
        match (s, &self.stream_b) {
            (Stream::B, Some(b)) => b,
            _ => &self.stream_a,
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        let stacks = std::iter::once((if self.shared() { "conv" } else { "a.conv" }, &self.stream_a))
            .chain(self.stream_b.iter().map(|b| ("b.conv", b)));
        for (tag, stack) in stacks {
            for (i, c) in stack.iter().enumerate() {
                for (name, t) in c.tensors() {
                    out.push((format!("{tag}{i}.{name}"), t));
                }
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> =
            self.stream_a.iter_mut().flat_map(|c| c.tensors_mut()).collect();
        if let Some(b) = &mut self.stream_b {
            out.extend(b.iter_mut().flat_map(|c| c.tensors_mut()));
        }
        out
    }

    /// Binds both stacks; the B stack aliases A when shared.
    pub(crate) fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> [StackVars; 2] {
        let a: StackVars = self.stream_a.iter().map(|c| c.bind(g)).collect();
        let b = match &self.stream_b {
            Some(s) => s.iter().map(|c| c.bind(g)).collect(),
            None => a.clone(),
        };
        [a, b]
    }

    pub(crate) fn vars_in_order(vars: &[StackVars; 2], shared: bool) -> Vec<Var> {
        let flat = |s: &StackVars| s.iter().flat_map(|&(w, b)| [w, b]).collect::<Vec<_>>();
        let mut out = flat(&vars[0]);
        if !shared {
            out.extend(flat(&vars[1]));
        }
        out
    }
}

/// Scales 8-bit-derived pixels already in `[0,1]` by subtracting the channel mean.
pub fn normalize_image<T: Real>(image: &Tensor<T>, mean: Option<&[f64]>) -> Tensor<T> {
    let Some(mean) = mean else { return image.clone() };
    let c = mean.len();
    let mut out = image.clone();
    for px in out.data_mut().chunks_mut(c) {
        for (v, &m) in px.iter_mut().zip(mean) {
            *v -= T::of(m);
        }
    }
    out
}

/// Runs a conv stack on the graph.
pub(crate) fn encode_vars<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    stack: &StackVars,
    cfg: &EncoderConfig,
) -> Result<Var> {
    let mut h = x;
    for (&(w, b), spec) in stack.iter().zip(&cfg.layers) {
        h = g.conv2d(h, w, b, spec.stride, spec.kernel / 2)?;
        if spec.relu {
            h = g.relu(h);
        }
    }
    Ok(h)
}

fn check_image<T: Real>(image: &Tensor<T>, cfg: &EncoderConfig) -> Result<()> {
    if image.shape() != cfg.input {
        return Err(Error::shape("encode", image.shape(), &cfg.input));
    }
    image.ensure_finite("encode input")
}

/// Forward pass of one stream on a `[0,1]` image; mean subtraction included.
pub fn encode<T: Real>(
    image: &Tensor<T>,
    cfg: &EncoderConfig,
    params: &EncoderParams<T>,
    stream: Stream,
) -> Result<ActivationMap<T>> {
    check_image(image, cfg)?;
    let mut g = Graph::new();
    let x = g.constant(normalize_image(image, cfg.pixel_mean.as_deref()));
    let vars = params.bind(&mut g);
    let idx = if stream == Stream::A { 0 } else { 1 };
    let y = encode_vars(&mut g, x, &vars[idx], cfg)?;
    ActivationMap::from_tensor(g.value(y).clone())
}

/// Encodes a set of images on one graph, keeping it for a later backward pass.
pub(crate) struct EncodedBatch<'a, T: Real> {
    pub graph: Graph<'a, T>,
    pub vars: [StackVars; 2],
    /// Output node per image and stream; `[i][1] == [i][0]` when shared.
    pub outputs: Vec<[Var; 2]>,
}

impl<'a, T: Real> EncodedBatch<'a, T> {
    pub(crate) fn new(
        images: &[&Tensor<T>],
        cfg: &EncoderConfig,
        params: &'a EncoderParams<T>,
        fault: Option<crate::graph::OpKind>,
    ) -> Result<Self> {
        let mut graph = Graph::new();
        if let Some(f) = fault {
            graph.inject_fault(f);
        }
        let vars = params.bind(&mut graph);
        let mut outputs = Vec::with_capacity(images.len());
        for img in images {
            check_image(img, cfg)?;
            let x = graph.constant(normalize_image(img, cfg.pixel_mean.as_deref()));
            let a = encode_vars(&mut graph, x, &vars[0], cfg)?;
            let b = if params.shared() {
                a
            } else {
                encode_vars(&mut graph, x, &vars[1], cfg)?
            };
            outputs.push([a, b]);
        }
        Ok(EncodedBatch { graph, vars, outputs })
    }

    pub(crate) fn map(&self, i: usize, s: Stream) -> &Tensor<T> {
        self.graph.value(self.outputs[i][s as usize])
    }
}
