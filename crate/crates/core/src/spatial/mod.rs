//! Spatial context models applied to the fused map `F`.
//!
//! All four models map a `K×K×D` map to a `K×K×D` map so the matching head can
//! compare them against the stream activations:
//!
//! * `irnn2`: two stacked four-directional IRNN layers (whole-image context,
//!   spatially varying);
//! * `spp`: pyramid max-pooling, with each cell receiving the average of the
//!   bins that contain it;
//! * `global_avg`: the spatial mean repeated at every cell;
//! * `stacked_conv`: two 3×3 convolutions with ReLU (5×5 context).

pub mod irnn;
pub mod pool;

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activation::ActivationMap;
use crate::conv::ConvParams;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng;
use crate::tensor::{Real, Tensor};

pub use irnn::{four_dir_layer, irnn_sweep, stacked_irnn_pool, IrnnLayerParams};
pub use pool::{global_avg_unpool, spp_pool, SppConfig};

pub(crate) use irnn::{stacked_irnn_vars, IrnnLayerVars};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    LeftToRight,
    RightToLeft,
    TopToBottom,
    BottomToTop,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::LeftToRight,
        Direction::RightToLeft,
        Direction::TopToBottom,
        Direction::BottomToTop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Direction::LeftToRight => "left_to_right",
            Direction::RightToLeft => "right_to_left",
            Direction::TopToBottom => "top_to_bottom",
            Direction::BottomToTop => "bottom_to_top",
        }
    }

    /// The direction seen in a horizontally mirrored image.
    pub fn mirrored(self) -> Self {
        match self {
            Direction::LeftToRight => Direction::RightToLeft,
            Direction::RightToLeft => Direction::LeftToRight,
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ContextKind {
    #[default]
    Irnn2,
    Spp,
    GlobalAvg,
    StackedConv,
}

impl ContextKind {
    pub const ALL: [ContextKind; 4] = [
        ContextKind::Irnn2,
        ContextKind::Spp,
        ContextKind::GlobalAvg,
        ContextKind::StackedConv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ContextKind::Irnn2 => "irnn2",
            ContextKind::Spp => "spp",
            ContextKind::GlobalAvg => "global_avg",
            ContextKind::StackedConv => "stacked_conv",
        }
    }
}

impl fmt::Display for ContextKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ContextKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ContextKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown context model {s:?} (expected irnn2, spp, global_avg or stacked_conv)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContextConfig {
    pub model: ContextKind,
    /// Hidden units per direction.
    pub hidden: usize,
    /// Channels between the two IRNN layers; defaults to `hidden`.
    pub mid_channels: Option<usize>,
    pub spp_levels: Vec<usize>,
    /// Dropout probability on each recurrent layer's output during training.
    pub dropout: f64,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig {
            model: ContextKind::Irnn2,
            hidden: 512,
            mid_channels: None,
            spp_levels: vec![1, 2],
            dropout: 0.5,
        }
    }
}

impl ContextConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.hidden == 0 || self.mid_channels == Some(0) {
            return Err(Error::Config("context.hidden and context.mid_channels must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("context.dropout {} not in [0, 1)", self.dropout)));
        }
        match self.model {
            ContextKind::Spp => {
                if self.spp_levels.is_empty() || self.spp_levels.iter().any(|&l| l == 0 || l > k) {
                    return Err(Error::Config(format!(
                        "context.spp_levels {:?} must be nonempty with levels in 1..={k}",
                        self.spp_levels
                    )));
                }
            }
            ContextKind::StackedConv if k < 5 => {
                return Err(Error::Config(format!("stacked_conv context needs K >= 5, got {k}")));
            }
            _ => {}
        }
        Ok(())
    }
}

/// Learned state of the selected context model.
#[derive(Debug, Clone, PartialEq)]
pub enum ContextParams<T> {
    Irnn2 {
        layer1: IrnnLayerParams<T>,
        layer2: IrnnLayerParams<T>,
    },
    Spp(SppConfig),
    GlobalAvg,
    StackedConv([ConvParams<T>; 2]),
}

pub(crate) enum ContextVars {
    Irnn2(Box<[IrnnLayerVars; 2]>),
    Spp,
    GlobalAvg,
    StackedConv([(Var, Var); 2]),
}

impl ContextVars {
    pub(crate) fn all(&self) -> Vec<Var> {
        match self {
            ContextVars::Irnn2(layers) => layers.iter().flat_map(|l| l.all()).collect(),
            ContextVars::Spp | ContextVars::GlobalAvg => vec![],
            ContextVars::StackedConv(convs) => convs.iter().flat_map(|&(w, b)| [w, b]).collect(),
        }
    }
}

impl<T: Real> ContextParams<T> {
    /// Fresh parameters for a `K×K×D` map.
    ///
    /// IRNN mixing weights are divided by `√K`: with identity recurrence a
    /// sweep sums up to `K` inputs, and the four concatenated states would
    /// otherwise swamp the input scale. Shrinking `w_in` instead starves the
    /// hidden units, whose ReLUs then die once their biases drift negative.
    pub fn init(cfg: &ContextConfig, k: usize, d: usize, rng: &mut impl Rng) -> Self {
        match cfg.model {
            ContextKind::Irnn2 => {
                let mid = cfg.mid_channels.unwrap_or(cfg.hidden);
                let mut layer1 = IrnnLayerParams::init(d, cfg.hidden, mid, rng);
                let mut layer2 = IrnnLayerParams::init(mid, cfg.hidden, d, rng);
                let s = T::of(1.0 / (k as f64).sqrt());
                layer1.w_mix = layer1.w_mix.scale(s);
                layer2.w_mix = layer2.w_mix.scale(s);
                ContextParams::Irnn2 { layer1, layer2 }
            }
            ContextKind::Spp => ContextParams::Spp(SppConfig {
                levels: cfg.spp_levels.clone(),
            }),
            ContextKind::GlobalAvg => ContextParams::GlobalAvg,
            ContextKind::StackedConv => {
                ContextParams::StackedConv([ConvParams::init(3, d, d, rng), ConvParams::init(3, d, d, rng)])
            }
        }
    }

    pub fn kind(&self) -> ContextKind {
        match self {
            ContextParams::Irnn2 { .. } => ContextKind::Irnn2,
            ContextParams::Spp(_) => ContextKind::Spp,
            ContextParams::GlobalAvg => ContextKind::GlobalAvg,
            ContextParams::StackedConv(_) => ContextKind::StackedConv,
        }
    }

    /// Named parameter groups (checkpoint sections), tensors in binding order.
    pub fn groups(&self) -> Vec<(&'static str, Vec<(&'static str, &Tensor<T>)>)> {
        match self {
            ContextParams::Irnn2 { layer1, layer2 } => {
                vec![("irnn1", layer1.tensors()), ("irnn2", layer2.tensors())]
            }
            ContextParams::Spp(_) | ContextParams::GlobalAvg => vec![],
            ContextParams::StackedConv([c1, c2]) => vec![("conv1", c1.tensors()), ("conv2", c2.tensors())],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            ContextParams::Irnn2 { layer1, layer2 } => {
                let mut v = layer1.tensors_mut();
                v.extend(layer2.tensors_mut());
                v
            }
            ContextParams::Spp(_) | ContextParams::GlobalAvg => vec![],
            ContextParams::StackedConv([c1, c2]) => {
                let mut v = c1.tensors_mut();
                v.extend(c2.tensors_mut());
                v
            }
        }
    }

    pub(crate) fn bind<'a>(&'a self, g: &mut Graph<'a, T>) -> ContextVars {
        match self {
            ContextParams::Irnn2 { layer1, layer2 } => {
                ContextVars::Irnn2(Box::new([layer1.bind(g), layer2.bind(g)]))
            }
            ContextParams::Spp(_) => ContextVars::Spp,
            ContextParams::GlobalAvg => ContextVars::GlobalAvg,
            ContextParams::StackedConv([c1, c2]) => ContextVars::StackedConv([c1.bind(g), c2.bind(g)]),
        }
    }

    /// `F̃` from `F`. `dropout` is `(p, seed)` during training, `None` at inference.
    pub(crate) fn apply(
        &self,
        g: &mut Graph<'_, T>,
        vars: &ContextVars,
        f: Var,
        dropout: Option<(f64, u64)>,
    ) -> Result<Var> {
        let shape = g.shape(f).to_vec();
        let (k, d) = (shape[0], shape[2]);
        match (self, vars) {
            (ContextParams::Irnn2 { .. }, ContextVars::Irnn2(layers)) => {
                stacked_irnn_vars(g, f, &[&layers[0], &layers[1]], dropout)
            }
            (ContextParams::Spp(cfg), ContextVars::Spp) => {
                let v = g.spp_pool(f, &cfg.levels)?;
                g.bin_tile(v, &cfg.levels, k, d)
            }
            (ContextParams::GlobalAvg, ContextVars::GlobalAvg) => g.global_avg_unpool(f),
            (ContextParams::StackedConv(_), ContextVars::StackedConv(convs)) => {
                if k < 5 {
                    return Err(Error::invalid("stacked_conv_context", format!("K={k} is below 5")));
                }
                let mut x = f;
                for &(w, b) in convs {
                    let y = g.conv2d(x, w, b, 1, 1)?;
                    x = g.relu(y);
                }
                Ok(x)
            }
            _ => unreachable!("context vars bound from a different model"),
        }
    }
}

/// Two 3×3 same-padding convolutions with ReLU on a standalone map.
pub fn stacked_conv_context<T: Real>(
    f: &ActivationMap<T>,
    convs: &[ConvParams<T>; 2],
) -> Result<ActivationMap<T>> {
    let params = ContextParams::StackedConv(convs.clone());
    let mut g = Graph::new();
    let x = g.constant(f.tensor().clone());
    let vars = params.bind(&mut g);
    let y = params.apply(&mut g, &vars, x, None)?;
    ActivationMap::from_tensor(g.value(y).clone())
}

/// Inverted-dropout mask: entries are `0` with probability `p`, else `1/(1−p)`.
pub(crate) fn dropout_mask<T: Real>(shape: &[usize], p: f64, seed: u64, layer: u64) -> Tensor<T> {
    let mut r = rng::seeded(rng::mix(&[seed, layer]));
    let keep = T::of(1.0 / (1.0 - p));
    Tensor::from_fn(shape.to_vec(), |_| {
        if r.random::<f64>() < p {
            T::zero()
        } else {
            keep
        }
    })
}
