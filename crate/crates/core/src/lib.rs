//! Spatially multiplicative integration networks for pairwise image matching.

pub mod activation;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gate;
pub mod gradcheck;
pub mod graph;
pub mod head;
pub mod init;
pub mod model;
pub mod rng;
pub mod spatial;
pub mod synth;
pub mod tensor;
pub mod train;

pub use activation::{load_activation_map, save_activation_map, ActivationMap};
pub use checkpoint::Checkpoint;
pub use config::Config;
pub use data::{Dataset, PairBatch, Sample, Split};
pub use error::{Error, ErrorKind, Result};
pub use eval::{CmcCurve, EvalReport, RegionSimilarityParams, ScoreMatrix};
pub use gate::FusionMode;
pub use gradcheck::{GradCheckConfig, GradCheckReport};
pub use graph::OpKind;
pub use model::{Model, ModelConfig};
pub use spatial::ContextKind;
pub use synth::SyntheticSpec;
pub use tensor::{Precision, Real, Tensor};
pub use train::{TrainConfig, Trainer};
