//! Run configuration: one TOML file with a section per module.
//!
//! ```toml
//! [data]
//! root = "data/synth"
//!
//! [encoder]
//! input = [32, 32, 3]
//!
//! [context]
//! model = "irnn2"
//!
//! [train]
//! epochs = 20
//! seed = 7
//! ```
//!
//! Every section is optional except where a command needs it (`[synth]` for
//! data generation, `data.root` for training and evaluation).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::gate::GateConfig;
use crate::head::{HeadConfig, LossConfig};
use crate::model::ModelConfig;
use crate::spatial::ContextConfig;
use crate::synth::SyntheticSpec;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    /// Add horizontal mirrors to the training pool.
    pub flip: bool,
    /// Add the two-step shift family to the training pool.
    pub shift: bool,
    /// Share of each training identity's images per camera held out for
    /// validation when the dataset has no validation identities.
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            flip: true,
            shift: true,
            val_fraction: 0.25,
        }
    }
}

impl DataConfig {
    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            flip: self.flip,
            shift: self.shift,
        }
    }

    pub fn root(&self) -> Result<&Path> {
        self.root
            .as_deref()
            .ok_or_else(|| Error::Config("missing field `data.root`".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub gate: GateConfig,
    pub context: ContextConfig,
    pub head: HeadConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub synth: Option<SyntheticSpec>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            gate: self.gate.clone(),
            context: self.context.clone(),
            head: self.head.clone(),
            loss: self.loss,
        }
    }

    pub fn set_model(&mut self, m: ModelConfig) {
        self.encoder = m.encoder;
        self.gate = m.gate;
        self.context = m.context;
        self.head = m.head;
        self.loss = m.loss;
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(Error::Config(format!(
                "data.val_fraction must lie in [0, 1), got {}",
                self.data.val_fraction
            )));
        }
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(Config::parse("").unwrap(), Config::default());
    }

    #[test]
    fn round_trip() {
        let mut c = Config::default();
        c.synth = Some(SyntheticSpec::benchmark(4));
        c.encoder.pixel_mean = Some(vec![0.1, 0.2, 0.30000000000000004]);
        assert_eq!(Config::parse(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_key_names_it() {
        let e = Config::parse("[train]\nlearning_rate = 0.1\n").unwrap_err().to_string();
        assert!(e.contains("learning_rate"), "{e}");
        assert!(e.contains("line 2"), "{e}");
    }

    #[test]
    fn missing_synth_field_named() {
        let e = Config::parse("[synth]\nimage_size = 32\n").unwrap_err().to_string();
        assert!(e.contains("identities"), "{e}");
    }
}
