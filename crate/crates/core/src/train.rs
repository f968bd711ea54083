//! SGD with momentum, per-epoch shuffled batches, validation-based early
//! stopping with plateau decay, and resumable checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::data::{augment_all, epoch_batches, load_dataset, Dataset, PairBatch, Sample, Split};
use crate::error::{Error, Result};
use crate::gate::FusionMode;
use crate::model::Model;
use crate::rng;
use crate::tensor::{Precision, Real, Tensor};

const VAL_TAG: u64 = 0x7661_6c69;
const DROPOUT_TAG: u64 = 0x6472_6f70;

pub const LAST_CHECKPOINT: &str = "last.mick";
pub const BEST_CHECKPOINT: &str = "best.mick";
pub const METRICS_LOG: &str = "metrics.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    /// Learning-rate factor applied on a plateau.
    pub decay: f64,
    /// Non-improving epochs that trigger one decay.
    pub decay_patience: usize,
    /// Caps the batches per epoch; the rest of the shuffled pool is skipped.
    pub max_batches_per_epoch: Option<usize>,
    pub seed: u64,
    pub precision: Precision,
    /// Parent directory of run directories.
    pub out: PathBuf,
    /// Run directory name; defaults to `<context>-seed<seed>`.
    pub name: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            epochs: 30,
            batch_size: 128,
            patience: 5,
            decay: 0.1,
            decay_patience: 2,
            max_batches_per_epoch: None,
            seed: 0,
            precision: Precision::F32,
            out: PathBuf::from("runs"),
            name: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 3 {
            return bad(format!("batch_size must be at least 3, got {}", self.batch_size));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay must lie in (0, 1], got {}", self.decay));
        }
        if self.decay_patience == 0 || self.max_batches_per_epoch == Some(0) {
            return bad("decay_patience and max_batches_per_epoch must be positive".into());
        }
        Ok(())
    }
}

/// `v ← μ·v − lr·g; θ ← θ + v`. Nothing is updated if any gradient is non-finite.
pub fn sgd_step<T: Real>(
    params: Vec<&mut Tensor<T>>,
    grads: &[Tensor<T>],
    velocity: &mut [Tensor<T>],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::invalid(
            "sgd_step",
            format!("{} parameters, {} gradients, {} velocities", params.len(), grads.len(), velocity.len()),
        ));
    }
    for (i, ((p, g), v)) in params.iter().zip(grads).zip(velocity.iter()).enumerate() {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape("sgd_step", p.shape(), g.shape()));
        }
        if let Some(bad) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("gradient of parameter tensor {i}"),
                index: bad,
            });
        }
    }
    let (lr, mu) = (T::of(lr), T::of(momentum));
    for ((p, g), v) in params.into_iter().zip(grads).zip(velocity.iter_mut()) {
        for ((x, &gx), vx) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vx = mu * *vx - lr * gx;
            *x += *vx;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub improved: bool,
}

impl EpochMetrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    /// Completed epochs.
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub best_val: f64,
    pub best_epoch: usize,
    pub since_best: usize,
    pub stopped: bool,
    pub history: Vec<EpochMetrics>,
}

impl TrainerState {
    fn new(lr: f64) -> Self {
        TrainerState {
            epoch: 0,
            step: 0,
            lr,
            best_val: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
            stopped: false,
            history: vec![],
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("state serializes")
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("trainer state: {e}")))
    }
}

/// Training and validation images of a run.
#[derive(Debug, Clone)]
pub struct Splits<T> {
    pub train: Dataset<T>,
    pub val: Dataset<T>,
}

/// Holds out the last `fraction` of each (identity, camera) group, keeping
/// at least one image in training.
pub fn holdout<T: Real>(data: Dataset<T>, fraction: f64) -> Splits<T> {
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, s) in data.samples.iter().enumerate() {
        groups.entry((s.identity, s.camera)).or_default().push(i);
    }
    let mut held = vec![false; data.len()];
    for idx in groups.values_mut() {
        idx.sort_by_key(|&i| data.samples[i].index);
        let n = idx.len();
        let k = ((n as f64 * fraction).ceil() as usize).min(n - 1);
        for &i in &idx[n - k..] {
            held[i] = true;
        }
    }
    let (mut train, mut val) = (vec![], vec![]);
    for (s, h) in data.samples.into_iter().zip(held) {
        if h { val.push(s) } else { train.push(s) }
    }
    Splits {
        train: Dataset { samples: train },
        val: Dataset { samples: val },
    }
}

/// Training identities, and validation identities when the dataset has any,
/// otherwise held-out images of the training identities.
pub fn load_splits<T: Real>(cfg: &Config) -> Result<Splits<T>> {
    let root = cfg.data.root()?;
    let train = load_dataset::<T>(root, Some(Split::Train))?;
    if train.identities().len() < 2 {
        return Err(Error::Dataset(format!("{} has fewer than 2 training identities", root.display())));
    }
    let val = load_dataset::<T>(root, Some(Split::Val))?;
    if !val.is_empty() {
        return Ok(Splits { train, val });
    }
    if cfg.data.val_fraction <= 0.0 {
        return Err(Error::Dataset("no validation identities and data.val_fraction is 0".into()));
    }
    Ok(holdout(train, cfg.data.val_fraction))
}

/// Result of [`Trainer::run`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub epochs: usize,
    pub best_val: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochMetrics>,
}

pub struct Trainer<T> {
    pub config: Config,
    pub model: Model<T>,
    pub velocity: Vec<Tensor<T>>,
    pub state: TrainerState,
    /// Parameters at the best validation loss so far.
    pub best: Option<Model<T>>,
    pool: Vec<Sample<T>>,
    val: Vec<Sample<T>>,
    val_batches: Vec<PairBatch>,
    run_dir: Option<PathBuf>,
}

fn zeros_like<T: Real>(model: &mut Model<T>) -> Vec<Tensor<T>> {
    model.tensors_mut().into_iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect()
}

/// Directory name of a run.
pub fn run_name(cfg: &Config) -> String {
    cfg.train
        .name
        .clone()
        .unwrap_or_else(|| match cfg.gate.mode {
            FusionMode::Gated => format!("{}-seed{}", cfg.context.model.name(), cfg.train.seed),
            f => format!("{}+{}-seed{}", cfg.context.model.name(), f.name(), cfg.train.seed),
        })
}

impl<T: Real> Trainer<T> {
    /// Fresh model. A missing encoder pixel mean is computed from the
    /// training images and recorded in the configuration.
    pub fn new(mut config: Config, splits: Splits<T>) -> Result<Self> {
        if config.encoder.pixel_mean.is_none() {
            config.encoder.pixel_mean = Some(splits.train.pixel_mean());
        }
        config.validate()?;
        let mut model = Model::init(config.model(), config.train.seed)?;
        let velocity = zeros_like(&mut model);
        let state = TrainerState::new(config.train.lr);
        Self::assemble(config, model, velocity, state, splits)
    }

    /// Continues from a checkpoint written by a previous run.
    pub fn resume(ck: Checkpoint<T>, splits: Splits<T>) -> Result<Self> {
        let Checkpoint { config, mut model, velocity, state } = ck;
        let velocity = if velocity.is_empty() { zeros_like(&mut model) } else { velocity };
        Self::assemble(config, model, velocity, state, splits)
    }

    fn assemble(
        config: Config,
        model: Model<T>,
        velocity: Vec<Tensor<T>>,
        state: TrainerState,
        splits: Splits<T>,
    ) -> Result<Self> {
        let shape = config.encoder.input;
        for s in splits.train.samples.iter().chain(&splits.val.samples) {
            if s.image.shape() != shape {
                return Err(Error::Dataset(format!(
                    "image of identity {} is {:?}, encoder expects {:?}",
                    s.identity,
                    s.image.shape(),
                    shape
                )));
            }
        }
        let pool = augment_all(&splits.train.samples, config.data.augment())?;
        let val = splits.val.samples;
        let val_labels: Vec<usize> = val.iter().map(|s| s.identity).collect();
        let val_batch = config.train.batch_size.min(val.len());
        let val_batches = epoch_batches(&val_labels, val_batch, rng::mix(&[config.train.seed, VAL_TAG]), 0)?;
        Ok(Trainer {
            config,
            model,
            velocity,
            state,
            best: None,
            pool,
            val,
            val_batches,
            run_dir: None,
        })
    }

    /// Writes checkpoints and the metrics log under `dir`.
    pub fn with_run_dir(mut self, dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        self.run_dir = Some(dir);
        Ok(self)
    }

    /// Changes the epoch budget, reopening a run that stopped only because
    /// it had used up the old one.
    pub fn set_epochs(&mut self, epochs: usize) {
        let tc = &mut self.config.train;
        tc.epochs = epochs;
        self.state.stopped = self.state.epoch >= epochs || self.state.since_best > tc.patience;
    }

    pub fn pool_len(&self) -> usize {
        self.pool.len()
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.config.clone(),
            model: self.model.clone(),
            velocity: self.velocity.clone(),
            state: self.state.clone(),
        }
    }

    /// Mean loss over the fixed validation batches, dropout off.
    pub fn validation_loss(&self) -> Result<f64> {
        let mut total = 0.0;
        for b in &self.val_batches {
            let imgs: Vec<&Tensor<T>> = b.indices.iter().map(|&i| &self.val[i].image).collect();
            total += self.model.loss_and_grad(&imgs, &b.labels, None, false, None)?.loss.as_f64();
        }
        Ok(total / self.val_batches.len() as f64)
    }

    fn diverged(&self, step: usize, e: impl std::fmt::Display) -> Error {
        Error::Diverged {
            epoch: self.state.epoch + 1,
            step,
            msg: e.to_string(),
        }
    }

    /// One epoch of updates; returns the mean training loss.
    fn train_epoch(&mut self) -> Result<f64> {
        let tc = &self.config.train;
        let labels: Vec<usize> = self.pool.iter().map(|s| s.identity).collect();
        let epoch = self.state.epoch as u64;
        let mut batches = epoch_batches(&labels, tc.batch_size.min(self.pool.len()), tc.seed, epoch)?;
        if let Some(m) = tc.max_batches_per_epoch {
            batches.truncate(m);
        }
        let (p, seed, lr, mu) = (self.config.context.dropout, tc.seed, self.state.lr, tc.momentum);
        let mut total = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let imgs: Vec<&Tensor<T>> = batch.indices.iter().map(|&i| &self.pool[i].image).collect();
            let dropout = (p > 0.0).then(|| (p, rng::mix(&[seed, DROPOUT_TAG, epoch, b as u64])));
            let eval = self
                .model
                .loss_and_grad(&imgs, &batch.labels, dropout, true, None)
                .map_err(|e| match e {
                    Error::NonFinite { .. } => self.diverged(self.state.step, &e),
                    other => other,
                })?;
            let loss = eval.loss.as_f64();
            if !loss.is_finite() {
                return Err(self.diverged(self.state.step, "loss is not finite"));
            }
            let grads = eval.grads.expect("requested");
            sgd_step(self.model.tensors_mut(), &grads, &mut self.velocity, lr, mu)
                .map_err(|e| self.diverged(self.state.step, e))?;
            self.state.step += 1;
            total += loss;
        }
        Ok(total / batches.len() as f64)
    }

    fn save(&self, name: &str) -> Result<()> {
        if let Some(dir) = &self.run_dir {
            self.checkpoint().save(&dir.join(name))?;
        }
        Ok(())
    }

    fn write_metrics(&self) -> Result<()> {
        let Some(dir) = &self.run_dir else { return Ok(()) };
        let path = dir.join(METRICS_LOG);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for m in &self.state.history {
            writeln!(f, "{}", m.to_json()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Runs one epoch with validation and bookkeeping. Returns `None` once
    /// training has stopped.
    pub fn step_epoch(&mut self) -> Result<Option<EpochMetrics>> {
        if self.state.stopped || self.state.epoch >= self.config.train.epochs {
            self.state.stopped = true;
            return Ok(None);
        }
        let lr = self.state.lr;
        let train_loss = self.train_epoch()?;
        let val_loss = self.validation_loss()?;
        if !val_loss.is_finite() {
            return Err(self.diverged(self.state.step, "validation loss is not finite"));
        }
        self.state.epoch += 1;
        let improved = val_loss < self.state.best_val;
        let tc = &self.config.train;
        if improved {
            self.state.best_val = val_loss;
            self.state.best_epoch = self.state.epoch;
            self.state.since_best = 0;
        } else {
            self.state.since_best += 1;
            if self.state.since_best % tc.decay_patience == 0 {
                self.state.lr *= tc.decay;
            }
        }
        if self.state.since_best > tc.patience || self.state.epoch >= tc.epochs {
            self.state.stopped = true;
        }
        let m = EpochMetrics {
            epoch: self.state.epoch,
            train_loss,
            val_loss,
            lr,
            improved,
        };
        self.state.history.push(m.clone());
        if improved {
            self.best = Some(self.model.clone());
            self.save(BEST_CHECKPOINT)?;
        }
        self.save(LAST_CHECKPOINT)?;
        self.write_metrics()?;
        Ok(Some(m))
    }

    /// Trains until early stopping or the epoch budget.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<TrainOutcome> {
        while let Some(m) = self.step_epoch()? {
            on_epoch(&m);
        }
        Ok(TrainOutcome {
            epochs: self.state.epoch,
            best_val: self.state.best_val,
            best_epoch: self.state.best_epoch,
            history: self.state.history.clone(),
        })
    }

    /// Best-validation parameters, or the current ones if no epoch ran.
    pub fn best_model(&self) -> &Model<T> {
        self.best.as_ref().unwrap_or(&self.model)
    }
}

/// Run directory for a configuration.
pub fn run_dir(cfg: &Config) -> PathBuf {
    cfg.train.out.join(run_name(cfg))
}

/// Whether `dir` already holds a run.
pub fn has_run(dir: &Path) -> bool {
    dir.join(LAST_CHECKPOINT).exists()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step() {
        let mut p = Tensor::<f64>::zeros([1]);
        let mut v = vec![Tensor::zeros([1])];
        sgd_step(vec![&mut p], &[Tensor::ones([1])], &mut v, 0.1, 0.0).unwrap();
        assert_eq!(p.data(), &[-0.1]);
    }

    #[test]
    fn zero_gradient_fixed_point() {
        let mut p = Tensor::<f64>::full([2], 3.0);
        let mut v = vec![Tensor::zeros([2])];
        sgd_step(vec![&mut p], &[Tensor::zeros([2])], &mut v, 0.1, 0.9).unwrap();
        assert_eq!(p.data(), &[3.0, 3.0]);
        assert_eq!(v[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn momentum_recurrence() {
        let (lr, g) = (0.1, 2.0);
        let mut p = Tensor::<f64>::zeros([1]);
        let mut v = vec![Tensor::zeros([1])];
        for _ in 0..2 {
            sgd_step(vec![&mut p], &[Tensor::full([1], g)], &mut v, lr, 0.9).unwrap();
        }
        assert!((p.data()[0] - (-lr * g * (1.0 + 1.9))).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_leaves_params() {
        let mut p = Tensor::<f64>::zeros([2]);
        let mut v = vec![Tensor::zeros([2])];
        let g = Tensor::from_f64([2], &[1.0, f64::NAN]).unwrap();
        let e = sgd_step(vec![&mut p], &[g], &mut v, 0.1, 0.9).unwrap_err();
        assert!(matches!(e, Error::NonFinite { index: 1, .. }));
        assert_eq!(p.data(), &[0.0, 0.0]);
    }

    #[test]
    fn holdout_keeps_one_per_group() {
        let s = |id, cam, index| Sample { image: Tensor::<f64>::zeros([1, 1, 3]), identity: id, camera: cam, index };
        let data = Dataset { samples: vec![s(0, 0, 0), s(0, 0, 1), s(0, 0, 2), s(0, 0, 3), s(1, 1, 0)] };
        let sp = holdout(data, 0.25);
        assert_eq!(sp.val.samples.len(), 1);
        assert_eq!(sp.val.samples[0].index, 3);
        assert_eq!(sp.train.samples.len(), 4);
    }
}
