//! Seeded comparisons of model variants on generated datasets.

use std::fmt::Write as _;
use std::time::Instant;

use crate::config::Config;
use crate::data::{Dataset, Split};
use crate::encoder::{ConvLayerSpec, EncoderConfig};
use crate::error::Result;
use crate::eval::{evaluate, EvalReport};
use crate::gate::FusionMode;
use crate::spatial::ContextKind;
use crate::synth::{render, SyntheticSpec};
use crate::tensor::Real;
use crate::train::{holdout, Splits, TrainOutcome, Trainer};

/// One model variant: context model and fusion mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub context: ContextKind,
    pub fusion: FusionMode,
}

impl Variant {
    pub fn new(context: ContextKind, fusion: FusionMode) -> Self {
        let name = match fusion {
            FusionMode::Gated => context.name().to_string(),
            f => format!("{}+{}", context.name(), f.name()),
        };
        Variant { name, context, fusion }
    }

    pub fn apply(&self, cfg: &Config) -> Config {
        let mut c = cfg.clone();
        c.context.model = self.context;
        c.gate.mode = self.fusion;
        c.train.name = Some(self.name.clone());
        c
    }
}

/// Full model, global-average context, and the concatenation ablation.
pub fn efficacy_variants() -> Vec<Variant> {
    vec![
        Variant::new(ContextKind::Irnn2, FusionMode::Gated),
        Variant::new(ContextKind::GlobalAvg, FusionMode::Gated),
        Variant::new(ContextKind::Irnn2, FusionMode::Concat),
    ]
}

/// Small configuration for `32×32` generated data (`K = 8`, `D = 32`).
pub fn benchmark_config() -> Config {
    let layer = |stride, channels| ConvLayerSpec { kernel: 3, stride, channels, relu: true };
    let mut c = Config::default();
    c.encoder = EncoderConfig {
        input: [32, 32, 3],
        layers: vec![layer(2, 16), layer(2, 32), layer(1, 32)],
        shared_streams: true,
        pixel_mean: None,
    };
    c.context.hidden = 32;
    c.head.embed_dim = 64;
    c.train.batch_size = 16;
    c.train.epochs = 20;
    c.train.patience = 6;
    c.train.max_batches_per_epoch = Some(30);
    // Mirrored glyphs are different glyphs.
    c.data.flip = false;
    c.eval.trials = 10;
    c.synth = Some(SyntheticSpec::benchmark(0));
    c
}

/// Renders a spec in memory: training identities (validation held out from
/// them when the spec has no validation identities) and the test split.
pub fn synthetic_splits<T: Real>(spec: &SyntheticSpec, val_fraction: f64) -> Result<(Splits<T>, Dataset<T>)> {
    let (samples, _) = render::<T>(spec)?;
    let pick = |s: Split| Dataset {
        samples: samples.iter().filter(|x| spec.split_of(x.identity) == s).cloned().collect(),
    };
    let (train, val, test) = (pick(Split::Train), pick(Split::Val), pick(Split::Test));
    let splits = if val.is_empty() { holdout(train, val_fraction) } else { Splits { train, val } };
    Ok((splits, test))
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub variant: String,
    pub seed: u64,
    pub report: EvalReport,
    pub outcome: TrainOutcome,
    pub seconds: f64,
}

impl VariantResult {
    pub fn rank1(&self) -> f64 {
        self.report.rank1_mean_std().0
    }
}

/// Trains one variant and evaluates its best-validation parameters.
pub fn run_variant<T: Real>(
    base: &Config,
    variant: &Variant,
    splits: &Splits<T>,
    test: &Dataset<T>,
) -> Result<VariantResult> {
    let cfg = variant.apply(base);
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg.clone(), splits.clone())?;
    let outcome = trainer.run(|_| {})?;
    let report = evaluate(trainer.best_model(), test, &cfg.eval)?;
    Ok(VariantResult {
        variant: variant.name.clone(),
        seed: cfg.train.seed,
        report,
        outcome,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Default)]
pub struct Comparison {
    pub results: Vec<VariantResult>,
}

impl Comparison {
    /// Mean over seeds of each run's mean rank-1 rate.
    pub fn mean_rank1(&self, variant: &str) -> Option<f64> {
        let v: Vec<f64> = self.results.iter().filter(|r| r.variant == variant).map(|r| r.rank1()).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn variants(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.results {
            if !out.contains(&r.variant) {
                out.push(r.variant.clone());
            }
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = String::from("variant\tseed\trank1\tmap\tepochs\tseconds\n");
        for r in &self.results {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.4}\t{:.4}\t{}\t{:.1}",
                r.variant,
                r.seed,
                r.rank1(),
                r.report.map_mean_std().0,
                r.outcome.epochs,
                r.seconds
            );
        }
        for v in self.variants() {
            let _ = writeln!(out, "{v}\tmean\t{:.4}", self.mean_rank1(&v).unwrap_or(f64::NAN));
        }
        out
    }
}

/// Every variant on a dataset generated per seed. The seed drives data
/// generation, initialization, batching and evaluation trials.
pub fn compare<T: Real>(
    base: &Config,
    spec: &SyntheticSpec,
    variants: &[Variant],
    seeds: &[u64],
    mut on_result: impl FnMut(&VariantResult),
) -> Result<Comparison> {
    let mut cmp = Comparison::default();
    for &seed in seeds {
        let spec = SyntheticSpec { seed, ..spec.clone() };
        let (splits, test) = synthetic_splits::<T>(&spec, base.data.val_fraction)?;
        let mut cfg = base.clone();
        cfg.train.seed = seed;
        cfg.eval.seed = seed;
        for v in variants {
            let r = run_variant(&cfg, v, &splits, &test)?;
            on_result(&r);
            cmp.results.push(r);
        }
    }
    Ok(cmp)
}
