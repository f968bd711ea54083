//! `migate`: data generation, training, evaluation, gradient checks and
//! variant comparisons.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use migate::checkpoint::{stored_precision, Checkpoint};
use migate::data::load_dataset;
use migate::eval::{evaluate_scores, full_scores};
use migate::experiment::{compare, efficacy_variants, Variant};
use migate::gradcheck::module_suite;
use migate::synth::generate_pair_dataset;
use migate::train::{has_run, load_splits, run_dir, LAST_CHECKPOINT};
use migate::{
    Config, ContextKind, Error, ErrorKind, FusionMode, GradCheckConfig, Model, OpKind, Precision, Real, Result,
    Split, Trainer,
};

#[derive(Parser)]
#[command(name = "migate", version, about = "Multiplicative integration matching networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides train.seed (and the generator seed for gen-data).
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides train.precision.
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from the `[synth]` section into `data.root`.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory; overrides data.root.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace an existing generated dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train a model; writes checkpoints and a metrics log to the run directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Context model: irnn2, spp, global_avg or stacked_conv.
        #[arg(long, value_parser = parse_context)]
        context: Option<ContextKind>,
        /// Fusion mode: gated, linear or concat.
        #[arg(long, value_parser = parse_fusion)]
        fusion: Option<FusionMode>,
        /// Dataset directory; overrides data.root.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Parent of run directories; overrides train.out.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides train.epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Start over even if the run directory already holds a run.
        #[arg(long)]
        force: bool,
        /// Continue from the run directory's last checkpoint.
        #[arg(long, conflicts_with = "force")]
        resume: bool,
    },
    /// Evaluate a checkpoint with repeated single-shot trials and mAP.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; defaults to the checkpoint's data.root.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Split to evaluate (train, val or test).
        #[arg(long, default_value = "test")]
        split: String,
        /// Number of probe/gallery draws; overrides eval.trials.
        #[arg(long)]
        trials: Option<usize>,
        /// Output directory; defaults to `eval-<split>` next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overwrite an existing output directory.
        #[arg(long)]
        force: bool,
    },
    /// Finite-difference gradient checks of every module and of the full model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        /// Flip the sign of one operation's backward pass (detector test).
        #[arg(long, hide = true, value_parser = parse_op)]
        inject_fault: Option<OpKind>,
    },
    /// Train and evaluate several variants on generated data for several seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        /// Comma-separated variants such as `irnn2`, `global_avg`, `irnn2+concat`.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        /// Overrides eval.trials.
        #[arg(long)]
        trials: Option<usize>,
        /// Only the contexts, with the gated fusion (shorthand for `--variants`).
        #[arg(long, value_delimiter = ',', value_parser = parse_context, conflicts_with = "variants")]
        context: Vec<ContextKind>,
    },
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_context(s: &str) -> std::result::Result<ContextKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_fusion(s: &str) -> std::result::Result<FusionMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_op(s: &str) -> std::result::Result<OpKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_variant(s: &str) -> Result<Variant> {
    let (ctx, fusion) = match s.split_once('+') {
        Some((c, f)) => (c, f.parse()?),
        None => (s, FusionMode::Gated),
    };
    Ok(Variant::new(ctx.parse()?, fusion))
}

impl Common {
    fn load(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(p) = self.precision {
            cfg.train.precision = p;
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = init_threads().and_then(|_| run(cli.command)) {
        eprintln!("error: {e}");
        return ExitCode::from(match e.kind() {
            ErrorKind::Validation => 1,
            ErrorKind::Numerical => 2,
            ErrorKind::Io => 3,
        });
    }
    ExitCode::SUCCESS
}

/// Caps the worker pool at `MIGATE_THREADS` when set.
fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("MIGATE_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("MIGATE_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { common, out, force } => gen_data(&common, out, force),
        Command::Train { common, context, fusion, data, out, epochs, force, resume } => {
            let mut cfg = common.load()?;
            if let Some(c) = context {
                cfg.context.model = c;
            }
            if let Some(f) = fusion {
                cfg.gate.mode = f;
            }
            if let Some(d) = data {
                cfg.data.root = Some(d);
            }
            if let Some(o) = out {
                cfg.train.out = o;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            match cfg.train.precision {
                Precision::F32 => train::<f32>(cfg, force, resume, epochs),
                Precision::F64 => train::<f64>(cfg, force, resume, epochs),
            }
        }
        Command::Eval { common, checkpoint, data, split, trials, out, force } => {
            let precision = match common.precision {
                Some(p) => p,
                None => stored_precision(&checkpoint)?,
            };
            let opts = EvalOpts { common, checkpoint, data, split: split.parse()?, trials, out, force };
            match precision {
                Precision::F32 => eval::<f32>(opts),
                Precision::F64 => eval::<f64>(opts),
            }
        }
        Command::Gradcheck { common, tol, inject_fault } => gradcheck(&common, tol, inject_fault),
        Command::Compare { common, seeds, variants, trials, context } => {
            let mut cfg = common.load()?;
            if let Some(t) = trials {
                cfg.eval.trials = t;
            }
            let variants = if !context.is_empty() {
                context.into_iter().map(|c| Variant::new(c, FusionMode::Gated)).collect()
            } else if variants.is_empty() {
                efficacy_variants()
            } else {
                variants.iter().map(|v| parse_variant(v)).collect::<Result<Vec<_>>>()?
            };
            match cfg.train.precision {
                Precision::F32 => run_compare::<f32>(&cfg, &variants, &seeds),
                Precision::F64 => run_compare::<f64>(&cfg, &variants, &seeds),
            }
        }
    }
}

fn gen_data(common: &Common, out: Option<PathBuf>, force: bool) -> Result<()> {
    let cfg = common.load()?;
    let mut spec = cfg
        .synth
        .clone()
        .ok_or_else(|| Error::Config("missing section `[synth]`".into()))?;
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    let root = match out {
        Some(o) => o,
        None => cfg.data.root()?.to_path_buf(),
    };
    let summary = generate_pair_dataset(&spec, &root, force)?;
    println!(
        "wrote {} images of {} identities to {}",
        summary.images,
        summary.identities,
        root.display()
    );
    for (split, n) in &summary.per_split {
        println!("  {split}: {n} images");
    }
    Ok(())
}

fn print_param_summary<T: Real>(model: &Model<T>) {
    println!("parameters:");
    for (name, n) in model.param_counts() {
        println!("  {name:<24} {n:>10}");
        if name == "gate.u" && model.fusion.is_symmetric() {
            println!("  {:<24} {n:>10} (tied to gate.u, not stored separately)", "gate.v");
        }
    }
    println!("  {:<24} {:>10}", "total", model.param_total());
}

/// On resume everything but the epoch budget comes from the checkpoint.
fn train<T: Real>(cfg: Config, force: bool, resume: bool, epochs: Option<usize>) -> Result<()> {
    let dir = run_dir(&cfg);
    let splits = load_splits::<T>(&cfg)?;
    let trainer = if resume {
        let ck = Checkpoint::<T>::load(&dir.join(LAST_CHECKPOINT), None)?;
        let mut t = Trainer::resume(ck, splits)?;
        if epochs.is_some() {
            t.set_epochs(cfg.train.epochs);
        }
        t
    } else {
        if has_run(&dir) && !force {
            return Err(Error::Config(format!(
                "{} already holds a run (pass --force to start over or --resume to continue)",
                dir.display()
            )));
        }
        Trainer::new(cfg, splits)?
    };
    let mut trainer = trainer.with_run_dir(&dir)?;
    std::fs::write(dir.join("config.toml"), trainer.config.to_toml()).map_err(|e| Error::io(&dir, e))?;
    print_param_summary(&trainer.model);
    println!(
        "run {} | {} training images after augmentation | context {} | fusion {:?} | {:?}",
        dir.display(),
        trainer.pool_len(),
        trainer.config.context.model,
        trainer.config.gate.mode,
        T::PRECISION
    );
    let start = Instant::now();
    let outcome = trainer.run(|m| {
        println!(
            "epoch {:>3}  train {:.6}  val {:.6}  lr {:.2e}{}",
            m.epoch,
            m.train_loss,
            m.val_loss,
            m.lr,
            if m.improved { "  *" } else { "" }
        );
    })?;
    println!(
        "stopped after {} epochs ({:.1}s); best val {:.6} at epoch {}",
        outcome.epochs,
        start.elapsed().as_secs_f64(),
        outcome.best_val,
        outcome.best_epoch
    );
    Ok(())
}

struct EvalOpts {
    common: Common,
    checkpoint: PathBuf,
    data: Option<PathBuf>,
    split: Split,
    trials: Option<usize>,
    out: Option<PathBuf>,
    force: bool,
}

fn eval<T: Real>(o: EvalOpts) -> Result<()> {
    let user = match &o.common.config {
        Some(p) => Some(Config::load(p)?),
        None => None,
    };
    let ck = Checkpoint::<T>::load(&o.checkpoint, user.as_ref().map(|c| c.model()))?;
    let mut cfg = ck.config.clone();
    if let Some(u) = &user {
        cfg.eval = u.eval;
        if u.data.root.is_some() {
            cfg.data.root = u.data.root.clone();
        }
    }
    if let Some(t) = o.trials {
        cfg.eval.trials = t;
    }
    if let Some(s) = o.common.seed {
        cfg.eval.seed = s;
    }
    if let Some(d) = o.data {
        cfg.data.root = Some(d);
    }
    let data = load_dataset::<T>(cfg.data.root()?, Some(o.split))?;
    if data.is_empty() {
        return Err(Error::Dataset(format!("split {} is empty", o.split)));
    }
    let out = o.out.unwrap_or_else(|| {
        o.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval-{}", o.split))
    });
    if out.exists() && !o.force && std::fs::read_dir(&out).map(|mut d| d.next().is_some()).unwrap_or(false) {
        return Err(Error::Config(format!(
            "{} is not empty (pass --force to overwrite)",
            out.display()
        )));
    }
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let (full, rows, cols) = full_scores(&ck.model, &data)?;
    let report = evaluate_scores(&data, &full, &rows, &cols, &cfg.eval)?;
    full.save(out.join("scores.mism"))?;
    let table = report.cmc_table();
    let write = |name: &str, text: &str| {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("cmc.txt", &table)?;
    write("metrics.jsonl", &report.records())?;
    print!("{table}");
    let (r1, r1s) = report.rank1_mean_std();
    let (m, ms) = report.map_mean_std();
    println!(
        "rank-1 {:.2}% ± {:.2} | mAP {:.2}% ± {:.2} | {} trials, gallery {}",
        100.0 * r1,
        100.0 * r1s,
        100.0 * m,
        100.0 * ms,
        report.trials.len(),
        report.gallery_size()
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn gradcheck(common: &Common, tol: f64, fault: Option<OpKind>) -> Result<()> {
    let seed = common.seed.unwrap_or(0);
    let gc = GradCheckConfig { tol, ..GradCheckConfig::default() };
    let start = Instant::now();
    let results = module_suite(seed, &gc, fault)?;
    let mut worst: Vec<(&str, f64, bool)> = Vec::new();
    for (module, report) in &results {
        println!("{module:<16} {report}");
        match worst.iter_mut().find(|w| w.0 == *module) {
            Some(w) => {
                w.1 = w.1.max(report.max_rel_error);
                w.2 &= report.passed();
            }
            None => worst.push((module, report.max_rel_error, report.passed())),
        }
    }
    println!("\nmodule           max relative error");
    for (m, e, ok) in &worst {
        println!("{m:<16} {e:.3e}  {}", if *ok { "pass" } else { "FAIL" });
    }
    println!("({:.1}s, tol {tol:e})", start.elapsed().as_secs_f64());
    let failed: Vec<&str> = worst.iter().filter(|w| !w.2).map(|w| w.0).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::GradCheck(failed.join(", ")))
    }
}

fn run_compare<T: Real>(cfg: &Config, variants: &[Variant], seeds: &[u64]) -> Result<()> {
    let spec = cfg
        .synth
        .clone()
        .ok_or_else(|| Error::Config("compare needs a `[synth]` section".into()))?;
    let cmp = compare::<T>(cfg, &spec, variants, seeds, |r| {
        println!(
            "{:<20} seed {:<3} rank-1 {:.2}%  mAP {:.2}%  ({} epochs, {:.1}s)",
            r.variant,
            r.seed,
            100.0 * r.rank1(),
            100.0 * r.report.map_mean_std().0,
            r.outcome.epochs,
            r.seconds
        );
    })?;
    let table = cmp.table();
    print!("\n{table}");
    std::fs::create_dir_all(&cfg.train.out).map_err(|e| Error::io(&cfg.train.out, e))?;
    let p = cfg.train.out.join("compare.tsv");
    std::fs::write(&p, table).map_err(|e| Error::io(&p, e))?;
    Ok(())
}
