use std::fs;
use std::path::Path;

use migate::checkpoint::CheckpointFile;
use migate::encoder::{ConvLayerSpec, EncoderConfig};
use migate::synth::generate_pair_dataset;
use migate::train::{load_splits, sgd_step, Splits, BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_LOG};
use migate::{Checkpoint, Config, Error, Model, SyntheticSpec, Tensor, Trainer};

fn spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        identities: 6,
        image_size: 16,
        images_per_camera: 3,
        glyph_size: 4,
        max_translation: 2,
        test_identities: 2,
        seed,
        ..SyntheticSpec::benchmark(seed)
    }
}

fn config(root: &Path, out: &Path) -> Config {
    let mut c = Config::default();
    c.data.root = Some(root.to_path_buf());
    c.data.shift = false;
    c.encoder = EncoderConfig {
        input: [16, 16, 3],
        layers: vec![
            ConvLayerSpec { kernel: 3, stride: 2, channels: 6, relu: true },
            ConvLayerSpec { kernel: 3, stride: 2, channels: 6, relu: true },
        ],
        shared_streams: true,
        pixel_mean: None,
    };
    c.context.hidden = 6;
    c.head.embed_dim = 8;
    c.train.batch_size = 8;
    c.train.epochs = 4;
    c.train.max_batches_per_epoch = Some(3);
    c.train.out = out.to_path_buf();
    c
}

fn setup(dir: &Path) -> (Config, Splits<f64>) {
    let root = dir.join("data");
    generate_pair_dataset(&spec(3), &root, false).unwrap();
    let cfg = config(&root, &dir.join("runs"));
    let splits = load_splits(&cfg).unwrap();
    (cfg, splits)
}

#[test]
fn checkpoint_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, splits) = setup(dir.path());
    let run = dir.path().join("run");
    let mut t = Trainer::<f64>::new(cfg, splits).unwrap().with_run_dir(&run).unwrap();
    t.step_epoch().unwrap();
    let path = run.join(LAST_CHECKPOINT);
    let bytes = fs::read(&path).unwrap();
    let ck = Checkpoint::<f64>::load(&path, None).unwrap();
    assert_eq!(ck.model, t.model);
    assert_eq!(ck.velocity, t.velocity);
    assert_eq!(ck.state, t.state);
    assert_eq!(ck.to_file().to_bytes(), bytes);
    assert_eq!(CheckpointFile::from_bytes(&path, &bytes).unwrap().to_bytes(), bytes);
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, splits) = setup(dir.path());
    let run = dir.path().join("run");
    Trainer::<f64>::new(cfg, splits).unwrap().with_run_dir(&run).unwrap().step_epoch().unwrap();
    let path = run.join(LAST_CHECKPOINT);
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    let err = Checkpoint::<f64>::load(&path, None).unwrap_err();
    assert!(matches!(err, Error::Truncated { .. }), "{err:?}");
}

#[test]
fn resume_is_bit_identical_to_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, splits) = setup(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    Trainer::<f64>::new(cfg.clone(), splits.clone()).unwrap().with_run_dir(&a).unwrap().run(|_| {}).unwrap();

    let mut first = Trainer::<f64>::new(cfg, splits.clone()).unwrap().with_run_dir(&b).unwrap();
    first.step_epoch().unwrap();
    first.step_epoch().unwrap();
    drop(first);
    let ck = Checkpoint::<f64>::load(&b.join(LAST_CHECKPOINT), None).unwrap();
    Trainer::resume(ck, splits).unwrap().with_run_dir(&b).unwrap().run(|_| {}).unwrap();

    for f in [LAST_CHECKPOINT, METRICS_LOG] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn zero_patience_stops_at_first_non_improving_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, splits) = setup(dir.path());
    cfg.train.patience = 0;
    cfg.train.epochs = 30;
    cfg.train.lr = 0.5;
    let out = Trainer::<f64>::new(cfg, splits).unwrap().run(|_| {}).unwrap();
    let first_miss = out.history.iter().position(|m| !m.improved).expect("some epoch fails to improve");
    assert_eq!(out.epochs, first_miss + 1);
    assert!(out.history[0].improved);
}

#[test]
fn divergence_keeps_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, splits) = setup(dir.path());
    let run = dir.path().join("run");
    let mut t = Trainer::<f64>::new(cfg, splits).unwrap().with_run_dir(&run).unwrap();
    t.step_epoch().unwrap();
    assert!(run.join(BEST_CHECKPOINT).exists());
    t.state.lr = 1e300;
    let mut good = fs::read(run.join(LAST_CHECKPOINT)).unwrap();
    let err = loop {
        match t.step_epoch() {
            Err(e) => break e,
            Ok(Some(_)) => good = fs::read(run.join(LAST_CHECKPOINT)).unwrap(),
            Ok(None) => panic!("training finished without diverging"),
        }
    };
    assert!(matches!(err, Error::Diverged { .. }), "{err}");
    assert_eq!(err.kind(), migate::ErrorKind::Numerical);
    assert_eq!(fs::read(run.join(LAST_CHECKPOINT)).unwrap(), good);
    let mut ck = Checkpoint::<f64>::load(&run.join(LAST_CHECKPOINT), None).unwrap();
    assert!(ck.model.tensors_mut().iter().all(|t| t.data().iter().all(|v| v.is_finite())));
}

#[test]
fn loss_descends_on_fixed_batch() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, splits) = setup(dir.path());
    let mut model_cfg = cfg.clone();
    model_cfg.encoder.pixel_mean = Some(splits.train.pixel_mean());
    let samples = &splits.train.samples;
    // Two images each of four identities.
    let mut picked = Vec::new();
    for id in splits.train.identities().into_iter().take(4) {
        picked.extend(samples.iter().filter(|s| s.identity == id).take(2));
    }
    let images: Vec<&Tensor<f64>> = picked.iter().map(|s| &s.image).collect();
    let labels: Vec<usize> = picked.iter().map(|s| s.identity).collect();
    for seed in 0..3 {
        let mut model = Model::<f64>::init(model_cfg.model(), seed).unwrap();
        let mut velocity: Vec<Tensor<f64>> =
            model.tensors_mut().into_iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        let mut losses = Vec::new();
        for _ in 0..6 {
            let eval = model.loss_and_grad(&images, &labels, None, true, None).unwrap();
            losses.push(eval.loss);
            sgd_step(model.tensors_mut(), &eval.grads.unwrap(), &mut velocity, 1e-3, 0.0).unwrap();
        }
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "seed {seed}: {losses:?}");
    }
}

#[test]
fn trainer_rejects_mismatched_images() {
    let dir = tempfile::tempdir().unwrap();
    let (mut cfg, splits) = setup(dir.path());
    cfg.encoder.input = [32, 32, 3];
    assert!(matches!(Trainer::<f64>::new(cfg, splits), Err(Error::Dataset(_))));
}
