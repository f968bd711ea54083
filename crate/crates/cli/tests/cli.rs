use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn migate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_migate"))
        .args(args)
        .env("MIGATE_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path, identities: usize) -> String {
    let path = dir.join("tiny.toml");
    let text = format!(
        r#"[data]
root = "{data}"
shift = false

[encoder]
input = [16, 16, 3]
layers = [{{kernel = 3, stride = 2, channels = 4}}, {{kernel = 3, stride = 2, channels = 4}}]

[context]
hidden = 4

[head]
embed_dim = 6

[train]
batch_size = 8
epochs = 2
max_batches_per_epoch = 2
out = "{out}"

[eval]
trials = 3

[synth]
identities = {identities}
image_size = 16
images_per_camera = 3
glyph_size = 4
max_translation = 2
test_identities = 2
"#,
        data = dir.join("data").display(),
        out = dir.join("runs").display(),
    );
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn gen_data(cfg: &str) {
    let o = migate(&["gen-data", "--config", cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn gen_data_writes_one_directory_per_identity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 4);
    gen_data(&cfg);
    let ids: Vec<_> = fs::read_dir(dir.path().join("data"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .collect();
    assert_eq!(ids.len(), 4);

    let again = migate(&["gen-data", "--config", &cfg]);
    assert_eq!(again.status.code(), Some(1));
    assert!(stderr(&again).contains("--force"), "{}", stderr(&again));
    assert!(migate(&["gen-data", "--config", &cfg, "--force"]).status.success());
}

#[test]
fn missing_field_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[synth]\nidentities = 4\n").unwrap();
    let o = migate(&["gen-data", "--config", path.to_str().unwrap(), "--out", dir.path().join("d").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("image_size"), "{}", stderr(&o));

    fs::write(&path, "[train]\nlr = 0.1\nlearning_rate = 2\n").unwrap();
    let o = migate(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(migate(&["train", "--context", "lstm"]).status.code(), Some(1));
    assert_eq!(migate(&["frobnicate"]).status.code(), Some(1));
    assert!(migate(&["--help"]).status.success());
}

#[test]
fn io_errors_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.mick");
    let o = migate(&["eval", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let o = migate(&["train", "--config", dir.path().join("absent.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn train_runs_are_named_and_guarded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 6);
    gen_data(&cfg);
    let runs = dir.path().join("runs");

    let o = migate(&["train", "--config", &cfg, "--context", "irnn2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = stdout(&o);
    for name in ["gate.u", "gate.v", "gate.p"] {
        assert!(summary.contains(name), "parameter summary lacks {name}:\n{summary}");
    }
    let o = migate(&["train", "--config", &cfg, "--context", "spp"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(runs.join("irnn2-seed0/last.mick").is_file());
    assert!(runs.join("spp-seed0/last.mick").is_file());

    let o = migate(&["train", "--config", &cfg, "--context", "irnn2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--force"), "{}", stderr(&o));
    let o = migate(&["train", "--config", &cfg, "--context", "irnn2", "--resume", "--epochs", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = fs::read_to_string(runs.join("irnn2-seed0/metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn same_seed_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 6);
    gen_data(&cfg);
    let run = dir.path().join("runs/irnn2-seed7");
    let files = ["metrics.jsonl", "last.mick", "best.mick"];
    let mut first = Vec::new();
    for attempt in 0..2 {
        let o = migate(&["train", "--config", &cfg, "--seed", "7", "--force"]);
        assert!(o.status.success(), "{}", stderr(&o));
        let now: Vec<Vec<u8>> = files.iter().map(|f| fs::read(run.join(f)).unwrap()).collect();
        if attempt == 0 {
            first = now;
        } else {
            for (f, (x, y)) in files.iter().zip(first.iter().zip(&now)) {
                assert!(x == y, "{f} differs");
            }
        }
    }
}

#[test]
fn eval_writes_cmc_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 6);
    gen_data(&cfg);
    assert!(migate(&["train", "--config", &cfg]).status.success());
    let ck = dir.path().join("runs/irnn2-seed0/best.mick");
    let out = dir.path().join("eval");
    let o = migate(&["eval", "--checkpoint", ck.to_str().unwrap(), "--trials", "1", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(out.join("cmc.txt")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next().unwrap().split_whitespace().collect::<Vec<_>>(), ["rank", "trial1", "mean", "std"]);
    let ranks: Vec<usize> = lines.map(|l| l.split_whitespace().next().unwrap().parse().unwrap()).collect();
    // Two test identities form a gallery of two.
    assert_eq!(ranks, [1, 2]);
    assert!(out.join("scores.mism").is_file() && out.join("metrics.jsonl").is_file());

    let again = migate(&["eval", "--checkpoint", ck.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(again.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_detects_faults() {
    let o = migate(&["gradcheck"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    for m in ["tensor-core", "mi-gate", "spatial-context", "encoder", "matching-head", "end-to-end"] {
        assert!(stdout(&o).contains(m), "{m} missing");
    }
    let o = migate(&["gradcheck", "--inject-fault", "sweep"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("spatial-context"), "{}", stderr(&o));
}
