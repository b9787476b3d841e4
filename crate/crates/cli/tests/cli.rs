//! End-to-end runs of the `pcb` binary on a tiny spec.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SPEC: &str = r#"
[dataset.synth]
num_classes = 4
max_count = 40
imbalance_ratio = 10.0
feature_dim = 3
sigma = 0.15
val_per_class = 8

[head]
backbone_hidden = 8
feature_dim = 6
proj_hidden = 6
steps = 2

[loss]
variant = "pcb_ce"
alpha = 0.4

[train]
epochs = 4
batch_size = 16
lr = 0.05
decay_epochs = [3]
pcb_start_epoch = 1
seed = 5
"#;

fn pcb(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcb"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("spec.toml"), SPEC).unwrap();
    dir
}

fn hash_of(dir: &Path) -> String {
    let snap: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("out/dataset.json")).unwrap()).unwrap();
    snap["config_hash"].as_str().unwrap().to_string()
}

#[test]
fn full_pipeline_writes_stamped_outputs() {
    let dir = setup();
    let d = dir.path();
    ok(pcb(d, &["--spec", "spec.toml", "synth"]));
    ok(pcb(d, &["--spec", "spec.toml", "train"]));
    ok(pcb(d, &["--spec", "spec.toml", "eval", "--checkpoint", "out/checkpoint.json"]));
    let table = ok(pcb(d, &["--spec", "spec.toml", "calibrate", "--checkpoint", "out/checkpoint.json"]));
    assert_eq!(table.lines().count(), 6);
    ok(pcb(d, &["--spec", "spec.toml", "report"]));

    let hash = hash_of(d);
    assert_eq!(hash.len(), 16);
    let out = d.join("out");
    for name in [
        "dataset.json",
        "train.csv",
        "val.csv",
        "checkpoint.json",
        "train_log.csv",
        "report.json",
        "ema_cm.json",
        "eval_report.json",
        "per_step.csv",
        "calibration.csv",
        "val_cm.svg",
        "summary.md",
        "report_cm.svg",
    ] {
        let text = fs::read_to_string(out.join(name)).unwrap();
        assert!(text.contains(&hash), "{name} lacks the config hash");
    }
    let steps = fs::read_to_string(out.join("per_step.csv")).unwrap();
    assert_eq!(steps.lines().count(), 3);
    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);
    assert!(fs::read_to_string(out.join("val_cm.svg")).unwrap().starts_with("<!-- config_hash="));
}

#[test]
fn exported_tables_reingest() {
    let dir = setup();
    let d = dir.path();
    ok(pcb(d, &["--spec", "spec.toml", "synth"]));
    let spec = "[dataset.tabular]\npath = \"out/train.csv\"\nnum_classes = 4\nval_fraction = 0.2\n\n[head]\nbackbone_hidden = 8\nfeature_dim = 6\nproj_hidden = 6\nsteps = 1\n\n[train]\nepochs = 2\ndecay_epochs = []\n\n[output]\ndir = \"tab\"\n";
    fs::write(d.join("tab.toml"), spec).unwrap();
    ok(pcb(d, &["--spec", "tab.toml", "train"]));
    assert!(d.join("tab/report.json").exists());
}

#[test]
fn runs_are_byte_identical() {
    let a = setup();
    let b = setup();
    for d in [a.path(), b.path()] {
        ok(pcb(d, &["--spec", "spec.toml", "train"]));
    }
    for name in ["train_log.csv", "report.json", "checkpoint.json", "ema_cm.json"] {
        assert_eq!(
            fs::read(a.path().join("out").join(name)).unwrap(),
            fs::read(b.path().join("out").join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn global_flags_override_the_spec() {
    let dir = setup();
    let d = dir.path();
    ok(pcb(d, &["--spec", "spec.toml", "synth"]));
    let base = hash_of(d);
    ok(pcb(d, &["synth", "--spec", "spec.toml", "--seed", "11", "--out", "other", "--precision", "32"]));
    let snap: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("other/dataset.json")).unwrap()).unwrap();
    assert_eq!(snap["seed"], 11);
    assert_ne!(snap["config_hash"].as_str().unwrap(), base);
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = setup();
    let d = dir.path();
    ok(pcb(d, &["--spec", "spec.toml", "sweep", "--param", "loss.alpha", "--values", "0.0,0.4,0.8"]));
    let mut r = csv::Reader::from_path(d.join("out/sweep.csv")).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(str::to_string).collect();
    assert_eq!(&header[..6], ["loss.alpha", "acc", "acc_r", "acc_c", "acc_f", "pwb"]);
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    assert_ne!(rows[0][6], rows[1][6], "each value hashes differently");
}

#[test]
fn invalid_spec_names_the_field() {
    let dir = setup();
    let d = dir.path();
    fs::write(d.join("bad.toml"), SPEC.replace("lr = 0.05", "learning_rate = 0.05")).unwrap();
    let out = pcb(d, &["--spec", "bad.toml", "train"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train") && err.contains("learning_rate"), "{err}");

    fs::write(d.join("bad2.toml"), SPEC.replace("alpha = 0.4", "alpha = 2.0")).unwrap();
    let out = pcb(d, &["--spec", "bad2.toml", "train"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha"));

    let out = pcb(d, &["--spec", "missing.toml", "synth"]);
    assert!(!out.status.success());
    let out = pcb(d, &["synth"]);
    assert!(!out.status.success());
}

#[test]
fn missing_checkpoint_fails() {
    let dir = setup();
    let out = pcb(dir.path(), &["--spec", "spec.toml", "eval", "--checkpoint", "nope.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));
    let out = pcb(dir.path(), &["--spec", "spec.toml", "report"]);
    assert!(!out.status.success());
}
