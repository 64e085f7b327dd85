use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[data]
steps = 400

[train]
epochs = 1
windows_per_epoch = 8
batch_size = 4

[impute]
samples = 1

[study]
ablation_seeds = [0]
rates = [0.0]
downstream_seeds = [0]
mlp_epochs = 5
"#;

fn timba(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_timba"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = timba(&["--config", "/definitely/not/here.toml", "scancheck"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn unknown_config_key_lists_valid_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[impute]\nsample = 3\n").unwrap();
    let o = timba(&["--config", cfg.to_str().unwrap(), "scancheck"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("sample") && err.contains("samples"), "{err}");
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(timba(&["frobnicate"], dir.path()).status.code(), Some(1));
}

#[test]
fn scancheck_and_gradcheck_pass() {
    let dir = tempfile::tempdir().unwrap();
    let o = timba(&["scancheck"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let o = timba(&["gradcheck"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("max relative error"));
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gradcheck");
    assert!(manifest["wall_times_s"]["gradcheck"].is_number());
}

#[test]
fn generate_replays_and_feeds_training() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = a.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let c = cfg.to_str().unwrap();
    assert_eq!(timba(&["--config", c, "--seed", "4", "generate"], a.path()).status.code(), Some(0));
    assert_eq!(timba(&["--config", c, "--seed", "4", "generate"], b.path()).status.code(), Some(0));
    for f in ["truth.csv", "data.csv", "adjacency.csv"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    // the generated files load back as a dataset
    let data = a.path().join("data.csv");
    let adj = a.path().join("adjacency.csv");
    let out = a.path().join("run");
    let o = timba(
        &["--config", c, "--data", data.to_str().unwrap(), "--adjacency", adj.to_str().unwrap(), "train"],
        &out,
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("model.ckpt").is_file());
}

#[test]
fn zero_missing_rate_is_a_clean_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let o = timba(&["--config", cfg.to_str().unwrap(), "sensitivity"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no entries"));
}
