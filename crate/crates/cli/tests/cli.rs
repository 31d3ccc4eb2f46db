use std::path::Path;
use std::process::{Command, Output};

fn fracmod(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fracmod"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let text = format!(
        r#"
name = "tiny"
dataset_root = "{data}"
output_dir = "{out}"
seed = 5
resolution = {{ rows = 64, cols = 32 }}

[model]
base_width = 4
autoencoder_width = 4
autoencoder_latent = 16

[model.text]
kind = "hashed"
buckets = 256
dim = 16

[train]
epochs = 1
batch_size = 16

[clip]
epochs = 1
batch_size = 16

[autoencoder]
epochs = 1

[probe]
epochs = 1
"#,
        data = dir.join("data").display(),
        out = dir.join("run").display()
    );
    let path = dir.join("exp.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn fixture_grid_stats_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = fracmod(&["fixture", "--out", data.to_str().unwrap(), "--n", "40", "--seed", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();

    let out = fracmod(&["grid", "--config", cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().filter(|l| l.contains("AUROC")).count(), 8);
    let run = dir.path().join("run");
    assert!(run.join("table1.csv").is_file());

    let out = fracmod(&["stats", "--config", cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!std::fs::read_to_string(run.join("stats.txt")).unwrap().is_empty());

    std::fs::remove_file(run.join("table1.csv")).unwrap();
    let out = fracmod(&["report", "--config", cfg]);
    assert!(out.status.success());
    assert!(run.join("table1.csv").is_file());

    let out = fracmod(&["eval", "--config", cfg, "--modalities", "loc"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["macro"]["accuracy"].is_number());
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let out = fracmod(&["grid", "--config", missing.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.toml"));

    let out = fracmod(&["grid", "--box-source", "yolo"]);
    assert!(!out.status.success());

    let out = fracmod(&[
        "grid",
        "--box-source",
        "cached",
        "--dataset-root",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!out.status.success());
}
