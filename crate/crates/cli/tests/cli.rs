// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "model": { "n_layers": 2, "d_model": 16, "n_heads": 2, "max_seq": 256, "d_mlp": 32, "seed": 0 },
  "corpus": { "n_templates": 12, "n_train_docs": 24 },
  "train": {
    "steps": 4, "learning_rate": 0.001, "batch_size": 4, "seed": 0,
    "optimizer": { "kind": "adam", "beta1": 0.9, "beta2": 0.98, "eps": 1e-8 },
    "warmup_steps": 1
  },
  "variations": ["original", "time_spec"],
  "pca": { "k_list": [2, 100] },
  "caa": { "alphas": [1.0], "layers": [1] },
  "iti": { "alphas": [0.0, 10.0], "k": 2 }
}"#;

fn tomlens(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tomlens"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn missing_prerequisite_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = tomlens(dir.path(), &["probe", "--out", "run"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cache"));
}

#[test]
fn bad_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), r#"{ "modle": {} }"#).unwrap();
    let o = tomlens(dir.path(), &["gen-corpus", "--config", "c.json"]);
    assert_eq!(code(&o), 2);
    let o = tomlens(dir.path(), &["gen-corpus", "--config", "absent.json"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn full_run_resumes_and_guards_config_changes() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    let args = ["run", "--config", "tiny.json", "--out", "out"];
    let o = tomlens(dir.path(), &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    for rel in ["manifest.json", "report/results.json", "report/table.txt", "model/weights.bin"] {
        assert!(out.join(rel).exists(), "{rel} missing");
    }
    let report = std::fs::read(out.join("report/results.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_slice(&report).unwrap();
    assert!(parsed.is_object());

    // Second run: every stage is current.
    let o = tomlens(dir.path(), &args);
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.matches("up to date").count(), 9, "{stdout}");

    // Changing a stage's config is refused until --force.
    let o = tomlens(dir.path(), &["probe", "--config", "tiny.json", "--out", "out", "--perspective", "oracle"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let o = tomlens(
        dir.path(),
        &["probe", "--config", "tiny.json", "--out", "out", "--perspective", "oracle", "--force"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}
