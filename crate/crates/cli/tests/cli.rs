use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_matchdiff");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).env("MATCHDIFF_THREADS", "2").args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn small_model(dir: &Path, pairs: &str) {
    ok(dir, &["synth", "--out", "data", "--pairs", pairs, "--seed", "11", "--points", "48"]);
    fs::write(dir.join("cfg.json"), r#"{"train":{"epochs":1,"max_steps":2},"seed":5}"#).unwrap();
    ok(dir, &["train", "--data", "data", "--config", "cfg.json", "--out", "run"]);
}

#[test]
fn round_trip_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_model(d, "20");
    for (pred, metrics) in [("p1", "m1.json"), ("p2", "m2.json")] {
        ok(d, &["sample", "--data", "data", "--ckpt", "run/model.ckpt", "--steps", "2", "--seed", "4", "--out", pred]);
        ok(d, &["eval", "--pred", pred, "--data", "data", "--out", metrics]);
    }
    let a = fs::read(d.join("m1.json")).unwrap();
    assert_eq!(a, fs::read(d.join("m2.json")).unwrap());
    assert_eq!(fs::read(d.join("m1.csv")).unwrap(), fs::read(d.join("m2.csv")).unwrap());
    let v: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(v["per_pair"].as_array().unwrap().len(), 20);
    for f in ["transforms.json", "pair_0019_corr.csv", "pair_0000_warped.ply", "run_manifest.json"] {
        assert!(d.join("p1").join(f).exists(), "{f}");
    }
    for f in ["model.ckpt", "model.json", "loss.csv", "run_manifest.json"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
}

#[test]
fn ablate_writes_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_model(d, "3");
    ok(d, &["ablate", "--data", "data", "--ckpt", "run/model.ckpt", "--sweep", "steps=1,2,3,10,20,50", "--out", "ab"]);
    let csv = fs::read_to_string(d.join("ab/ablate.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    assert!(rows[0].starts_with("steps,1,3,"));
    assert!(d.join("ab/ablate.json").exists());
}

#[test]
fn errors_use_prefix_and_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();

    let out = run(d, &["nonsense"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("ERROR:usage:"));

    let out = run(d, &["sample", "--data", "missing", "--ckpt", "missing.ckpt", "--out", "o"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("ERROR:checkpoint:"));

    fs::write(d.join("bad.json"), r#"{"train":{"lr":1}}"#).unwrap();
    ok(d, &["synth", "--out", "data", "--pairs", "1", "--points", "32"]);
    let out = run(d, &["train", "--data", "data", "--config", "bad.json", "--out", "r"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("ERROR:config:") && err.contains("train.lr"), "{err}");

    let out = run(d, &["synth", "--out", "data", "--pairs", "1"]);
    assert_eq!(out.status.code(), Some(2));
    ok(d, &["synth", "--out", "data", "--pairs", "1", "--points", "32", "--force"]);
}

#[test]
fn eval_rejects_pair_count_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    small_model(d, "2");
    ok(d, &["sample", "--data", "data", "--ckpt", "run/model.ckpt", "--steps", "1", "--out", "pred"]);
    ok(d, &["synth", "--out", "other", "--pairs", "3", "--points", "48"]);
    let out = run(d, &["eval", "--pred", "pred", "--data", "other", "--out", "m.json"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("ERROR:schema:"));
}
