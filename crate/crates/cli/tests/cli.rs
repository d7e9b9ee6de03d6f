use std::path::Path;
use std::process::{Command, Output};

fn cir(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cir"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cir(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: &[&str] = &["--hidden-dim", "16", "--embed-dim", "8", "--qk-dim", "4", "--batch-size", "16"];

/// A small store plus an exclude-both split in a fresh directory.
fn workspace() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["generate", "--samples-per-cell", "8", "--video-dim", "6", "--text-dim", "4", "--out", "store"]);
    ok(tmp.path(), &["split", "--data", "store", "--out", "split.json"]);
    tmp
}

fn train(dir: &Path, out: &str, extra: &[&str]) -> String {
    let mut args = vec!["train", "--data", "store", "--split", "split.json", "--out", out];
    args.extend_from_slice(SMALL);
    if !extra.contains(&"--epochs") {
        args.extend_from_slice(&["--epochs", "2"]);
    }
    args.extend_from_slice(extra);
    ok(dir, &args)
}

#[test]
fn generate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        ok(tmp.path(), &["generate", "--samples-per-cell", "4", "--seed", "9", "--out", out]);
    }
    for f in std::fs::read_dir(tmp.path().join("a")).unwrap() {
        let name = f.unwrap().file_name();
        let a = std::fs::read(tmp.path().join("a").join(&name)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(&name)).unwrap();
        assert_eq!(a, b, "{name:?}");
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = workspace();
    let d = tmp.path();
    assert_eq!(cir(d, &["generate", "--video-dim", "0", "--out", "x"]).status.code(), Some(2));
    assert_eq!(cir(d, &["generate", "--classes", "1", "--out", "x"]).status.code(), Some(2));
    assert_eq!(cir(d, &["split", "--data", "store", "--mode", "sideways", "--out", "s.json"]).status.code(), Some(2));
    let bad = ["train", "--data", "store", "--split", "split.json", "--method", "bogus", "--out", "r"];
    assert_eq!(cir(d, &bad).status.code(), Some(2));
    assert_eq!(cir(d, &["train", "--out", "r"]).status.code(), Some(2));
    assert_eq!(cir(d, &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn missing_store_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cir(tmp.path(), &["split", "--data", "nowhere", "--out", "s.json"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn erm_matches_cir_with_zero_lambdas_at_equal_lr() {
    let tmp = workspace();
    let d = tmp.path();
    train(d, "erm", &["--method", "erm", "--lr", "1e-3"]);
    train(d, "cir", &["--method", "cir", "--lr", "1e-3", "--lambda1", "0", "--lambda2", "0"]);
    let a = std::fs::read(d.join("erm/checkpoint_final.cir")).unwrap();
    let b = std::fs::read(d.join("cir/checkpoint_final.cir")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn empty_sweep_is_a_usage_error() {
    let tmp = workspace();
    let out = cir(tmp.path(), &["sweep", "--param", "lambda1", "--values", "", "--data", "store", "--split", "split.json", "--out", "sw"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("sw").exists());
}

#[test]
fn batch_size_sweep_writes_one_row_per_value() {
    let tmp = workspace();
    let d = tmp.path();
    let mut args = vec!["sweep", "--param", "batch_size", "--values", "8,16", "--data", "store", "--split", "split.json", "--out", "sw", "--jobs", "2"];
    args.extend_from_slice(&SMALL[..6]);
    args.extend_from_slice(&["--epochs", "1"]);
    ok(d, &args);
    let csv = std::fs::read_to_string(d.join("sw/summary.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "param,value,split,method,seed,top1");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("batch_size,8,sc0-lo0-exclude_both,cir,0,"));
    assert!(rows[2].starts_with("batch_size,16,"));
    for v in ["8", "16"] {
        let cfg = std::fs::read_to_string(d.join(format!("sw/batch_size-{v}/config.json"))).unwrap();
        assert!(cfg.contains(&format!("\"batch_size\": {v}")));
    }
}

#[test]
fn config_json_replays_a_run() {
    let tmp = workspace();
    let d = tmp.path();
    let first = train(d, "one", &["--method", "mixup", "--seed", "4"]);
    let second = ok(d, &["train", "--config", "one/config.json", "--out", "two"]);
    assert_eq!(first, second);
    let a = std::fs::read(d.join("one/checkpoint_final.cir")).unwrap();
    let b = std::fs::read(d.join("two/checkpoint_final.cir")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn eval_reproduces_the_reported_accuracy() {
    let tmp = workspace();
    let d = tmp.path();
    let line = train(d, "run", &[]);
    let reported: f64 = line.trim().rsplit(',').next().unwrap().parse().unwrap();
    let json = ok(d, &["eval", "--checkpoint", "run/checkpoint_best.cir", "--data", "store", "--split", "split.json"]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["top1"].as_f64().unwrap(), reported);
    assert_eq!(v["method"], "cir");
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["gradcheck"]);
}

#[test]
fn resume_appends_to_a_run() {
    let tmp = workspace();
    let d = tmp.path();
    train(d, "full", &["--epochs", "3"]);
    train(d, "part", &["--epochs", "1"]);
    ok(d, &["train", "--config", "part/config.json", "--epochs", "3", "--resume", "part/checkpoint_final.cir", "--out", "part"]);
    let a = std::fs::read(d.join("full/checkpoint_final.cir")).unwrap();
    let b = std::fs::read(d.join("part/checkpoint_final.cir")).unwrap();
    assert_eq!(a, b);
    for log in ["metrics.csv", "val.csv"] {
        let full = std::fs::read_to_string(d.join("full").join(log)).unwrap();
        let part = std::fs::read_to_string(d.join("part").join(log)).unwrap();
        assert_eq!(full, part, "{log}");
    }
}
