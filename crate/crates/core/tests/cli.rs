use std::path::Path;
use std::process::{Command, Output};

use hqm_core::harness::{RunConfig, METRICS_HEADER};

fn hqm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hqm")).args(args).output().unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let mut cfg = RunConfig::tiny();
    cfg.optim.epochs = 2;
    let path = dir.join("tiny.json");
    std::fs::write(&path, cfg.to_json().unwrap()).unwrap();
    path.to_str().unwrap().to_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn train_eval_and_dump_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();

    let data = dir.path().join("data");
    let o = hqm(&["gen-data", "--config", &cfg, "--out", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("train.json").exists() && data.join("val.json").exists());

    let o = hqm(&[
        "train",
        "--config",
        &cfg,
        "--out",
        out_s,
        "--strategy",
        "ajl",
        "--train-data",
        data.join("train.json").to_str().unwrap(),
        "--val-data",
        data.join("val.json").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER.join(","));
    assert_eq!(lines.len(), 3);

    let ckpt = out.join("checkpoint.json");
    let o = hqm(&[
        "eval",
        "--config",
        &cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.join("val.json").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let map = report["map"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));

    let attn = dir.path().join("attn");
    let o = hqm(&[
        "dump-attn",
        "--config",
        &cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--scene",
        "1",
        "--out",
        attn.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(attn.join("attn_layer1_head1.csv").exists());
}

#[test]
fn same_seed_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = hqm(&["train", "--config", &cfg, "--seed", "5", "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        csvs.push(std::fs::read(out.join("metrics.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn ablate_writes_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("abl");
    let o = hqm(&[
        "ablate",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--strategies",
        "baseline,amm_only+no_topk",
        "--seeds",
        "0,1",
        "--epochs",
        "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 4 + 2);
    assert!(table.contains("amm_only+no_topk,median"));
}

#[test]
fn grad_check_defaults_to_the_tiny_model() {
    let o = hqm(&["grad-check", "--strategies", "baseline,pjl"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("pjl"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"model": {"dim": 30}}"#).unwrap();
    let o = hqm(&["train", "--config", bad.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("x").exists());

    let o = hqm(&["train", "--strategy", "sideways"]);
    assert_eq!(o.status.code(), Some(2));

    let o = hqm(&["eval", "--checkpoint", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    let o = hqm(&["no-such-command"]);
    assert_eq!(o.status.code(), Some(2));
}
