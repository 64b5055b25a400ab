use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hiore::check::{standard_variants, tiny_config};
use hiore::config::{DataConfig, DecodeConfig, RunConfig};
use hiore::corpus::load_corpus;
use hiore::trainer::TrainConfig;

fn hiore(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hiore"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Generates train/dev corpora and a small config next to them.
fn setup(dir: &Path, dev_name: &str) -> PathBuf {
    ok(&hiore(&["gen-synthetic", "--seed", "3", "--count", "8", "--out", p(&dir.join("train.jsonl"))]));
    ok(&hiore(&["gen-synthetic", "--seed", "4", "--count", "4", "--out", p(&dir.join("dev.jsonl"))]));
    let cfg = RunConfig {
        data: DataConfig {
            train: "train.jsonl".into(),
            dev: dev_name.into(),
            test: None,
            symmetric_relation_types: vec![],
            features_dir: None,
        },
        model: tiny_config(&standard_variants()[0]),
        train: TrainConfig {
            max_epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        },
        decode: DecodeConfig::default(),
    };
    let path = dir.join("run.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

#[test]
fn missing_corpus_is_named_by_config_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "nope.jsonl");
    let out = hiore(&["train", "--config", p(&cfg), "--out-dir", p(&dir.path().join("run"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("data.dev") && err.contains("nope.jsonl"), "{err}");
}

#[test]
fn deterministic_training_writes_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "dev.jsonl");
    let mut metrics = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        ok(&hiore(&["--deterministic", "train", "--config", p(&cfg), "--out-dir", p(&out_dir)]));
        for f in ["checkpoint", "metrics.jsonl", "timing.jsonl", "config.toml"] {
            assert!(out_dir.join(f).exists(), "{f}");
        }
        metrics.push(fs::read(out_dir.join("metrics.jsonl")).unwrap());
    }
    assert_eq!(metrics[0], metrics[1]);
    let text = String::from_utf8(metrics[0].clone()).unwrap();
    assert_eq!(text.lines().count(), 3);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("dev_average_f1").is_some());
        assert!(v.get("wall_clock_s").is_none());
    }
    let snapshot = RunConfig::load(&dir.path().join("a/config.toml")).unwrap();
    assert_eq!(snapshot.train.max_epochs, 3);
}

#[test]
fn eval_predict_and_graph_commands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "dev.jsonl");
    let ck = dir.path().join("init");
    ok(&hiore(&["init", "--config", p(&cfg), "--out", p(&ck)]));
    let dev = dir.path().join("dev.jsonl");

    let text = ok(&hiore(&["eval", "--checkpoint", p(&ck), "--corpus", p(&dev), "--strata"]));
    for key in ["entity", "relation", "IE (entity)", "MR (relation)", "LDR (relation)"] {
        assert!(text.contains(key), "{key} missing from\n{text}");
    }
    let json = ok(&hiore(&["eval", "--checkpoint", p(&ck), "--corpus", p(&dev), "--json"]));
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["sentences"], 4);

    let pred = dir.path().join("pred.jsonl");
    let pred2 = dir.path().join("pred2.jsonl");
    ok(&hiore(&["predict", "--checkpoint", p(&ck), "--corpus", p(&dev), "--out", p(&pred)]));
    ok(&hiore(&["predict", "--checkpoint", p(&ck), "--corpus", p(&dev), "--out", p(&pred2)]));
    assert_eq!(fs::read(&pred).unwrap(), fs::read(&pred2).unwrap());
    let back = load_corpus(&pred).unwrap();
    let gold = load_corpus(&dev).unwrap();
    assert_eq!(back.len(), gold.len());
    for (b, g) in back.iter().zip(&gold) {
        assert_eq!((&b.id, &b.tokens), (&g.id, &g.tokens));
    }
    let first: serde_json::Value = serde_json::from_str(fs::read_to_string(&pred).unwrap().lines().next().unwrap()).unwrap();
    assert!(first["entity_scores"].is_array() && first["relation_scores"].is_array());

    let graph = ok(&hiore(&["inspect-graph", "--n", "3"]));
    assert!(graph.contains("edges=15"), "{graph}");
    let id = gold[0].id.clone();
    let graph = ok(&hiore(&["inspect-graph", "--checkpoint", p(&ck), "--corpus", p(&dev), "--sentence", &id]));
    let n = gold[0].n();
    assert!(graph.contains(&format!("edges={}", 5 * n * (n - 1) / 2)), "{graph}");

    let cal = ok(&hiore(&["calibrate-threshold", "--checkpoint", p(&ck), "--corpus", p(&dev)]));
    assert!(cal.contains("best threshold"));
}

#[test]
fn empty_corpus_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "dev.jsonl");
    let ck = dir.path().join("init");
    ok(&hiore(&["init", "--config", p(&cfg), "--out", p(&ck)]));
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let out = hiore(&["eval", "--checkpoint", p(&ck), "--corpus", p(&empty)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
    fs::write(&empty, "{not json\n").unwrap();
    let out = hiore(&["eval", "--checkpoint", p(&ck), "--corpus", p(&empty)]);
    assert!(!out.status.success());
}

#[test]
fn gradcheck_exit_code_follows_tolerance() {
    let out = hiore(&["gradcheck", "--size", "3"]);
    let text = ok(&out);
    assert!(text.contains("static") && text.contains("dynamic"), "{text}");
    let out = hiore(&["gradcheck", "--size", "3", "--tolerance", "0"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("gradient check failed"));
}
