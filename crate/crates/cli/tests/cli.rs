use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use phishgraph::RunConfig;

fn phishgraph(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phishgraph"))
        .arg("--dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = phishgraph(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

const SMALL: &str = "epochs = 4\nnum_trees = 15\n";

fn small_pipeline(dir: &Path) {
    fs::write(dir.join("run.toml"), SMALL).unwrap();
    let cfg = dir.join("run.toml");
    let cfg = cfg.to_str().unwrap();
    ok(dir, &["synth", "--seed", "3", "--nodes", "300", "--phishing-fraction", "0.05"]);
    ok(dir, &["--config", cfg, "ingest"]);
    ok(dir, &["--config", cfg, "sample"]);
    ok(dir, &["--config", cfg, "train"]);
}

#[test]
fn synth_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        ok(d, &["synth", "--seed", "7", "--nodes", "2000"]);
    }
    for name in ["transactions.tsv", "labels.tsv", "annotations.json", "run_manifest.json"] {
        assert_eq!(read(a.path(), name), read(b.path(), name), "{name}");
    }
    let other = tempfile::tempdir().unwrap();
    ok(other.path(), &["synth", "--seed", "8", "--nodes", "2000"]);
    assert_ne!(read(a.path(), "transactions.tsv"), read(other.path(), "transactions.tsv"));
}

#[test]
fn synth_writes_jsonl_that_ingest_reads() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["synth", "--nodes", "200", "--phishing-fraction", "0.05", "--format", "jsonl"]);
    let tx = d.path().join("transactions.jsonl");
    ok(d.path(), &["ingest", "--transactions", tx.to_str().unwrap()]);
    let report: serde_json::Value = serde_json::from_slice(&read(d.path(), "clean_report.json")).unwrap();
    assert!(report["report"]["input_records"].as_u64().unwrap() > 0);
}

#[test]
fn evaluate_without_checkpoint_is_a_data_error() {
    let d = tempfile::tempdir().unwrap();
    let out = phishgraph(d.path(), &["evaluate"]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("train"), "{msg}");
}

#[test]
fn usage_errors_exit_with_one() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(phishgraph(d.path(), &["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(phishgraph(d.path(), &["bogus"]).status.code(), Some(1));
    assert_eq!(
        phishgraph(d.path(), &["sample", "--attention-heads", "3"]).status.code(),
        Some(1)
    );
    fs::write(d.path().join("bad.toml"), "epochz = 3\n").unwrap();
    let bad = d.path().join("bad.toml");
    assert_eq!(
        phishgraph(d.path(), &["--config", bad.to_str().unwrap(), "sample"]).status.code(),
        Some(1)
    );
    assert_eq!(phishgraph(d.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn missing_inputs_are_data_errors() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(phishgraph(d.path(), &["ingest"]).status.code(), Some(2));
    assert_eq!(phishgraph(d.path(), &["sample"]).status.code(), Some(2));
    assert_eq!(phishgraph(d.path(), &["train"]).status.code(), Some(2));
}

#[test]
fn flags_override_the_config_file() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("run.toml"), "epochs = 3\nseed = 11\n").unwrap();
    let cfg = d.path().join("run.toml");
    ok(d.path(), &["--config", cfg.to_str().unwrap(), "--epochs", "9", "synth", "--nodes", "100"]);
    let manifest: serde_json::Value = serde_json::from_slice(&read(d.path(), "run_manifest.json")).unwrap();
    let expected = RunConfig {
        epochs: 9,
        seed: 11,
        ..RunConfig::default()
    };
    assert_eq!(manifest["synth"]["fingerprint"], expected.fingerprint());
    assert_eq!(manifest["synth"]["seed"], 11);
}

#[test]
fn train_and_evaluate_are_reproducible() {
    let d = tempfile::tempdir().unwrap();
    small_pipeline(d.path());
    let cfg = d.path().join("run.toml");
    let cfg = cfg.to_str().unwrap();
    ok(d.path(), &["--config", cfg, "evaluate"]);
    let metrics = read(d.path(), "metrics.json");
    let reps = read(d.path(), "representations.tsv");
    let model = read(d.path(), "checkpoint/gbdt.json");

    ok(d.path(), &["--config", cfg, "train"]);
    ok(d.path(), &["--config", cfg, "evaluate"]);
    assert_eq!(read(d.path(), "metrics.json"), metrics);
    assert_eq!(read(d.path(), "representations.tsv"), reps);
    assert_eq!(read(d.path(), "checkpoint/gbdt.json"), model);

    let report: serde_json::Value = serde_json::from_slice(&metrics).unwrap();
    let expected = RunConfig::from_toml(SMALL).unwrap().fingerprint();
    assert_eq!(report["fingerprint"], expected);
    assert_eq!(report["variant"], "full");

    // a different configuration must not silently reuse the checkpoint
    let out = phishgraph(d.path(), &["--config", cfg, "--threshold", "0.7", "evaluate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn predict_scores_every_node() {
    let d = tempfile::tempdir().unwrap();
    small_pipeline(d.path());
    let cfg = d.path().join("run.toml");
    ok(d.path(), &["--config", cfg.to_str().unwrap(), "predict"]);
    let nodes = fs::read_to_string(d.path().join("nodes.txt")).unwrap();
    let preds = fs::read_to_string(d.path().join("predictions.tsv")).unwrap();
    assert_eq!(preds.lines().count(), nodes.lines().count());
    for line in preds.lines() {
        let score: f64 = line.split('\t').nth(1).unwrap().parse().unwrap();
        assert!(score > 0.0 && score < 1.0);
    }
    let ckpt: serde_json::Value =
        serde_json::from_slice(&read(d.path(), "checkpoint/manifest.json")).unwrap();
    assert!(!ckpt["params"].as_array().unwrap().is_empty());
}

#[test]
fn ablate_and_sweep_write_one_report_per_run() {
    let d = tempfile::tempdir().unwrap();
    small_pipeline(d.path());
    let cfg = d.path().join("run.toml");
    let cfg = cfg.to_str().unwrap();
    ok(d.path(), &["--config", cfg, "ablate", "--variants", "full,features-only", "--seeds", "1,2"]);
    let ab: serde_json::Value = serde_json::from_slice(&read(d.path(), "ablation.json")).unwrap();
    assert_eq!(ab["reports"].as_array().unwrap().len(), 4);
    assert_eq!(ab["means"]["features_only"]["runs"], 2);

    ok(d.path(), &["--config", cfg, "sweep", "--param", "attention-size", "--values", "1,5", "--seeds", "4"]);
    let sw: serde_json::Value = serde_json::from_slice(&read(d.path(), "sweep.json")).unwrap();
    let reports = sw.as_array().unwrap();
    assert_eq!(reports.len(), 2);
    assert_eq!(reports[1]["params"]["attention_heads"], 5);
    for r in reports {
        for key in ["variant", "params", "seed", "auc", "precision", "recall", "f1", "counts", "fingerprint"] {
            assert!(r.get(key).is_some(), "{key}");
        }
    }
    let out = phishgraph(d.path(), &["--config", cfg, "sweep", "--param", "attention-size", "--values", "3"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn end_to_end_on_defaults() {
    let d = tempfile::tempdir().unwrap();
    for stage in ["synth", "ingest", "sample", "train", "evaluate"] {
        ok(d.path(), &[stage]);
    }
    let report: serde_json::Value = serde_json::from_slice(&read(d.path(), "metrics.json")).unwrap();
    for key in ["auc", "precision", "recall", "f1"] {
        let v = report[key].as_f64().unwrap_or(f64::NAN);
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
    let reps = fs::read_to_string(d.path().join("representations.tsv")).unwrap();
    let cols = reps.lines().next().unwrap().split('\t').count();
    assert_eq!(cols, 32);
}
