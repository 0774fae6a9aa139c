use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use prunekit::fixtures::{self, FixtureSize};
use prunekit::runtime::{init_weights, save_weights};
use prunekit::serialize_model;
use serde_json::{json, Value};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prunekit")).args(args).output().unwrap()
}

fn read_json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(config: Value) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut config = config;
        config["output_dir"] = json!(dir.path().join("out"));
        std::fs::write(dir.path().join("run.json"), config.to_string()).unwrap();
        Workspace { dir }
    }

    fn config(&self) -> String {
        self.dir.path().join("run.json").display().to_string()
    }

    fn out(&self, file: &str) -> PathBuf {
        self.dir.path().join("out").join(file)
    }

    fn file(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn cmd(&self, cmd: &str, extra: &[&str]) -> Output {
        let cfg = self.config();
        let mut args = vec![cmd, "--config", cfg.as_str()];
        args.extend_from_slice(extra);
        run(&args)
    }
}

fn small_synthetic() -> Value {
    json!({
        "model": {"fixture": "tiny-alexnet", "resolution": 8, "width": 4},
        "dataset": {"format": "synthetic", "synthetic": {
            "num_classes": 6, "train_per_class": 10, "test_per_class": 4, "resolution": 8, "seed": 2}},
        "subset": "0,1,2",
        "train": {"epochs": 1, "batch_size": 16},
        "search": {"p_l": 50.0, "p_u": 90.0, "p_i": 20.0, "p_0": 50.0, "n_f": 0, "n_r": 1},
        "sweep": {"modes": ["unpruned", "subset-aware"], "latency_batch": 1, "latency_reps": 10},
        "seed": 1
    })
}

#[test]
fn fixture_command_writes_bundled_document() {
    let out = run(&["fixture", "tiny-resnet"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), fixtures::bundled_document("tiny-resnet").unwrap());
    let bad = run(&["fixture", "tiny-vgg"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn prune_level_zero_is_identity() {
    let g = fixtures::by_name("tiny-mobilenetv2", FixtureSize::default()).unwrap();
    let ws = Workspace::new(json!({}));
    let model = ws.file("model.json");
    std::fs::write(&model, serialize_model(&g)).unwrap();
    let cfg = json!({"model_path": model, "output_dir": ws.out("")});
    std::fs::write(ws.file("run.json"), cfg.to_string()).unwrap();
    let out = ws.cmd("prune", &["--level", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(ws.out("pruned_model.json")).unwrap(), serialize_model(&g));
    let plan = read_json(ws.out("plan.json"));
    assert_eq!(plan["plan"]["achieved_level"], json!(0.0));
    assert!(plan["lineage"]["inputs"]["model"].is_string());
}

#[test]
fn oracle_search_matches_sweep_maximum() {
    let ws = Workspace::new(json!({}));
    for t in ["0", "4.9", "5", "37.5", "50", "72", "95", "100"] {
        let out = ws.cmd("search", &["--oracle-threshold", t]);
        assert!(out.status.success());
        let doc = read_json(ws.out("search.json"));
        let r = &doc["result"];
        assert_eq!(r["converged_level"], r["oracle"]["sweep_maximum"], "threshold {t}");
        assert!(r["trace"].as_array().unwrap().len() <= 6);
    }
}

#[test]
fn errors_produce_documents_and_exit_codes() {
    // unknown config field: validation error
    let ws = Workspace::new(json!({"bogus": 1}));
    let out = ws.cmd("analyze", &[]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "ConfigError");
    assert_eq!(err["error"]["stage"], "analyze");
    assert!(err["error"]["input_digests"]["config"].is_string());

    // infeasible level
    let g = fixtures::by_name("tiny-alexnet", FixtureSize::default()).unwrap();
    let ws = Workspace::new(json!({}));
    let model = ws.file("model.json");
    let weights = ws.file("weights.bin");
    std::fs::write(&model, serialize_model(&g)).unwrap();
    save_weights(&weights, &init_weights(&g, 0)).unwrap();
    let cfg = json!({"model_path": model, "weights_path": weights, "output_dir": ws.out("")});
    std::fs::write(ws.file("run.json"), cfg.to_string()).unwrap();
    let out = ws.cmd("prune", &["--level", "99.9"]);
    assert_eq!(out.status.code(), Some(4));
    let doc = read_json(ws.out("error.json"));
    assert_eq!(doc["error"]["kind"], "InfeasibleTarget");
    assert!(doc["error"]["input_digests"]["weights"].is_string());

    // divergent training
    let mut cfg = small_synthetic();
    cfg["train"] = json!({"epochs": 1, "batch_size": 16, "lr_schedule": {"initial": 1e30}});
    let ws = Workspace::new(cfg);
    let out = ws.cmd("train", &[]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_json(ws.out("error.json"))["error"]["kind"], "NonFinite");
}

#[test]
fn pipeline_artifacts_and_lineage() {
    let ws = Workspace::new(small_synthetic());
    for (cmd, extra) in [
        ("ingest", vec![]),
        ("train", vec![]),
        ("analyze", vec!["--residual-policy", "skip-final"]),
        ("prune", vec!["--level", "40", "--scope", "per-layer"]),
        ("bench", vec!["--reps", "10"]),
        ("sweep", vec![]),
        ("report", vec!["--buckets", "3"]),
    ] {
        let out = ws.cmd(cmd, &extra);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let ingest = read_json(ws.out("ingest.json"));
    assert_eq!(ingest["summary"]["records"], 60);
    let train = read_json(ws.out("train.json"));
    assert_eq!(train["lineage"]["inputs"]["dataset"], ingest["summary"]["digest"]);
    let plan = read_json(ws.out("plan.json"));
    assert_eq!(plan["plan"]["ranking_scope"], "per_layer");
    let report = read_json(ws.out("report.json"));
    assert!(!report["report"]["points"].as_array().unwrap().is_empty());

    // plans from two seeds diverge by a well-defined amount
    let copy = ws.file("plan_a.json");
    std::fs::copy(ws.out("plan.json"), &copy).unwrap();
    let out = ws.cmd("divergence", &["--plan", copy.to_str().unwrap(), "--plan", copy.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(read_json(ws.out("divergence.json"))["divergence"]["overall"], json!(0.0));

    // a tampered CSV no longer matches its lineage
    let csv = ws.out("sweep.csv");
    let text = std::fs::read_to_string(&csv).unwrap();
    std::fs::write(&csv, text.replacen("unpruned", "subset-agnostic", 1)).unwrap();
    let out = ws.cmd("report", &[]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(read_json(ws.out("error.json"))["error"]["kind"], "LineageError");
}

#[test]
fn changed_dataset_is_refused_after_ingest() {
    let ws = Workspace::new(small_synthetic());
    assert!(ws.cmd("ingest", &[]).status.success());
    let mut cfg = small_synthetic();
    cfg["dataset"]["synthetic"]["seed"] = json!(3);
    cfg["output_dir"] = json!(ws.out(""));
    std::fs::write(ws.file("run.json"), cfg.to_string()).unwrap();
    let out = ws.cmd("train", &[]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(read_json(ws.out("error.json"))["error"]["kind"], "LineageError");
}
