use std::path::Path;
use std::process::Command;

use clearcf_core::clear::Variant;
use clearcf_harness::pipeline::{self, Layout, Method};
use clearcf_harness::{ExperimentConfig, HarnessError};
use serde_json::json;

fn small_config(out: &Path, n_graphs: usize) -> ExperimentConfig {
    ExperimentConfig::from_json(
        &json!({
            "dataset": {"kind": "community", "community": {"n_graphs": n_graphs, "seed": 4}},
            "classifier": {"epochs": 4},
            "clear": {"epochs": 3, "eval_every": 2},
            "seeds": [1],
            "out": out,
        }),
        None,
    )
    .unwrap()
}

fn lines(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn desk_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 200);
    let ds = pipeline::cmd_gen_data(&cfg).unwrap();
    // header line plus one line per graph
    assert_eq!(lines(&cfg.dataset_path()), 201);
    assert!(dir.path().join("config.json").exists());

    pipeline::cmd_train_clf(&cfg).unwrap();
    pipeline::cmd_train_cfe(&cfg, Variant::Clear).unwrap();
    let layout = Layout(&cfg);
    let test_len = ds.test().len();
    for m in [Method::Clear(Variant::Clear), Method::parse("random").unwrap()] {
        pipeline::cmd_explain(&cfg, m).unwrap();
        assert_eq!(lines(&layout.counterfactuals(m)), 3 * test_len);
    }
    let rows = pipeline::cmd_evaluate(&cfg, &[]).unwrap();
    assert_eq!(rows.iter().map(|r| r.method.as_str()).collect::<Vec<_>>(), ["clear", "random"]);
    for r in &rows {
        assert!((0.0..=1.0).contains(&r.validity) && (0.0..=1.0).contains(&r.causality));
        assert!((0.0..=1.0).contains(&r.proximity_a) && (-1.0..=1.0).contains(&r.proximity_x));
    }
    let first = std::fs::read(layout.results("results.csv")).unwrap();
    pipeline::cmd_evaluate(&cfg, &[]).unwrap();
    assert_eq!(std::fs::read(layout.results("results.csv")).unwrap(), first);

    let scatter = pipeline::cmd_scatter(&cfg).unwrap();
    assert_eq!(scatter.iter().filter(|r| r.source == "original").count(), test_len);
    assert_eq!(scatter.iter().filter(|r| r.source == "clear").count(), 3 * test_len);
}

#[test]
fn same_seed_gives_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ca, cb) = (small_config(a.path(), 100), small_config(b.path(), 100));
    pipeline::cmd_gen_data(&ca).unwrap();
    pipeline::cmd_gen_data(&cb).unwrap();
    assert_eq!(lines(&ca.dataset_path()), 101);
    assert_eq!(std::fs::read(ca.dataset_path()).unwrap(), std::fs::read(cb.dataset_path()).unwrap());
}

#[test]
fn missing_stages_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 40);
    let err = pipeline::cmd_train_clf(&cfg).unwrap_err();
    assert!(matches!(err, HarnessError::MissingStage { stage: "gen-data", .. }), "{err}");
    pipeline::cmd_gen_data(&cfg).unwrap();
    let err = pipeline::cmd_explain(&cfg, Method::parse("eg-rm").unwrap()).unwrap_err();
    assert!(err.to_string().contains("train-clf"), "{err}");
    pipeline::cmd_train_clf(&cfg).unwrap();
    let err = pipeline::cmd_explain(&cfg, Method::parse("clear-vae").unwrap()).unwrap_err();
    assert!(err.to_string().contains("train-cfe"), "{err}");
    assert!(matches!(pipeline::cmd_evaluate(&cfg, &[]), Err(HarnessError::MissingStage { .. })));
}

#[test]
fn ablation_and_sweep_cardinality() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path(), 40);
    cfg.clear.epochs = 1;
    cfg.seeds = vec![1, 2];
    pipeline::cmd_gen_data(&cfg).unwrap();
    pipeline::cmd_train_clf(&cfg).unwrap();
    let rows = pipeline::cmd_ablate(&cfg).unwrap();
    assert_eq!(rows.len(), 12);
    assert_eq!(rows.iter().filter(|r| r.seed == 2).count(), 6);

    let sweep = pipeline::cmd_sweep(&cfg).unwrap();
    assert_eq!(sweep.iter().filter(|r| r.grid == "alpha-beta").count(), 25);
    assert_eq!(sweep.len(), 25 + 4 + 4);
    assert!(sweep.iter().all(|r| r.validity.is_finite() && r.proximity_x.is_finite()));
    assert_eq!(lines(&Layout(&cfg).results("sweep.csv")), 34);
}

#[test]
fn worker_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 60);
    pipeline::cmd_gen_data(&cfg).unwrap();
    pipeline::cmd_train_clf(&cfg).unwrap();
    let m = Method::parse("eg-ist").unwrap();
    let one = pipeline::cmd_explain(&cfg, m).unwrap();
    let four = pipeline::cmd_explain(&ExperimentConfig { workers: 4, ..cfg.clone() }, m).unwrap();
    assert_eq!(one, four);
}

#[test]
fn cli_flags_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("exp.json");
    std::fs::write(&manifest, json!({"dataset": {"kind": "community", "community": {"n_graphs": 30}}}).to_string())
        .unwrap();
    let bin = env!("CARGO_BIN_EXE_clearcf");
    let out = dir.path().join("run");
    let status = Command::new(bin)
        .args(["gen-data", "--config"])
        .arg(&manifest)
        .args(["--seed", "7", "--out"])
        .arg(&out)
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["seed"], 7);
    assert_eq!(resolved["dataset"]["community"]["n_graphs"], 30);
    assert_eq!(lines(&out.join("data").join("community.jsonl")), 31);

    let missing = Command::new(bin).args(["explain", "--method", "clear", "--out"]).arg(&out).output().unwrap();
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("train-clf"));

    std::fs::write(&manifest, json!({"dataset": {"kind": "community", "comunity": {}}}).to_string()).unwrap();
    let typo = Command::new(bin).args(["gen-data", "--config"]).arg(&manifest).output().unwrap();
    assert!(!typo.status.success());
}
