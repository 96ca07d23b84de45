use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn kvcomp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvcomp"))
        .arg("--artifact-dir")
        .arg(dir)
        .args(args)
        .env_remove("KVCOMP_ARTIFACT_DIR")
        .output()
        .expect("spawn kvcomp")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = kvcomp(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas")
}

fn assert_valid(schema: &str, doc: &Value) {
    let schema = read_json(&schema_dir().join(format!("{schema}.schema.json")));
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    assert!(errors.is_empty(), "{errors:?}");
}

fn random_pipeline(dir: &Path) {
    for args in [
        &["gen-model", "--seed", "5"][..],
        &["gen-tasks", "--seed", "5", "--per-family", "2"],
        &["profile-heads"],
        &["profile-errors"],
        &["allocate", "--profile", "profile.json"],
        &["eval", "--plan", "plan.json"],
        &["evict", "--task", "1", "--plan", "plan.json"],
        &["ablate", "--ks", "0,2,4"],
        &["trace", "--task", "0"],
    ] {
        ok(dir, args);
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(kvcomp(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(kvcomp(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(kvcomp(dir.path(), &["gen-model", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(kvcomp(dir.path(), &["allocate", "--total", "ten"]).status.code(), Some(2));
    let missing = kvcomp(dir.path(), &["profile-heads", "--model", "absent.json"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));
    // Infeasible allocation is a runtime error, not a usage error.
    let infeasible = kvcomp(dir.path(), &["allocate", "--layers", "4", "--total", "10", "--min", "32", "--max", "64"]);
    assert_eq!(infeasible.status.code(), Some(1));
}

#[test]
fn bad_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), r#"{"policy": {"windw": 4}}"#).unwrap();
    let out = kvcomp(dir.path(), &["gen-model", "--config", dir.path().join("cfg.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn outputs_match_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    random_pipeline(d);
    assert_valid("tensor_sidecar", &read_json(&d.join("model.json")));
    assert_valid("tensor_sidecar", &read_json(&d.join("tasks.json")));
    assert_valid("tensor_sidecar", &read_json(&d.join("trace.json")));
    assert_valid("head_table", &read_json(&d.join("heads.json")));
    assert_valid("error_profile", &read_json(&d.join("profile.json")));
    assert_valid("budget_plan", &read_json(&d.join("plan.json")));
    assert_valid("eval_report", &read_json(&d.join("eval.json")));
    assert_valid("decisions", &read_json(&d.join("decisions.json")));
    assert_valid("ablation", &read_json(&d.join("ablation.json")));
}

#[test]
fn config_schema_accepts_defaults_and_rejects_typos() {
    let full = serde_json::to_value(kvcomp_core::harness::RunConfig::default()).unwrap();
    assert_valid("run_config", &full);
    assert_valid("run_config", &serde_json::json!({}));
    let schema = read_json(&schema_dir().join("run_config.schema.json"));
    let v = jsonschema::validator_for(&schema).unwrap();
    assert!(!v.is_valid(&serde_json::json!({"policy": {"windw": 4}})));
    assert!(!v.is_valid(&serde_json::json!({"eval": {"policies": ["h2o"]}})));
}

#[test]
fn pipeline_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    random_pipeline(a.path());
    random_pipeline(b.path());
    for name in ["model.bin", "tasks.bin", "heads.json", "profile.json", "plan.json", "plan.csv", "eval.json", "decisions.json", "ablation.csv", "trace.bin"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert!(x == y, "{name} differs between runs");
    }
}

#[test]
fn reports_are_internally_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    random_pipeline(d);

    let plan = read_json(&d.join("plan.json"));
    let budgets: Vec<u64> = plan["budgets"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert_eq!(budgets.iter().sum::<u64>(), plan["total"].as_u64().unwrap());
    let (lo, hi) = (plan["min"].as_u64().unwrap(), plan["max"].as_u64().unwrap());
    assert!(budgets.iter().all(|b| (lo..=hi).contains(b)));
    let csv = std::fs::read_to_string(d.join("plan.csv")).unwrap();
    assert_eq!(csv.lines().count(), budgets.len() + 1);

    let eval = read_json(&d.join("eval.json"));
    for entry in eval["entries"].as_array().unwrap() {
        let tasks = entry["tasks"].as_array().unwrap();
        let n = tasks.len() as f64;
        let mean = |key: &str| tasks.iter().map(|t| t[key].as_f64().unwrap()).sum::<f64>() / n;
        let retained = tasks.iter().filter(|t| t["needle_retained"].as_bool().unwrap()).count() as f64 / n;
        assert!((entry["retention_rate"].as_f64().unwrap() - retained).abs() < 1e-12);
        assert!((entry["recall_accuracy"].as_f64().unwrap() - mean("recall_accuracy")).abs() < 1e-12);
        assert!((entry["drift"].as_f64().unwrap() - mean("drift")).abs() < 1e-12);
        let layer_budgets = entry["layer_budgets"].as_array().unwrap();
        for t in tasks {
            for (keep, b) in t["decisions"].as_array().unwrap().iter().zip(layer_budgets) {
                assert!(keep.as_array().unwrap().len() as u64 <= b.as_u64().unwrap());
            }
        }
    }

    let profile = read_json(&d.join("profile.json"));
    let s: f64 = profile["normalized"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
    assert!((s - 1.0).abs() < 1e-9);

    let ablation = read_json(&d.join("ablation.json"));
    let baseline = ablation["baseline"].as_f64().unwrap();
    for p in ablation["points"].as_array().unwrap() {
        let expect = baseline - p["recall_accuracy"].as_f64().unwrap();
        assert!((p["degradation"].as_f64().unwrap() - expect).abs() < 1e-12);
        assert_eq!(p["heads"].as_array().unwrap().len() as u64, p["k"].as_u64().unwrap());
    }
}

#[test]
fn planted_pipeline_ranks_semantic_masking_worst() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-model", "--kind", "planted", "--seed", "3"]);
    ok(d, &["gen-tasks", "--seed", "3", "--per-family", "3"]);
    ok(d, &["profile-heads"]);
    ok(d, &["ablate", "--ks", "2,4"]);
    let ablation = read_json(&d.join("ablation.json"));
    let acc = |arm: &str, k: u64| {
        ablation["points"]
            .as_array()
            .unwrap()
            .iter()
            .find(|p| p["arm"] == arm && p["k"] == k)
            .map(|p| p["recall_accuracy"].as_f64().unwrap())
            .unwrap()
    };
    for k in [2, 4] {
        assert!(acc("semantic", k) < acc("copy_paste", k), "k = {k}");
    }
}

#[test]
fn evict_from_trace_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-model"]);
    ok(d, &["gen-tasks", "--per-family", "1"]);
    ok(d, &["trace", "--task", "0"]);
    ok(d, &["evict", "--trace", "trace.json", "--policy", "streaming", "--budget", "40"]);
    let report = read_json(&d.join("decisions.json"));
    assert_valid("decisions", &report);
    for dec in report["decisions"].as_array().unwrap() {
        let keep: Vec<u64> = dec["keep_indices"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
        assert_eq!(keep.len(), 40);
        assert_eq!(&keep[..4], &[0, 1, 2, 3]);
        assert!(keep.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn eval_with_fixed_budget_and_large_allocation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-model"]);
    ok(d, &["gen-tasks", "--per-family", "1"]);
    ok(d, &["profile-heads"]);
    ok(d, &["eval", "--policy", "compresskv", "--budget", "256"]);
    let eval = read_json(&d.join("eval.json"));
    assert_valid("eval_report", &eval);
    assert_eq!(eval["entries"].as_array().unwrap().len(), 1);
    assert_eq!(eval["entries"][0]["retention_rate"].as_f64(), Some(1.0));

    ok(d, &["allocate", "--total", "8192", "--layers", "32"]);
    let plan = read_json(&d.join("plan.json"));
    let budgets = plan["budgets"].as_array().unwrap();
    assert_eq!(budgets.len(), 32);
    assert_eq!(budgets.iter().map(|b| b.as_u64().unwrap()).sum::<u64>(), 8192);
    assert_eq!((plan["min"].as_u64(), plan["max"].as_u64()), (Some(32), Some(768)));
}
