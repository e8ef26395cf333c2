use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "batch": 4,
  "critic": {"n_layer": 1, "n_head": 2, "d_head": 4, "d_ff": 16, "q_scale": 10.0},
  "flow_hidden": [16, 16],
  "offline_steps": 20,
  "online_steps": 10,
  "eval_every": 10,
  "eval_episodes": 3,
  "dataset_episodes": 10
}"#;

fn acsac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acsac"))
        .args(args)
        .env("ACSAC_LOG", "quiet")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.json");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_string_lossy().into_owned();
    let o = acsac(&["gen-data", "--out", &out]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--config"));
    assert_eq!(code(&acsac(&["gen-data", "--bogus"])), 2);
    assert_eq!(code(&acsac(&["no-such-command"])), 2);
}

#[test]
fn malformed_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_string_lossy().into_owned();
    for text in ["{not json", r#"{"gamma": 1.5}"#, r#"{"horizn": 3}"#] {
        let cfg = write_config(dir.path(), text);
        let o = acsac(&["gen-data", "--config", &cfg, "--out", &out]);
        assert_eq!(code(&o), 2, "{text}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = acsac(&["gen-data", "--config", &cfg, "--seed", "3", "--out", d.to_str().unwrap()]);
        assert_eq!(code(&o), 0);
    }
    let (da, db) = (fs::read(a.join("dataset.acsd")).unwrap(), fs::read(b.join("dataset.acsd")).unwrap());
    assert_eq!(&da[..4], b"ACSD");
    assert_eq!(da, db);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("gen_data.json")).unwrap()).unwrap();
    assert_eq!(manifest["generator_seed"], 3);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn verify_theory_writes_a_passing_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    let o = acsac(&["verify-theory", "--seed", "7", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("theory_report.json")).unwrap()).unwrap();
    assert_eq!(report["all_passed"], true);
    let checks = report["checks"].as_array().unwrap();
    assert!(!checks.is_empty());
    assert!(checks.iter().all(|c| c["passed"] == true));
}

#[test]
fn full_pipeline_and_hash_guard() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    for cmd in ["gen-data", "train-offline", "train-online", "eval"] {
        let o = acsac(&[cmd, "--config", &cfg, "--out", out_s]);
        assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["checkpoint.acsc", "metrics_offline.jsonl", "metrics_online.jsonl", "eval_logs.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(out.join("metrics_offline.jsonl")).unwrap();
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["config_hash"].is_string());
    }

    let ck = out.join("checkpoint.acsc");
    let o = acsac(&[
        "analyze", "--config", &cfg, "--out", out_s, "--checkpoint", ck.to_str().unwrap(),
        "--variance-batches", "32", "--permutations", "200",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("chunk_distribution.csv")).unwrap();
    assert!(csv.starts_with("timestep,mean_h,count\n"));
    assert!(!csv.contains('\r'));
    let cal = fs::read_to_string(out.join("calibration.csv")).unwrap();
    assert!(cal.starts_with("bin_low,bin_high,mean_G,mean_Q,count\n"));
    let analysis: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("analysis.json")).unwrap()).unwrap();
    assert!(analysis["gradient_variance"]["holds"].as_bool().unwrap());

    let other = dir.path().join("other.json");
    fs::write(&other, TINY.replace("\"batch\": 4", "\"batch\": 5")).unwrap();
    let other = other.to_str().unwrap();
    let o = acsac(&["analyze", "--config", other, "--out", out_s]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));
    let o = acsac(&["analyze", "--config", other, "--out", out_s, "--force", "--permutations", "200"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}
