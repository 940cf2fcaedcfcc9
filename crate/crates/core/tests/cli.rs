use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};

const TINY: &str = "\
image_size = 8
depth_size = 2
base_width = 2
head_hidden = 3
depth_width = 2
per_domain = 12
generator_domains = 3
n_domains = 2
per_domain_batch = 3
epochs = 1
steps_per_epoch = 2
pca_dim = 8
";

fn pdl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdl"))
        .args(args)
        .env_remove("PDL_SEED")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.cfg");
    fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn default_generation_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = pdl(&["generate", "--out", s(dir)]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let manifest = json(&a.join("manifest.json"));
    assert_eq!(manifest["n_samples"], 800);
    assert_eq!(manifest["counts_per_domain"], serde_json::json!([200, 200, 200, 200]));
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
    let stdout = String::from_utf8_lossy(&pdl(&["generate", "--out", s(&tmp.path().join("c"))]).stdout).into_owned();
    let digest = hex::encode(Sha256::digest(fs::read(a.join("manifest.json")).unwrap()));
    assert!(stdout.contains(&digest), "{stdout}");
}

#[test]
fn invalid_generator_config_exits_with_validation_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = pdl(&["generate", "--out", s(&tmp.path().join("d")), "--per-domain", "1"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("per_domain"));
    let out = pdl(&["generate", "--out", s(&tmp.path().join("d")), "--alpha", "-1"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn seed_precedence_is_file_then_env_then_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("seed.cfg");
    fs::write(&cfg, format!("{TINY}seed = 3\n")).unwrap();
    let run = |env: Option<&str>, flag: Option<&str>, name: &str| {
        let dir = tmp.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_pdl"));
        cmd.args(["generate", "--out", s(&dir), "--config", s(&cfg)]).env_remove("PDL_SEED");
        if let Some(v) = env {
            cmd.env("PDL_SEED", v);
        }
        if let Some(v) = flag {
            cmd.args(["--seed", v]);
        }
        assert!(cmd.status().unwrap().success());
        fs::read_to_string(dir.join("config.txt")).unwrap()
    };
    assert!(run(None, None, "file").contains("seed = 3\n"));
    assert!(run(Some("5"), None, "env").contains("seed = 5\n"));
    assert!(run(Some("5"), Some("9"), "flag").contains("seed = 9\n"));
}

#[test]
fn zero_epochs_writes_only_the_initial_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    assert_eq!(code(&pdl(&["generate", "--out", s(&data), "--config", &cfg])), 0);
    let out = pdl(&["train", "--data", s(&data), "--out", s(&run), "--config", &cfg, "--epochs", "0"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("checkpoints/epoch-000.ckpt").exists());
    assert!(!run.join("final.ckpt").exists());
    assert_eq!(fs::read_to_string(run.join("steps.jsonl")).unwrap(), "");
}

#[test]
fn train_then_eval_produces_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (data, run, ev) = (tmp.path().join("data"), tmp.path().join("run"), tmp.path().join("eval"));
    assert_eq!(code(&pdl(&["generate", "--out", s(&data), "--config", &cfg])), 0);
    let out = pdl(&["train", "--data", s(&data), "--out", s(&run), "--config", &cfg, "--held-out-domain", "1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let run_info = json(&run.join("run.json"));
    let steps: Vec<Value> = fs::read_to_string(run.join("steps.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(steps.len(), 2);
    for step in &steps {
        assert_eq!(step["config_hash"], run_info["config_hash"]);
        assert_eq!(step["seed"], 0);
        assert_eq!(step["train_cls"].as_array().unwrap().len(), 1);
        assert!(step["test_depth"].is_number());
    }
    let epochs = fs::read_to_string(run.join("epochs.jsonl")).unwrap();
    let first: Value = serde_json::from_str(epochs.lines().next().unwrap()).unwrap();
    assert_eq!(first["label_counts"].as_array().unwrap().len(), 2);

    let ckpt = run.join("final.ckpt");
    let out = pdl(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&ev)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&ev.join("eval.json"));
    assert_eq!(report["evaluated_domain"], 1);
    assert_eq!(report["n_samples"], 12);
    assert_eq!(report["samples"].as_array().unwrap().len(), 12);
    assert_eq!(report["metadata"]["config_hash"], run_info["config_hash"]);
    let auc = report["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    let csv = fs::read(ev.join("projection.csv")).unwrap();
    assert_eq!(report["projection_sha256"], hex::encode(Sha256::digest(&csv)));
    assert!(String::from_utf8_lossy(&csv).starts_with("sample_id,"));
}

#[test]
fn eval_refuses_training_domains_and_mismatched_architecture() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    assert_eq!(code(&pdl(&["generate", "--out", s(&data), "--config", &cfg])), 0);
    assert_eq!(code(&pdl(&["train", "--data", s(&data), "--out", s(&run), "--config", &cfg, "--epochs", "0"])), 0);
    let ckpt = run.join("checkpoints/epoch-000.ckpt");
    let ev = |extra: &[&str]| {
        let dir = tmp.path().join("eval");
        let mut args = vec!["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&dir)];
        args.extend_from_slice(extra);
        pdl(&args)
    };
    let refused = ev(&["--held-out-domain", "2"]);
    assert_eq!(code(&refused), 1);
    assert!(String::from_utf8_lossy(&refused.stderr).contains("--allow-train-eval"));
    assert_eq!(code(&ev(&["--held-out-domain", "2", "--allow-train-eval"])), 0);
    let mismatch = ev(&["--head-hidden", "5"]);
    assert_eq!(code(&mismatch), 1);
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("architecture"));
}

#[test]
fn reported_auc_matches_projection_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run, ev) = (tmp.path().join("data"), tmp.path().join("run"), tmp.path().join("eval"));
    assert_eq!(code(&pdl(&["generate", "--out", s(&data)])), 0);
    assert_eq!(code(&pdl(&["train", "--data", s(&data), "--out", s(&run), "--epochs", "0"])), 0);
    let ckpt = run.join("checkpoints/epoch-000.ckpt");
    assert_eq!(code(&pdl(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&ev)])), 0);
    let report = json(&ev.join("eval.json"));
    let csv = std::fs::read_to_string(ev.join("projection.csv")).unwrap();
    let rows: Vec<(f64, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[3].parse().unwrap(), f[4].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len() as u64, report["n_samples"].as_u64().unwrap());
    // Every (live, spoof) pair, ties counting one half.
    let (mut wins, mut pairs) = (0.0, 0.0);
    for &(_, sl) in rows.iter().filter(|r| r.0 == 1.0) {
        for &(_, ss) in rows.iter().filter(|r| r.0 == 0.0) {
            pairs += 1.0;
            wins += if sl > ss { 1.0 } else if sl == ss { 0.5 } else { 0.0 };
        }
    }
    let auc = report["auc"].as_f64().unwrap();
    assert!((auc - wins / pairs).abs() < 1e-9, "reported {auc}, recomputed {}", wins / pairs);
}

#[test]
fn numerical_failure_exits_with_code_two_and_dumps_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    assert_eq!(code(&pdl(&["generate", "--out", s(&data), "--config", &cfg])), 0);
    let out = pdl(&["train", "--data", s(&data), "--out", s(&run), "--config", &cfg, "--beta", "1e300", "--epochs", "2"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let dump = json(&run.join("failure.json"));
    assert!(dump["batches"].as_array().is_some_and(|b| !b.is_empty()));
    assert!(dump["config_hash"].is_string());
}

#[test]
fn missing_dataset_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = pdl(&["train", "--data", s(&tmp.path().join("nope")), "--out", s(&tmp.path().join("run"))]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}

#[test]
fn verify_reports_and_detects_corruption() {
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("verify.json");
    let out = pdl(&["verify", "clustering", "--json", s(&report)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
    assert_eq!(json(&report)["passed"], true);
    let out = pdl(&["verify", "gradients", "--seeds", "1", "--corrupt-gradients"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}
