use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn fomo(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fomo"))
        .args(args)
        .current_dir(cwd)
        .env("FOMO_LOG", "warn")
        .output()
        .expect("fomo runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn last_json(o: &Output) -> Value {
    let text = stdout(o);
    if let Ok(v) = serde_json::from_str(text.trim()) {
        return v;
    }
    let line = text.lines().rev().find(|l| l.starts_with('{') || l.starts_with('[')).expect("json line");
    serde_json::from_str(line).unwrap()
}

/// Synthesizes a small corpus and shrinks the model so runs take seconds.
fn corpus(dir: &Path) {
    let o = fomo(&["synth", "--out", "c", "--samples", "12", "--tile-size", "16"], dir);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let path = dir.join("c/config.json");
    let mut cfg: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    cfg["model"]["dim"] = 16.into();
    cfg["model"]["depth"] = 1.into();
    cfg["model"]["heads"] = 2.into();
    cfg["model"]["decoder_depth"] = 1.into();
    cfg["model"]["decoder_width"] = 16.into();
    cfg["model"]["decoder_heads"] = 2.into();
    cfg["sampler"]["micro_batch_size"] = 2.into();
    cfg["accumulation"]["micro_batches"] = 2.into();
    cfg["steps_per_epoch"] = 6.into();
    cfg["checkpoint_every"] = 3.into();
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(fomo(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(fomo(&["--help"], dir.path()).status.code(), Some(0));
    assert_eq!(fomo(&["pretrain", "--precision", "16"], dir.path()).status.code(), Some(1));
}

#[test]
fn bad_weight_sum_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"corpus": {"kind": "manifests", "datasets": [
        {"manifest": "a.json", "weight": 0.5}, {"manifest": "b.json", "weight": 0.4}]}}"#;
    fs::write(dir.path().join("bad.json"), cfg).unwrap();
    let o = fomo(&["--config", "bad.json", "sample-stats"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("0.9"));
}

#[test]
fn missing_checkpoint_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let o = fomo(&["probe", "--ckpt", "nope.fmck", "--dataset", "nope.json"], dir.path());
    assert!(!o.status.success());
}

#[test]
fn pretrain_probe_ablate_reconstruct() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d);

    let o = fomo(&["--config", "c/config.json", "--out", "run", "pretrain"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = last_json(&o);
    assert_eq!(summary["step"], 6);
    assert!(summary["final_loss"].as_f64().unwrap().is_finite());
    let metrics = fs::read_to_string(d.join("run/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 6 * 2, "header plus one line per micro-batch");
    assert_eq!(&fs::read(d.join("run/checkpoint.fmck")).unwrap()[..4], b"FMCK");

    let o = fomo(&["probe", "--ckpt", "run/checkpoint.fmck", "--dataset", "c/probe/manifest.json"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let probe = last_json(&o);
    assert!(probe["test"]["f1_micro"].as_f64().unwrap() >= 0.0);

    let o = fomo(
        &["probe", "--ckpt", "run/checkpoint.fmck", "--dataset", "c/seg/manifest.json", "--task", "seg"],
        d,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(last_json(&o)["test"]["miou"].as_f64().is_some());

    let o = fomo(&["--out", "abl", "ablate", "--ckpt", "run/checkpoint.fmck", "--plan", "c/plan.json"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = last_json(&o);
    assert_eq!(rows.as_array().unwrap().len(), 4);
    let hashes: Vec<&Value> = rows.as_array().unwrap().iter().map(|r| &r["backbone_hash"]).collect();
    assert!(hashes.windows(2).all(|w| w[0] == w[1]));
    assert!(d.join("abl/ablation.json").exists());

    let o = fomo(
        &["--out", "rec", "reconstruct", "--ckpt", "run/checkpoint.fmck", "--dataset", "c/probe/manifest.json", "--bands", "2,3"],
        d,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for b in [2, 3] {
        let tile = fs::read(d.join(format!("rec/recon_0000_b{b:02}.fmtl"))).unwrap();
        assert_eq!(&tile[..4], b"FMTL");
    }
}

#[test]
fn identical_runs_and_resume_agree() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d);
    let run = |out: &str, extra: &[&str]| {
        let mut args = vec!["--config", "c/config.json", "--precision", "64", "--out", out, "pretrain"];
        args.extend_from_slice(extra);
        let o = fomo(&args, d);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        last_json(&o)
    };
    let a = run("a", &[]);
    let b = run("b", &[]);
    assert_eq!(a["param_hash"], b["param_hash"]);

    run("c", &["--steps", "2"]);
    let resumed = run("c", &["--resume", "c/checkpoint.fmck"]);
    assert_eq!(resumed["step"], 6);
    assert_eq!(resumed["param_hash"], a["param_hash"]);
}

#[test]
fn sample_stats_reports_every_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let o = fomo(&["sample-stats", "--draws", "2000"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.iter().filter(|l| l["kind"] == "dataset").count(), 6);
    let summary = lines.iter().find(|l| l["kind"] == "summary").unwrap();
    assert!(summary["chi_square_p"].as_f64().unwrap() > 0.0);
}

#[test]
fn gradcheck_reports_and_sets_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    corpus(d);
    let args = |tol: &'static str| ["--config", "c/config.json", "gradcheck", "--max-per-param", "8", "--tol", tol];
    let o = fomo(&args("1e-2"), d);
    assert!(o.status.success(), "{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("max_rel_err "));
    assert_eq!(last_json(&o)["passed"], true);
    assert_eq!(fomo(&args("1e-15"), d).status.code(), Some(2));
}
