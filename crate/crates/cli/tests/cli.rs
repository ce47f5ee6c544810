use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: [&str; 6] = [
    "model.embed_dim=8",
    "model.heads=2",
    "model.layers=1",
    "data.stride=8",
    "train.batch_size=32",
    "train.align_pairs_per_batch=32",
];

fn interact(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_interact"))
        .args(args)
        .current_dir(cwd)
        .env_remove("INTERACT_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = interact(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(TINY).collect()
}

#[test]
fn verify_passes_and_records_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["verify", "--out", "v"], dir.path());
    let line = stdout
        .lines()
        .find(|l| l.contains("grad-check max rel error (model)"))
        .unwrap();
    let value: f64 = line
        .split(": ")
        .nth(1)
        .unwrap()
        .split(' ')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!(value <= 1e-4, "{line}");
    let m = json(&dir.path().join("v/run_manifest.json"));
    assert_eq!(m["status"], "ok");
    assert_eq!(m["command"], "verify");
    assert!(m["wall_clock_secs"].as_f64().unwrap() > 0.0);
    let report = json(&dir.path().join("v/verify.json"));
    assert_eq!(report["run"]["run_hash"], m["run_hash"]);
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let out = interact(&["finetune", "--data", "d", "train.lamda_h=0.2"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("interact: config error:"), "{err}");
    assert!(err.contains("train.lamda_h"), "{err}");

    fs::write(dir.path().join("c.json"), r#"{"train": {"epochs": "ten"}}"#).unwrap();
    let out = interact(&["pretrain", "--config", "c.json", "--data", "d"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.epochs"));

    let out = interact(&["eval", "--data", "d"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("eval.checkpoints"));

    let out = interact(&["train"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("interact: usage error:"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_interact"))
        .args(["synth", "--out", "s", "--episodes", "10", "--teleop-sessions", "0"])
        .current_dir(dir.path())
        .env("INTERACT_SEED", "42")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(json(&dir.path().join("s/run_manifest.json"))["seed"], 42);
    let flagged = ok(
        &[
            "synth",
            "--out",
            "t",
            "--seed",
            "5",
            "--episodes",
            "10",
            "--teleop-sessions",
            "0",
        ],
        dir.path(),
    );
    assert!(flagged.contains("hh:"));
    assert_eq!(json(&dir.path().join("t/run_manifest.json"))["seed"], 5);
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        &["synth", "--out", "data", "--episodes", "10", "--teleop-sessions", "10"],
        d,
    );
    assert!(d.join("data/hh/manifest.json").exists());
    let hr = json(&d.join("data/hr/manifest.json"));
    assert_eq!(hr["teleop"].as_array().unwrap().len(), 8);

    ok(
        &with_tiny(&["pretrain", "--data", "data/hh", "--out", "pre", "--epochs", "1"]),
        d,
    );
    let log = fs::read_to_string(d.join("pre/train_metrics.csv")).unwrap();
    assert_eq!(
        log.lines().next().unwrap(),
        "epoch,stage,train_loss,val_loss,val_fde,lr"
    );
    assert_eq!(log.lines().count(), 2);

    fs::write(d.join("ft.json"), r#"{"train": {"epochs": 1, "lambda_h": 0.5}}"#).unwrap();
    let mut args = with_tiny(&[
        "finetune",
        "--config",
        "ft.json",
        "--data",
        "data/hr",
        "--init",
        "pre/model.ckpt",
        "--align",
        "--out",
        "ft",
    ]);
    args.push("train.lambda_h=0.2");
    ok(&args, d);
    let m = json(&d.join("ft/run_manifest.json"));
    assert_eq!(m["config"]["train"]["lambda_h"], 0.2);
    assert_eq!(m["config"]["train"]["lambda_f"], 0.1);
    assert_eq!(m["config"]["train"]["epochs"], 1);
    assert_eq!(m["config"]["train"]["align"], true);
    let inputs = m["inputs"].as_array().unwrap();
    assert_eq!(inputs.len(), 3);
    let summary = json(&d.join("ft/train_summary.json"));
    assert_eq!(summary["variant"], "InteRACT_Align");

    let stdout = ok(
        &[
            "eval",
            "--data",
            "data/hr",
            "--checkpoint",
            "pre/model.ckpt",
            "--checkpoint",
            "ft/model.ckpt",
            "--out",
            "ev",
            "--dump-raw",
            "data.stride=8",
        ],
        d,
    );
    let metrics = fs::read_to_string(d.join("ev/metrics.csv")).unwrap();
    assert_eq!(stdout, metrics);
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next().unwrap(),
        "variant,task,mean_fde,std_fde,n_episodes,n_windows"
    );
    let variants: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(variants, ["InteRACT", "InteRACT_Align"]);
    assert!(d.join("ev/raw_fde.csv").exists());
    assert!(d.join("ev/metrics.svg").exists());
    let traces: Vec<_> = fs::read_dir(d.join("ev"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("trace_") && n.ends_with(".csv"))
        .collect();
    assert_eq!(traces.len(), 1);

    // A window cut from a test episode, with its true future.
    let entry = hr["episodes"]
        .as_array()
        .unwrap()
        .iter()
        .find(|e| e["split"] == "test")
        .unwrap();
    let ep = json(&d.join("data/hr").join(entry["file"].as_str().unwrap()));
    let frames = |kind: &str| {
        ep["agents"]
            .as_array()
            .unwrap()
            .iter()
            .find(|a| a["kind"] == kind)
            .unwrap()["frames"]
            .clone()
    };
    let (h, r) = (frames("human"), frames("robot"));
    let h = h.as_array().unwrap();
    let r = r.as_array().unwrap();
    let window = serde_json::json!({
        "human_history": h[..15],
        "partner_history": r[..15],
        "partner_future_action": r[29],
        "target_future": h[15..30],
    });
    fs::write(d.join("w.json"), window.to_string()).unwrap();
    let stdout = ok(
        &[
            "predict",
            "--checkpoint",
            "ft/model.ckpt",
            "--window",
            "w.json",
            "--out",
            "pr",
        ],
        d,
    );
    let pred: Value = serde_json::from_str(&stdout).unwrap();
    let rows = pred["forecast"].as_array().unwrap();
    assert_eq!(rows.len(), 15);
    assert!(rows.iter().all(|r| r.as_array().unwrap().len() == 27));
    assert!(pred["fde"].as_f64().unwrap() > 0.0);
    assert_eq!(pred, json(&d.join("pr/forecast.json")));
    assert_eq!(
        pred["run"]["run_hash"],
        json(&d.join("pr/run_manifest.json"))["run_hash"]
    );

    let teleop = hr["teleop"][0].as_str().unwrap();
    ok(
        &["retarget", "--episode", &format!("data/hr/{teleop}"), "--out", "rt"],
        d,
    );
    let pairs = json(&d.join("rt/pairs.json"));
    let pairs = pairs["pairs"].as_array().unwrap();
    assert_eq!(pairs.len(), 64);
    assert_eq!(pairs[0]["robot"].as_array().unwrap().len(), 6);
    assert_eq!(pairs[0]["human"].as_array().unwrap().len(), 27);
}

#[test]
fn identical_runs_give_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        &["synth", "--out", "a", "--episodes", "10", "--teleop-sessions", "0"],
        d,
    );
    ok(
        &["synth", "--out", "b", "--episodes", "10", "--teleop-sessions", "0"],
        d,
    );
    let read = |p: &str| fs::read(d.join(p)).unwrap();
    assert_eq!(read("a/hh/manifest.json"), read("b/hh/manifest.json"));
    for run in ["p1", "p2"] {
        ok(
            &with_tiny(&["pretrain", "--data", "a/hh", "--out", run, "--epochs", "2"]),
            d,
        );
    }
    assert_eq!(read("p1/train_metrics.csv"), read("p2/train_metrics.csv"));
    assert_eq!(read("p1/model.ckpt"), read("p2/model.ckpt"));
}

#[test]
fn eval_on_empty_split_fails_after_writing_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        &["synth", "--out", "data", "--episodes", "10", "--teleop-sessions", "0"],
        d,
    );
    ok(
        &with_tiny(&["pretrain", "--data", "data/hh", "--out", "pre", "--epochs", "1"]),
        d,
    );
    let mut m = json(&d.join("data/hh/manifest.json"));
    m["episodes"].as_array_mut().unwrap().retain(|e| e["split"] != "test");
    fs::write(d.join("data/hh/manifest.json"), m.to_string()).unwrap();
    let out = interact(
        &[
            "eval",
            "--data",
            "data/hh",
            "--checkpoint",
            "pre/model.ckpt",
            "--out",
            "ev",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.starts_with("interact: error:") && err.contains("empty split"),
        "{err}"
    );
    let manifest = json(&d.join("ev/run_manifest.json"));
    assert_eq!(manifest["status"], "failed");
    assert!(manifest["error"].as_str().unwrap().contains("empty split"));
}

#[test]
fn malformed_window_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        &["synth", "--out", "data", "--episodes", "10", "--teleop-sessions", "0"],
        d,
    );
    ok(
        &with_tiny(&["pretrain", "--data", "data/hh", "--out", "pre", "--epochs", "1"]),
        d,
    );
    fs::write(
        d.join("w.json"),
        r#"{"human_history": [[0.0]], "partner_history": [], "partner_future_action": [0, 0, 0]}"#,
    )
    .unwrap();
    let out = interact(&["predict", "--checkpoint", "pre/model.ckpt", "--window", "w.json"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("partner_future_action"));
}
