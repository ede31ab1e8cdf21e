use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SIM: &str = r#"
seed = 7
n_channels = 2
sample_rate = 16000
n_genuine = 20
n_replay = 20
duration_s = 0.5
"#;

fn malrad(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_malrad"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn schema() -> jsonschema::Validator {
    let text = include_str!("../schema/summary.schema.json");
    jsonschema::validator_for(&serde_json::from_str(text).unwrap()).expect("schema compiles")
}

/// Runs a command that must succeed and returns its validated summary.
fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = malrad(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: Value = serde_json::from_slice(&out.stdout).expect("stdout is JSON");
    let errors: Vec<String> = schema().iter_errors(&v).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{args:?} summary violates schema: {errors:?}");
    v
}

fn simulated(dir: &Path) {
    std::fs::write(dir.join("sim.toml"), SIM).unwrap();
    ok(dir, &["simulate", "--config", "sim.toml", "--out", "data"]);
}

const TRAIN: &[&str] = &[
    "train",
    "--manifest",
    "data/manifest.csv",
    "--preset",
    "compact",
    "--epochs",
    "2",
    "--batch-size",
    "8",
    "--seed",
    "3",
];

fn train(dir: &Path, extra: &[&str]) -> Value {
    let args: Vec<&str> = TRAIN.iter().copied().chain(extra.iter().copied()).collect();
    ok(dir, &args)
}

#[test]
fn pipeline_report_is_byte_identical_across_runs() {
    let reports: Vec<Vec<u8>> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            simulated(dir.path());
            train(dir.path(), &["--out", "m.ckpt"]);
            ok(
                dir.path(),
                &["evaluate", "--ckpt", "m.ckpt", "--manifest", "data/manifest.csv", "--report", "r.json"],
            );
            std::fs::read(dir.path().join("r.json")).unwrap()
        })
        .collect();
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn env_independent_train_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulated(d);
    let manifest_before = std::fs::read(d.join("data/manifest.csv")).unwrap();
    let t = train(d, &["--split", "env_indep:A", "--mode", "fixed_multi", "--out", "m.ckpt"]);
    assert_eq!(t["mic_id"], "SIM");
    assert_eq!(t["mode"], "fixed_multi");
    let summary = ok(
        d,
        &[
            "evaluate", "--ckpt", "m.ckpt", "--manifest", "data/manifest.csv", "--report", "r.json",
            "--split", "env_indep:A",
        ],
    );
    let report: Value = serde_json::from_slice(&std::fs::read(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(report, summary);
    let eer = report["eer"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&eer), "eer {eer}");
    // Only env A is tested under env_indep:A.
    let envs: Vec<&String> = report["per_env"].as_object().unwrap().keys().collect();
    assert_eq!(envs, ["A"]);
    assert_eq!(std::fs::read(d.join("data/manifest.csv")).unwrap(), manifest_before);
}

#[test]
fn inspect_roc_and_alrad() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulated(d);
    train(d, &["--alrad", "--out", "m.ckpt"]);
    let v = ok(d, &["inspect", "--ckpt", "m.ckpt"]);
    assert_eq!(v["mic_id"], "SIM");
    assert!(v["param_count"].as_u64().unwrap() > 0);
    assert_eq!(v["history"].as_array().unwrap().len(), 2);
    assert_eq!(v["train_config"]["alrad"], true);

    let r = ok(
        d,
        &["roc", "--ckpt", "m.ckpt", "--manifest", "data/manifest.csv", "--csv", "roc.csv", "--svg", "roc.svg"],
    );
    let csv = std::fs::read_to_string(d.join("roc.csv")).unwrap();
    assert!(csv.starts_with("fpr,tpr,threshold\n"));
    assert_eq!(csv.lines().count() as u64, r["n_points"].as_u64().unwrap() + 1);
    assert!(std::fs::read_to_string(d.join("roc.svg")).unwrap().contains("<svg"));
}

#[test]
fn ablate_writes_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulated(d);
    let v = ok(
        d,
        &[
            "ablate", "--manifest", "data/manifest.csv", "--runs", "2", "--out", "abl", "--preset", "compact",
            "--epochs", "1", "--batch-size", "16",
        ],
    );
    let names: Vec<&str> = v["variants"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["variant"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["adaptive", "fixed_multi", "fixed_single", "alrad"]);
    let on_disk: Value = serde_json::from_slice(&std::fs::read(d.join("abl/ablation.json")).unwrap()).unwrap();
    assert_eq!(on_disk, v);
    assert!(d.join("abl/alrad_seed1.ckpt").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let code = |args: &[&str]| malrad(d, args).status.code();

    assert_eq!(code(&["inspect", "--ckpt", "x", "--bogus"]), Some(1));
    assert_eq!(code(&["frobnicate"]), Some(1));
    assert_eq!(code(&["train", "--manifest", "m.csv", "--out", "x", "--mode", "beamy"]), Some(1));

    let missing = malrad(d, &["inspect", "--ckpt", "nope.ckpt"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.ckpt"));

    std::fs::write(d.join("bad.toml"), "seed = 1\nn_channels = 0\nsample_rate = 16000\nn_genuine = 1\nn_replay = 1\n")
        .unwrap();
    let bad = malrad(d, &["simulate", "--config", "bad.toml", "--out", "data"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("n_channels"));

    std::fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(code(&["inspect", "--ckpt", "junk.ckpt"]), Some(2));

    simulated(d);
    assert_eq!(
        code(&["ablate", "--manifest", "data/manifest.csv", "--runs", "1", "--out", "abl"]),
        Some(1)
    );
    let diverged = malrad(
        d,
        &[
            "train", "--manifest", "data/manifest.csv", "--preset", "compact", "--epochs", "2", "--lr", "1e300",
            "--out", "m.ckpt",
        ],
    );
    assert_eq!(diverged.status.code(), Some(3), "{}", String::from_utf8_lossy(&diverged.stderr));
}
