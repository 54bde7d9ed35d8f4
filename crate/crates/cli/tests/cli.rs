use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "epochs": 1,
  "batch_size": 2,
  "data": { "duration": 0.1, "sizes": { "train": 4, "valid": 2, "test": 3 } },
  "model": {
    "encoder": { "num_bases": 8 },
    "separator": { "bottleneck": 6, "block_channels": 8, "kernel": 3, "num_blocks": 2, "num_repeats": 1 }
  }
}"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latentsep"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_workflow_on_a_tiny_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    let (step1, step2, e2e) = (dir.path().join("s1"), dir.path().join("s2"), dir.path().join("e2e"));

    ok(&["train-step1", "--config", s(&cfg), "--out-dir", s(&step1)]);
    let report = read_json(&step1.join("train_report.json"));
    assert_eq!(report["mode"], "step1");
    let codec = step1.join("best.json");
    assert!(codec.exists() && step1.join("train_log.csv").exists());

    ok(&["train-step2", "--config", s(&cfg), "--ckpt", s(&codec), "--out-dir", s(&step2)]);
    assert_eq!(read_json(&step2.join("train_report.json"))["mode"], "step2_latent");
    ok(&["train-e2e", "--config", s(&cfg), "--seed", "3", "--out-dir", s(&e2e)]);

    let eval = dir.path().join("eval");
    let (b2, be) = (step2.join("best.json"), e2e.join("best.json"));
    ok(&[
        "evaluate", "--config", s(&cfg), "--ckpt", s(&codec), "--ckpt", s(&b2), "--ckpt", s(&be), "--out-dir", s(&eval),
    ]);
    let report = read_json(&eval.join("eval_report.json"));
    assert_eq!(report["test_examples"], 3);
    assert_eq!(report["irm_kind"], "magnitude");
    assert!(report["systems"]["step2_latent"]["mean"].is_number());
    assert!(report["systems"]["e2e"]["mean"].is_number());
    assert!(report["oracle_latent"]["mean"].is_number());
    assert!(report["latent_l1"]["ratio"].as_f64().unwrap() > 0.0);
    let csv = fs::read_to_string(eval.join("eval_records.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("index,seed,classes,snr_db,oracle_irm,oracle_latent,e2e,step2_latent"));

    let latents = dir.path().join("latents");
    ok(&["export-latents", "--config", s(&cfg), "--ckpt", s(&codec), "--count", "2", "--out-dir", s(&latents)]);
    assert_eq!(fs::read_dir(&latents).unwrap().count(), 6);
    let header = fs::read_to_string(latents.join("latents_0000_mixture.csv")).unwrap();
    assert!(header.starts_with("basis,f0,f1"));

    let theory = dir.path().join("theory");
    ok(&[
        "verify-theory", "--config", s(&cfg), "--ckpt", s(&codec), "--trials", "40", "--examples", "2", "--out-dir",
        s(&theory),
    ]);
    let report = read_json(&theory.join("theory_report.json"));
    assert_eq!(report["certified"], true);
    assert_eq!(report["latent_bound"]["projected"]["violations"], 0);
}

#[test]
fn gen_data_writes_wav_files_and_an_index() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    ok(&["gen-data", "--split", "test", "--duration", "0.05", "--split-sizes", "2,2,2", "--out-dir", s(&out)]);
    let index = fs::read_to_string(out.join("test").join("index.csv")).unwrap();
    assert_eq!(index.lines().count(), 3);
    let wavs = fs::read_dir(out.join("test"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "wav"))
        .count();
    assert_eq!(wavs, 6);
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    assert_eq!(run(&["train-step2", "--out-dir", out]).status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{ "epochs": 0 }"#).unwrap();
    assert_eq!(run(&["train-step1", "--config", s(&bad), "--out-dir", out]).status.code(), Some(2));

    let unknown = dir.path().join("unknown.json");
    fs::write(&unknown, r#"{ "epochz": 3 }"#).unwrap();
    assert_eq!(run(&["train-step1", "--config", s(&unknown), "--out-dir", out]).status.code(), Some(2));

    let mode = dir.path().join("mode.json");
    fs::write(&mode, r#"{ "mode": "e2e" }"#).unwrap();
    assert_eq!(run(&["train-step1", "--config", s(&mode), "--out-dir", out]).status.code(), Some(2));

    assert_eq!(run(&["evaluate", "--out-dir", out]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_plain_failure() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    let out = run(&["export-latents", "--ckpt", s(&missing), "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.json"));
}
