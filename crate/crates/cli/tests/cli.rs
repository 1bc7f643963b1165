use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn fgakit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fgakit"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> PathBuf {
    let out = fgakit(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    dir.join(String::from_utf8(out.stdout).unwrap().trim())
}

/// Exit code and the JSON record printed on stderr.
fn fails(dir: &Path, args: &[&str]) -> (i32, Value) {
    let out = fgakit(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let record = serde_json::from_slice(&out.stderr).unwrap_or_else(|_| panic!("stderr: {}", String::from_utf8_lossy(&out.stderr)));
    (out.status.code().unwrap(), record)
}

/// A run small enough for a few seconds per command.
fn tiny(extra: Value) -> Value {
    let mut cfg = json!({
        "seed": 3,
        "data": { "synth": {
            "classes": 4, "per_class": 9, "height": 8, "width": 8,
            "noise_sigma": 0.02, "class_contrast": 0.2, "prototype_cells": 2
        } },
        "model": {
            "image": { "height": 8, "width": 8, "hidden": [16], "embed_dim": 8 },
            "text": { "hidden": [16], "embed_dim": 8 }
        },
        "train": { "epochs": 5 },
        "eval": { "ks": [1, 5] },
        "attack": { "minibatch": 8 }
    });
    merge(&mut cfg, extra);
    cfg
}

fn merge(base: &mut Value, extra: Value) {
    match (base, extra) {
        (Value::Object(b), Value::Object(e)) => {
            for (k, v) in e {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

/// A temp dir holding `run.json`.
fn setup(extra: Value) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.json"), serde_json::to_string_pretty(&tiny(extra)).unwrap()).unwrap();
    dir
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn unknown_key_is_a_config_error_naming_its_path() {
    let dir = setup(json!({}));
    fs::write(dir.path().join("bad.json"), r#"{"attack": {"epsilonn": 0.1}}"#).unwrap();
    let (code, rec) = fails(dir.path(), &["gen-data", "--config", "bad.json"]);
    assert_eq!(code, 2);
    assert_eq!(rec["error"], "config");
    assert_eq!(rec["exit_code"], 2);
    assert_eq!(rec["key"], "attack.epsilonn");
}

#[test]
fn wrongly_typed_value_is_a_config_error() {
    let dir = setup(json!({}));
    fs::write(dir.path().join("bad.json"), r#"{"attack": {"steps": "ten"}}"#).unwrap();
    let (code, rec) = fails(dir.path(), &["train", "--config", "bad.json"]);
    assert_eq!(code, 2);
    assert_eq!(rec["key"], "attack.steps");
}

#[test]
fn zero_threads_is_rejected() {
    let dir = setup(json!({}));
    let (code, rec) = fails(dir.path(), &["gen-data", "--config", "run.json", "--threads", "0"]);
    assert_eq!((code, rec["key"].as_str()), (2, Some("--threads")));
}

#[test]
fn missing_inputs_exit_with_3() {
    let dir = setup(json!({}));
    let (code, rec) = fails(dir.path(), &["train", "--config", "run.json"]);
    assert_eq!(code, 3);
    assert_eq!(rec["error"], "missing-file");
    assert!(rec["file"].as_str().unwrap().ends_with("train.fgak"));

    let (code, _) = fails(dir.path(), &["gen-data", "--config", "absent.json"]);
    assert_eq!(code, 3);
}

#[test]
fn version_mismatch_and_garbage_exit_with_4() {
    let dir = setup(json!({}));
    ok(dir.path(), &["gen-data", "--config", "run.json"]);
    let train = dir.path().join("out/train.fgak");
    let mut bytes = fs::read(&train).unwrap();
    bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
    fs::write(&train, &bytes).unwrap();
    let (code, rec) = fails(dir.path(), &["train", "--config", "run.json"]);
    assert_eq!(code, 4);
    assert_eq!(rec["error"], "format");

    fs::write(&train, b"not a tensor file").unwrap();
    assert_eq!(fails(dir.path(), &["train", "--config", "run.json"]).0, 4);
}

#[test]
fn defaults_echo_the_standard_attack_budget() {
    let dir = setup(json!({}));
    fs::write(dir.path().join("empty.json"), "{}").unwrap();
    let report = read_json(&ok(dir.path(), &["gen-data", "--config", "empty.json", "--out", "o"]));
    let attack = &report["config"]["attack"];
    assert_eq!(attack["epsilon"].as_f64().unwrap(), 2.0 / 255.0);
    assert_eq!(attack["steps"], 10);
    assert_eq!(attack["norm"], "inf");
    assert_eq!(attack["scales"], json!([0.5, 0.75, 1.25, 1.5]));
    assert_eq!(attack["text_budget"], 1);
    assert_eq!(report["config"]["seed"], 0);
    assert_eq!(report["results"]["train_examples"], 200);
    assert_eq!(report["results"]["test_examples"], 400);
}

#[test]
fn zero_budget_attack_reproduces_the_test_split_bytes() {
    let dir = setup(json!({ "attack": { "method": "fga-t", "epsilon": 0.0, "text_budget": 0 } }));
    for cmd in ["gen-data", "train"] {
        ok(dir.path(), &[cmd, "--config", "run.json"]);
    }
    let report = read_json(&ok(dir.path(), &["attack", "--config", "run.json"]));
    assert_eq!(report["results"]["zero_budget"], true);
    assert_eq!(report["results"]["texts_changed"], 0);
    let out = dir.path().join("out");
    assert_eq!(fs::read(out.join("adv.fgak")).unwrap(), fs::read(out.join("test.fgak")).unwrap());
    assert_eq!(fs::read(out.join("adv.json")).unwrap(), fs::read(out.join("test.json")).unwrap());

    let eval = read_json(&ok(dir.path(), &["eval", "--config", "run.json"]));
    let asr = &eval["results"]["adversarial"]["asr"];
    for key in ["top1", "tr_r1", "ir_r1"] {
        assert!(matches!(asr[key].as_f64(), None | Some(0.0)), "{key}: {}", asr[key]);
    }
}

#[test]
fn pipeline_reports_and_summary() {
    let dir = setup(json!({
        "attack": { "method": "fga-t" },
        "transfer": { "variants": ["fga-t", "mfga-t-aug"] },
        "ablate": { "epsilons_255": [1, 4], "steps": [1, 3] },
        "report": { "inputs": ["out/eval.report.json", "out/ablate.report.json"] }
    }));
    for cmd in ["gen-data", "train", "attack", "eval", "transfer", "ablate"] {
        let report = read_json(&ok(dir.path(), &[cmd, "--config", "run.json"]));
        assert_eq!(report["command"], cmd);
        assert_eq!(report["seed"], 3);
        assert_eq!(report["config_hash"].as_str().unwrap().len(), 64);
    }
    let out = dir.path().join("out");
    // Data sidecars survive next to the reports.
    assert!(read_json(&out.join("train.json")).get("captions").is_some());

    let eval = read_json(&out.join("eval.report.json"));
    let clean = &eval["results"]["clean"];
    assert!(clean["top1"].as_f64().unwrap() <= clean["top5"].as_f64().unwrap());
    assert!(eval["results"]["adversarial"]["confusion"]["matrix"].as_array().unwrap().len() == 4);

    let transfer = fs::read_to_string(out.join("transfer_mfga-t-aug.csv")).unwrap();
    assert_eq!(transfer.lines().next(), Some("source,target_0,target_1"));
    assert_eq!(transfer.lines().count(), 3);
    let ablation = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(ablation.lines().count(), 5);

    ok(dir.path(), &["report", "--config", "run.json"]);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("file,key,value\n"));
    assert!(summary.contains("eval.report.json,clean.top1,"));
    assert!(summary.contains("ablate.report.json,"));
}

#[test]
fn echoed_config_reruns_to_identical_report() {
    let dir = setup(json!({}));
    for cmd in ["gen-data", "train", "attack"] {
        ok(dir.path(), &[cmd, "--config", "run.json"]);
    }
    let path = ok(dir.path(), &["eval", "--config", "run.json"]);
    let first = fs::read(&path).unwrap();
    let echoed = &read_json(&path)["config"];
    fs::write(dir.path().join("echo.json"), serde_json::to_string(echoed).unwrap()).unwrap();
    let again = ok(dir.path(), &["eval", "--config", "echo.json"]);
    assert_eq!(again, path);
    assert_eq!(fs::read(&again).unwrap(), first);
}

#[test]
fn overrides_change_seed_and_output_directory() {
    let dir = setup(json!({}));
    let a = read_json(&ok(dir.path(), &["gen-data", "--config", "run.json", "--seed", "11", "--out", "alt"]));
    assert_eq!(a["seed"], 11);
    assert!(dir.path().join("alt/test.fgak").is_file());
    let b = read_json(&ok(dir.path(), &["gen-data", "--config", "run.json"]));
    assert_ne!(a["config_hash"], b["config_hash"]);
    assert_ne!(a["artifacts"][0]["sha256"], b["artifacts"][0]["sha256"]);
}

#[test]
fn patch_attack_reports_targets_outside_own_labels() {
    let dir = setup(json!({ "attack": { "method": "patch", "patch": { "steps": 5 } } }));
    for cmd in ["gen-data", "train"] {
        ok(dir.path(), &[cmd, "--config", "run.json"]);
    }
    let report = read_json(&ok(dir.path(), &["attack", "--config", "run.json"]));
    let targets = report["results"]["targets"].as_array().unwrap();
    let labels = read_json(&dir.path().join("out/test.json"))["labels"].clone();
    assert_eq!(targets.len(), labels.as_array().unwrap().len());
    for (t, y) in targets.iter().zip(labels.as_array().unwrap()) {
        assert_ne!(t, y);
    }
}
