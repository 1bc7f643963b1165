use std::fs;
use std::path::{Path, PathBuf};

use fgakit::evalkit::matrix_csv;
use fgakit::models::{alignment_gap, load_checkpoint, save_checkpoint, ModelBundle};
use fgakit::synthdata::{load_dataset, save_dataset};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{Method, RunConfig};
use crate::error::{CliError, CliResult};
use crate::experiment::{
    ablation, build_data, check_compatible, confusion, model_seed, run_attack, score, success_rates, train_models,
    transfer, Data, Models,
};

/// Envelope of every report: the resolved config, its hash and the seed.
#[derive(Serialize)]
struct Report<'a, R> {
    command: &'a str,
    seed: u64,
    config_hash: String,
    config: &'a RunConfig,
    /// Files written by the command with their SHA-256 digests.
    artifacts: Vec<Artifact>,
    results: R,
}

#[derive(Serialize)]
struct Artifact {
    file: String,
    sha256: String,
}

fn artifact(cfg: &RunConfig, path: &Path) -> CliResult<Artifact> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let file = path.strip_prefix(&cfg.out).unwrap_or(path).display().to_string();
    Ok(Artifact {
        file,
        sha256: hex::encode(Sha256::digest(bytes)),
    })
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Writes `<out>/<command>.report.json` and returns its path.
fn write_report<R: Serialize>(cfg: &RunConfig, command: &str, files: &[PathBuf], results: R) -> CliResult<PathBuf> {
    let report = Report {
        command,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        config: cfg,
        artifacts: files.iter().map(|p| artifact(cfg, p)).collect::<CliResult<_>>()?,
        results,
    };
    let path = cfg.out.join(format!("{command}.report.json"));
    let text = serde_json::to_string_pretty(&report).map_err(fgakit::Error::from)? + "\n";
    write_text(&path, &text)?;
    Ok(path)
}

fn require(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingFile(path.to_path_buf()))
    }
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e)),
        _ => Ok(()),
    }
}

fn read_data(path: &Path) -> CliResult<Data> {
    require(path)?;
    require(&path.with_extension("json"))?;
    Ok(load_dataset(path)?)
}

fn read_models(path: &Path) -> CliResult<Models> {
    require(path)?;
    require(&path.with_extension("json"))?;
    Ok(ModelBundle::from_checkpoint(&load_checkpoint(path)?)?)
}

fn save_data(data: &Data, path: &Path) -> CliResult<()> {
    ensure_parent(path)?;
    Ok(save_dataset(data, path)?)
}

pub fn gen_data(cfg: &RunConfig) -> CliResult<PathBuf> {
    let (train, test) = build_data(&cfg.data, cfg.seed)?;
    let (tp, ep) = (cfg.train_data(), cfg.test_data());
    save_data(&train, &tp)?;
    save_data(&test, &ep)?;
    let (c, h, w) = train.image_dims()?;
    let results = json!({
        "source": if cfg.data.cifar.is_some() { "cifar10" } else { "synthetic" },
        "train_examples": train.len(),
        "test_examples": test.len(),
        "classes": train.class_names,
        "image_dims": [c, h, w],
        "vocab_size": train.vocab.len(),
    });
    let files = [tp.clone(), tp.with_extension("json"), ep.clone(), ep.with_extension("json")];
    write_report(cfg, "gen-data", &files, results)
}

pub fn train(cfg: &RunConfig) -> CliResult<PathBuf> {
    let data = read_data(&cfg.train_data())?;
    let (models, log) = train_models(&cfg.model, &cfg.train, &data, model_seed(cfg.seed, 0))?;
    let path = cfg.checkpoint();
    ensure_parent(&path)?;
    save_checkpoint(&path, &models.to_checkpoint(cfg.seed, &cfg.hash())?)?;
    let (matched, unmatched) = alignment_gap(&models.image, &models.text, &data)?;
    let results = json!({
        "epochs": log.epoch_loss.len(),
        "final_loss": log.epoch_loss.last(),
        "epoch_loss": log.epoch_loss,
        "matched_cosine": matched,
        "unmatched_cosine": unmatched,
    });
    write_report(cfg, "train", &[path.clone(), path.with_extension("json")], results)
}

#[derive(Serialize)]
struct TraceSummary {
    initial_loss: Option<f64>,
    final_loss: f64,
    l1: f64,
    l2: f64,
    linf: f64,
    iterations: usize,
}

pub fn attack(cfg: &RunConfig) -> CliResult<PathBuf> {
    let data = read_data(&cfg.test_data())?;
    let models = read_models(&cfg.checkpoint())?;
    check_compatible(&models, &data)?;
    let out = run_attack(&cfg.attack, &models, &data, cfg.seed)?;
    let adv = Data {
        images: out.images.clone(),
        captions: out.texts.clone(),
        ..data.clone()
    };
    let path = cfg.adversarial();
    save_data(&adv, &path)?;
    let texts_changed = out
        .texts
        .iter()
        .zip(&data.captions)
        .map(|(a, c)| a.iter().zip(c).filter(|(x, y)| x != y).count())
        .sum::<usize>();
    let zero_budget = match cfg.attack.method {
        Method::Patch => cfg.attack.patch.steps == 0,
        Method::FgaT => cfg.attack.epsilon == 0.0 && cfg.attack.text_budget == 0,
        _ => cfg.attack.epsilon == 0.0,
    };
    let traces: Vec<TraceSummary> = out
        .traces
        .iter()
        .map(|t| TraceSummary {
            initial_loss: t.losses.first().copied(),
            final_loss: t.final_loss,
            l1: t.l1,
            l2: t.l2,
            linf: t.linf,
            iterations: t.iterations,
        })
        .collect();
    let n = traces.len().max(1) as f64;
    let results = json!({
        "method": cfg.attack.method,
        "zero_budget": zero_budget,
        "examples": traces.len(),
        "texts_changed": texts_changed,
        "mean_final_loss": traces.iter().map(|t| t.final_loss).sum::<f64>() / n,
        "max_linf": traces.iter().map(|t| t.linf).fold(0.0, f64::max),
        "targets": out.targets,
        "patches": out.patches.map(|p| p.into_iter().map(|s| s.square).collect::<Vec<_>>()),
        "traces": traces,
    });
    write_report(cfg, "attack", &[path.clone(), path.with_extension("json")], results)
}

pub fn eval(cfg: &RunConfig) -> CliResult<PathBuf> {
    let data = read_data(&cfg.test_data())?;
    let models = read_models(&cfg.checkpoint())?;
    check_compatible(&models, &data)?;
    let clean = score(&models, &data, &data.images, &data.captions, &cfg.eval)?;
    let mut results = json!({ "clean": clean.report() });
    if cfg.eval.adversarial {
        let adv_data = read_data(&cfg.adversarial())?;
        if adv_data.labels != data.labels || adv_data.images.shape() != data.images.shape() {
            return Err(CliError::config("adversarial artifact does not match the test split"));
        }
        let adv = score(&models, &data, &adv_data.images, &adv_data.captions, &cfg.eval)?;
        let mut report = adv.report();
        report.asr = success_rates(&clean, &adv)?;
        report.confusion = Some(confusion(&clean, &adv, &data)?);
        results["adversarial"] = serde_json::to_value(report).map_err(fgakit::Error::from)?;
    }
    write_report(cfg, "eval", &[], results)
}

pub fn transfer_cmd(cfg: &RunConfig) -> CliResult<PathBuf> {
    if cfg.transfer.models < 2 {
        return Err(CliError::Config {
            path: "transfer.models".into(),
            message: "needs at least 2 models".into(),
        });
    }
    let train = read_data(&cfg.train_data())?;
    let test = read_data(&cfg.test_data())?;
    let models = (0..cfg.transfer.models)
        .map(|k| Ok(train_models(&cfg.model, &cfg.train, &train, model_seed(cfg.seed, k))?.0))
        .collect::<CliResult<Vec<_>>>()?;
    let results = transfer(&models, &test, &cfg.attack, &cfg.transfer.variants, &cfg.eval, cfg.seed)?;
    let header: Vec<String> = std::iter::once("source".to_string())
        .chain((0..models.len()).map(|t| format!("target_{t}")))
        .collect();
    let mut files = Vec::new();
    for r in &results {
        let rows: Vec<Vec<Option<String>>> = r
            .tr_r1
            .iter()
            .enumerate()
            .map(|(s, row)| {
                std::iter::once(Some(s.to_string()))
                    .chain(row.iter().map(|v| v.map(|x| x.to_string())))
                    .collect()
            })
            .collect();
        let path = cfg.out.join(format!("transfer_{}.csv", r.variant));
        write_text(&path, &matrix_csv(&header, &rows))?;
        files.push(path);
    }
    write_report(cfg, "transfer", &files, results)
}

pub fn ablate(cfg: &RunConfig) -> CliResult<PathBuf> {
    let data = read_data(&cfg.test_data())?;
    let models = read_models(&cfg.checkpoint())?;
    check_compatible(&models, &data)?;
    let rows = ablation(&models, &data, &cfg.attack, &cfg.ablate, &cfg.eval, cfg.seed)?;
    let header: Vec<String> = ["sweep", "epsilon_255", "steps", "top1", "tr_r1", "ir_r1"].map(String::from).to_vec();
    let cells: Vec<Vec<Option<String>>> = rows
        .iter()
        .map(|r| {
            vec![
                Some(r.sweep.clone()),
                Some(r.epsilon_255.to_string()),
                Some(r.steps.to_string()),
                Some(r.top1.to_string()),
                Some(r.tr_r1.to_string()),
                Some(r.ir_r1.to_string()),
            ]
        })
        .collect();
    let path = cfg.out.join("ablation.csv");
    write_text(&path, &matrix_csv(&header, &cells))?;
    write_report(cfg, "ablate", &[path], rows)
}

/// Flattens the numeric leaves of a JSON value into `(dotted key, value)`.
fn numeric_leaves(prefix: &str, v: &Value, out: &mut Vec<(String, f64)>) {
    match v {
        Value::Number(n) => {
            if let Some(x) = n.as_f64() {
                out.push((prefix.to_string(), x));
            }
        }
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                numeric_leaves(&key, child, out);
            }
        }
        Value::Array(items) => {
            for (i, child) in items.iter().enumerate() {
                numeric_leaves(&format!("{prefix}.{i}"), child, out);
            }
        }
        _ => {}
    }
}

pub fn report(cfg: &RunConfig) -> CliResult<PathBuf> {
    if cfg.report.inputs.is_empty() {
        return Err(CliError::Config {
            path: "report.inputs".into(),
            message: "no reports to merge".into(),
        });
    }
    let mut merged = Vec::new();
    let mut rows = Vec::new();
    for path in &cfg.report.inputs {
        require(path)?;
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
        let results = v
            .get("results")
            .ok_or_else(|| CliError::Format(format!("{} is not a report", path.display())))?;
        let name = path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        let mut leaves = Vec::new();
        numeric_leaves("", results, &mut leaves);
        rows.extend(leaves.into_iter().map(|(k, x)| vec![Some(name.clone()), Some(k), Some(x.to_string())]));
        merged.push(json!({
            "file": name,
            "command": v.get("command"),
            "seed": v.get("seed"),
            "config_hash": v.get("config_hash"),
            "results": results,
        }));
    }
    let csv = cfg.out.join("summary.csv");
    write_text(&csv, &matrix_csv(&["file".into(), "key".into(), "value".into()], &rows))?;
    write_report(cfg, "report", &[csv], merged)
}
