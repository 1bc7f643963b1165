//! Experiment protocols shared by the subcommands and the acceptance
//! suite: data preparation, training, the attack methods, scoring and the
//! transfer and ablation drivers.

use std::collections::BTreeMap;

use fgakit::evalkit::{
    ablation_sweep, attack_success_rate, mean_off_diagonal, proximity_confusion, retrieval_from_embeddings,
    transfer_eval, zeroshot_from_embeddings, Confusion, MetricsReport, Retrieval, RetrievalTruth, ZeroShot,
};
use fgakit::guidance::{class_mean_guidance, dataset_text_guidance, prompt_guidance, topk_guidance, GuidanceSet};
use fgakit::imgattack::{fga, fga_targeted_patch, pgd_attack, AttackTrace, PatchSpec};
use fgakit::losses::Deviation;
use fgakit::models::{forward_image, forward_text, train_itc, ImageEncoder, ModelBundle, TextEncoder, TrainLog, TrainSpec};
use fgakit::numkit::{cosine, RngStream, Tensor};
use fgakit::synthdata::{gen_dataset, load_cifar10, PairedDataset, TokenSeq};
use fgakit::txtattack::{fga_t, TextAttackConfig, TextObjective};
use rand::Rng;
use serde::Serialize;

use crate::config::{AblateConfig, AttackSection, DataConfig, EvalConfig, GuidanceKind, Method, ModelConfig, TransferVariant};
use crate::error::{CliError, CliResult};

pub type Data = PairedDataset<f32>;
pub type Models = ModelBundle<f32>;

const DATA_STREAM: u64 = 0;
const IMAGE_INIT_STREAM: u64 = 1;
const TEXT_INIT_STREAM: u64 = 2;
const TRAIN_STREAM: u64 = 3;
const TARGET_STREAM: u64 = 0x5441_5247;

/// Seed of the `k`-th model of a run.
pub fn model_seed(master: u64, k: usize) -> u64 {
    master.wrapping_mul(10).wrapping_add(k as u64 + 1)
}

/// Loads or generates the full dataset and splits it into
/// `(train, evaluation)`.
pub fn build_data(cfg: &DataConfig, seed: u64) -> CliResult<(Data, Data)> {
    let full: Data = match &cfg.cifar {
        Some(path) => {
            let ds = load_cifar10(path).map_err(|e| match e {
                fgakit::Error::Io(io) => CliError::io(path, io),
                other => other.into(),
            })?;
            match cfg.cifar_limit {
                Some(n) => ds.subset(&(0..n.min(ds.len())).collect::<Vec<_>>())?,
                None => ds,
            }
        }
        None => gen_dataset(&cfg.synth, None, RngStream::new(seed, DATA_STREAM))?,
    };
    if cfg.split_stride < 2 {
        return Err(CliError::Config {
            path: "data.split_stride".into(),
            message: "must be >= 2 so both splits are non-empty".into(),
        });
    }
    let (kept, held) = full.split_every(cfg.split_stride, cfg.split_offset)?;
    Ok((held, kept))
}

pub fn train_models(model: &ModelConfig, spec: &TrainSpec, data: &Data, seed: u64) -> CliResult<(Models, TrainLog)> {
    let mut image = ImageEncoder::new(&model.image, RngStream::new(seed, IMAGE_INIT_STREAM))?;
    if model.standardize {
        image.fit_standardization(&data.images)?;
    }
    let mut text_spec = model.text.clone();
    text_spec.vocab_size = data.vocab.len();
    let text = TextEncoder::new(&text_spec, RngStream::new(seed, TEXT_INIT_STREAM))?;
    let (image, text, log) = train_itc(image, text, data, spec, RngStream::new(seed, TRAIN_STREAM))?;
    Ok((
        Models {
            image,
            text,
            fusion: None,
        },
        log,
    ))
}

/// Checks that a checkpoint can read a dataset's images and tokens.
pub fn check_compatible(models: &Models, data: &Data) -> CliResult<()> {
    if models.text.spec.vocab_size != data.vocab.len() {
        return Err(CliError::config(format!(
            "checkpoint vocabulary has {} tokens, dataset {}",
            models.text.spec.vocab_size,
            data.vocab.len()
        )));
    }
    let (c, ..) = data.image_dims()?;
    if c != models.image.spec.channels {
        return Err(CliError::config(format!(
            "checkpoint expects {} channels, dataset has {c}",
            models.image.spec.channels
        )));
    }
    Ok(())
}

pub fn guidance(kind: GuidanceKind, template: &str, models: &Models, data: &Data) -> CliResult<GuidanceSet<f32>> {
    Ok(match kind {
        GuidanceKind::ClassMean => class_mean_guidance(&models.image, data)?,
        GuidanceKind::Prompt => prompt_guidance(&models.text, &data.vocab, &data.class_names, template, &data.labels)?,
        GuidanceKind::DatasetTexts => dataset_text_guidance(&models.text, data)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutput {
    pub images: Tensor<f32>,
    /// Per-image texts after the attack (the clean ones unless the method
    /// perturbs text).
    pub texts: Vec<Vec<TokenSeq>>,
    pub traces: Vec<AttackTrace>,
    pub targets: Option<Vec<usize>>,
    pub patches: Option<Vec<PatchSpec>>,
}

/// A uniformly random row of `m` outside `own`, per example.
fn random_targets(labels: &[Vec<usize>], m: usize, seed: u64) -> CliResult<Vec<usize>> {
    let stream = RngStream::new(seed, TARGET_STREAM);
    labels
        .iter()
        .enumerate()
        .map(|(i, own)| {
            let free: Vec<usize> = (0..m).filter(|k| !own.contains(k)).collect();
            if free.is_empty() {
                return Err(CliError::config(format!("example {i} has no untargeted row")));
            }
            Ok(free[stream.child(i as u64).rng().random_range(0..free.len())])
        })
        .collect()
}

pub fn run_attack(attack: &AttackSection, models: &Models, data: &Data, seed: u64) -> CliResult<AttackOutput> {
    let cfg = attack.image_config(seed);
    let clean_texts = data.captions.clone();
    let img = &models.image;
    let plain = |(images, traces): (Tensor<f32>, Vec<AttackTrace>)| AttackOutput {
        images,
        texts: clean_texts.clone(),
        traces,
        targets: None,
        patches: None,
    };
    let guided = || -> CliResult<GuidanceSet<f32>> {
        let set = guidance(attack.guidance, &attack.prompt_template, models, data)?;
        Ok(match attack.topk {
            Some(k) => topk_guidance(&set, &forward_image(img, &data.images)?, k, attack.topk_union)?,
            None => set,
        })
    };
    Ok(match attack.method {
        Method::Fga => plain(fga(img, &data.images, &guided()?, &cfg, None)?),
        Method::Fda => {
            let clean = forward_image(img, &data.images)?;
            plain(pgd_attack(img, &data.images, &Deviation { clean: &clean }, &cfg)?)
        }
        Method::FgaT => {
            let txt_cfg = TextAttackConfig {
                budget: attack.text_budget,
                candidates: attack.text_candidates.clone(),
                objective: TextObjective::CosineDeviation,
                seed,
            };
            let out = fga_t(
                img,
                &models.text,
                &data.vocab,
                &data.images,
                &data.captions,
                &cfg,
                &txt_cfg,
                attack.minibatch,
            )?;
            AttackOutput {
                images: out.images,
                texts: out.texts,
                traces: out.traces,
                targets: None,
                patches: None,
            }
        }
        Method::Patch => {
            let set = guided()?;
            let targets = random_targets(&set.labels, set.m(), seed)?;
            let pcfg = attack.patch.config(attack.temperature, seed);
            let (images, traces, masks) = fga_targeted_patch(img, &data.images, &set.w, &targets, &pcfg)?;
            AttackOutput {
                images,
                texts: clean_texts,
                traces,
                targets: Some(targets),
                patches: Some(masks),
            }
        }
    })
}

/// Zero-shot and retrieval scores of one (images, texts) state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scores {
    pub zeroshot: ZeroShot,
    pub retrieval: Retrieval,
    /// `B × classes` cosine similarities to the prompt embeddings.
    #[serde(skip)]
    pub class_scores: Tensor<f32>,
}

impl Scores {
    pub fn report(&self) -> MetricsReport {
        MetricsReport::default()
            .with_zeroshot(&self.zeroshot)
            .with_retrieval(&self.retrieval)
    }
}

/// Scores `images` with per-image `texts` against `data`'s labels and
/// captions.
pub fn score(models: &Models, data: &Data, images: &Tensor<f32>, texts: &[Vec<TokenSeq>], eval: &EvalConfig) -> CliResult<Scores> {
    let base = RetrievalTruth::from_dataset(data);
    if texts.len() != data.len() || texts.iter().zip(&data.captions).any(|(a, b)| a.len() != b.len()) {
        return Err(CliError::config("text sets do not match the dataset's caption layout"));
    }
    let truth = base.with_texts(base.flatten(texts))?;
    let prompts = prompt_guidance(&models.text, &data.vocab, &data.class_names, &eval.prompt_template, &data.labels)?;
    let e_v = forward_image(&models.image, images)?;
    let zeroshot = zeroshot_from_embeddings(&e_v, &prompts.w, &data.labels)?;
    let e_t = forward_text(&models.text, &truth.texts)?;
    let retrieval = retrieval_from_embeddings(&e_v, &e_t, &truth, &eval.ks)?;
    let rows: Vec<Vec<f32>> = e_v.rows().map(|e| prompts.w.rows().map(|w| cosine(e, w)).collect()).collect();
    Ok(Scores {
        zeroshot,
        retrieval,
        class_scores: Tensor::from_rows(&rows)?,
    })
}

/// Attack success rates on top-1 and both R@1 directions.
pub fn success_rates(clean: &Scores, adv: &Scores) -> CliResult<BTreeMap<String, Option<f64>>> {
    Ok(BTreeMap::from([
        ("top1".to_string(), attack_success_rate(&clean.zeroshot.hit1, &adv.zeroshot.hit1)?),
        ("tr_r1".to_string(), attack_success_rate(&clean.retrieval.tr_hit1, &adv.retrieval.tr_hit1)?),
        ("ir_r1".to_string(), attack_success_rate(&clean.retrieval.ir_hit1, &adv.retrieval.ir_hit1)?),
    ]))
}

pub fn confusion(clean: &Scores, adv: &Scores, data: &Data) -> CliResult<Confusion> {
    Ok(proximity_confusion(&clean.class_scores, &data.labels, &adv.zeroshot.predictions)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferResult {
    pub variant: String,
    /// `[source][target]` attack success rates.
    pub tr_r1: Vec<Vec<Option<f64>>>,
    pub ir_r1: Vec<Vec<Option<f64>>>,
    pub top1: Vec<Vec<Option<f64>>>,
    pub mean_cross_tr_r1: Option<f64>,
}

/// Crafts each variant on every model and scores it on every model.
pub fn transfer(
    models: &[Models],
    data: &Data,
    attack: &AttackSection,
    variants: &[TransferVariant],
    eval: &EvalConfig,
    seed: u64,
) -> CliResult<Vec<TransferResult>> {
    let clean = models
        .iter()
        .map(|m| score(m, data, &data.images, &data.captions, eval))
        .collect::<CliResult<Vec<_>>>()?;
    let mut out = Vec::with_capacity(variants.len());
    for &v in variants {
        let a = v.apply(attack);
        let crafted = models
            .iter()
            .map(|m| run_attack(&a, m, data, seed))
            .collect::<CliResult<Vec<_>>>()?;
        let mut adv_scores: BTreeMap<(usize, usize), BTreeMap<String, Option<f64>>> = BTreeMap::new();
        for (s, adv) in crafted.iter().enumerate() {
            for (t, m) in models.iter().enumerate() {
                let sc = score(m, data, &adv.images, &adv.texts, eval)?;
                adv_scores.insert((s, t), success_rates(&clean[t], &sc)?);
            }
        }
        let matrix = |key: &str| {
            transfer_eval(models.len(), Ok, |t, &s| Ok(adv_scores[&(s, t)][key]))
        };
        let tr_r1 = matrix("tr_r1")?;
        out.push(TransferResult {
            variant: v.name().to_string(),
            mean_cross_tr_r1: mean_off_diagonal(&tr_r1),
            tr_r1,
            ir_r1: matrix("ir_r1")?,
            top1: matrix("top1")?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub sweep: String,
    pub epsilon_255: f64,
    pub steps: usize,
    pub top1: f64,
    pub tr_r1: f64,
    pub ir_r1: f64,
}

/// Budget sweep at a fixed step count, then step sweep at a fixed budget.
pub fn ablation(
    models: &Models,
    data: &Data,
    attack: &AttackSection,
    grid: &AblateConfig,
    eval: &EvalConfig,
    seed: u64,
) -> CliResult<Vec<AblationRow>> {
    let run = |sweep: &str, eps: f64, steps: usize| -> fgakit::Result<AblationRow> {
        let mut a = attack.clone();
        a.epsilon = eps / 255.0;
        a.steps = steps;
        let adv = run_attack(&a, models, data, seed).map_err(into_core)?;
        let s = score(models, data, &adv.images, &adv.texts, eval).map_err(into_core)?;
        Ok(AblationRow {
            sweep: sweep.to_string(),
            epsilon_255: eps,
            steps,
            top1: s.zeroshot.top1,
            tr_r1: s.retrieval.tr[&1],
            ir_r1: s.retrieval.ir[&1],
        })
    };
    if !eval.ks.contains(&1) {
        return Err(CliError::Config {
            path: "eval.ks".into(),
            message: "the ablation reports R@1, so ks must contain 1".into(),
        });
    }
    let by_eps = ablation_sweep(&grid.epsilons_255, &[grid.sweep_steps], |e, s| run("epsilon", e, s))?;
    let by_steps = ablation_sweep(&[grid.sweep_epsilon_255], &grid.steps, |e, s| run("steps", e, s))?;
    Ok(by_eps.into_iter().chain(by_steps).map(|c| c.result).collect())
}

fn into_core(e: CliError) -> fgakit::Error {
    match e {
        CliError::Core(c) => c,
        CliError::Config { path, message } => fgakit::Error::Config(format!("{path}: {message}")),
        other => fgakit::Error::Format(other.to_string()),
    }
}
