//! Metrics and experiment protocols: zero-shot accuracy, retrieval recall,
//! attack success rate, the runner-up confusion matrix, transfer matrices
//! and budget sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::guidance::GuidanceSet;
use crate::models::{forward_image, ImageEncoder};
use crate::numkit::{cosine, rank_descending, Tensor};
use crate::scalar::Scalar;
use crate::synthdata::{PairedDataset, TokenSeq};

/// Budgets of the ε sweep on the byte scale (divide by 255).
pub const EPS_GRID_255: [f64; 6] = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0];
pub const STEP_GRID: [usize; 4] = [1, 3, 7, 10];
pub const RECALL_KS: [usize; 3] = [1, 5, 10];

fn similarity_rows<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<Vec<T>>> {
    if a.inner() != b.inner() {
        return Err(dim_err!("embedding dims {} vs {}", a.inner(), b.inner()));
    }
    Ok(a.rows().map(|x| b.rows().map(|y| cosine(x, y)).collect()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShot {
    pub top1: f64,
    pub top5: f64,
    pub predictions: Vec<usize>,
    pub hit1: Vec<bool>,
}

/// Classifies each embedding by its most cosine-similar row of `w`.
pub fn zeroshot_from_embeddings<T: Scalar>(e_v: &Tensor<T>, w: &Tensor<T>, labels: &[usize]) -> Result<ZeroShot> {
    if e_v.outer() != labels.len() {
        return Err(dim_err!("{} embeddings for {} labels", e_v.outer(), labels.len()));
    }
    let sims = similarity_rows(e_v, w)?;
    let (mut c1, mut c5) = (0usize, 0usize);
    let mut predictions = Vec::with_capacity(labels.len());
    let mut hit1 = Vec::with_capacity(labels.len());
    for (s, &y) in sims.iter().zip(labels) {
        let order = rank_descending(s);
        let top = order.first().copied().unwrap_or(0);
        predictions.push(top);
        hit1.push(top == y);
        c1 += usize::from(top == y);
        c5 += usize::from(order.iter().take(5).any(|&k| k == y));
    }
    let n = labels.len().max(1) as f64;
    Ok(ZeroShot {
        top1: c1 as f64 / n,
        top5: c5 as f64 / n,
        predictions,
        hit1,
    })
}

pub fn zeroshot_eval<T: Scalar>(
    img: &ImageEncoder<T>,
    images: &Tensor<T>,
    labels: &[usize],
    prompts: &GuidanceSet<T>,
) -> Result<ZeroShot> {
    zeroshot_from_embeddings(&forward_image(img, images)?, &prompts.w, labels)
}

/// The retrieval corpus of a dataset: every caption of every image in
/// order. Text `j` is relevant to image `i` when `i` owns it or when its
/// current content equals one of `i`'s captions, so identical captions are
/// shared and a perturbed text keeps only its owner unless it now reads
/// exactly like another image's caption.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalTruth {
    pub texts: Vec<TokenSeq>,
    pub owner: Vec<usize>,
    pub image_to_texts: Vec<Vec<usize>>,
    captions: Vec<Vec<TokenSeq>>,
}

impl RetrievalTruth {
    pub fn from_dataset<T: Scalar>(data: &PairedDataset<T>) -> Self {
        let mut texts = Vec::new();
        let mut owner = Vec::new();
        for (i, caps) in data.captions.iter().enumerate() {
            for c in caps {
                texts.push(c.clone());
                owner.push(i);
            }
        }
        Self::build(data.captions.clone(), texts, owner)
    }

    fn build(captions: Vec<Vec<TokenSeq>>, texts: Vec<TokenSeq>, owner: Vec<usize>) -> Self {
        let image_to_texts = captions
            .iter()
            .enumerate()
            .map(|(i, caps)| {
                (0..texts.len())
                    .filter(|&j| owner[j] == i || caps.contains(&texts[j]))
                    .collect()
            })
            .collect();
        Self {
            texts,
            owner,
            image_to_texts,
            captions,
        }
    }

    /// Same images and ownership over a replacement corpus, e.g. the
    /// adversarial versions of the texts in corpus order.
    pub fn with_texts(&self, texts: Vec<TokenSeq>) -> Result<Self> {
        if texts.len() != self.texts.len() {
            return Err(dim_err!("{} texts for a corpus of {}", texts.len(), self.texts.len()));
        }
        Ok(Self::build(self.captions.clone(), texts, self.owner.clone()))
    }

    /// Corpus layout regrouped per image, e.g. to attack each image's texts.
    pub fn per_image(&self) -> Vec<Vec<TokenSeq>> {
        let n = self.image_to_texts.len();
        let mut out = vec![Vec::new(); n];
        for (t, &o) in self.texts.iter().zip(&self.owner) {
            out[o].push(t.clone());
        }
        out
    }

    /// Inverse of [`per_image`](Self::per_image).
    pub fn flatten(&self, per_image: &[Vec<TokenSeq>]) -> Vec<TokenSeq> {
        let mut cursor = vec![0usize; per_image.len()];
        self.owner
            .iter()
            .map(|&o| {
                let t = per_image[o][cursor[o]].clone();
                cursor[o] += 1;
                t
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    /// Text retrieval (image query): recall at each k.
    pub tr: BTreeMap<usize, f64>,
    /// Image retrieval (text query).
    pub ir: BTreeMap<usize, f64>,
    pub tr_hit1: Vec<bool>,
    pub ir_hit1: Vec<bool>,
}

/// Recall@k in both directions, ranking by cosine with ties to the lower
/// index.
pub fn retrieval_from_embeddings<T: Scalar>(
    e_v: &Tensor<T>,
    e_t: &Tensor<T>,
    truth: &RetrievalTruth,
    ks: &[usize],
) -> Result<Retrieval> {
    let (b, n) = (e_v.outer(), e_t.outer());
    if truth.image_to_texts.len() != b || truth.texts.len() != n {
        return Err(dim_err!("{b} images / {n} texts do not match the retrieval corpus"));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > b.min(n)) {
        return Err(config_err!("recall k = {k} outside 1..={}", b.min(n)));
    }
    let sims = similarity_rows(e_v, e_t)?;
    let mut text_to_images = vec![Vec::new(); n];
    for (i, js) in truth.image_to_texts.iter().enumerate() {
        for &j in js {
            text_to_images[j].push(i);
        }
    }
    let tr_rank: Vec<usize> = (0..b)
        .map(|i| first_hit(&sims[i], &truth.image_to_texts[i]))
        .collect();
    let ir_rank: Vec<usize> = (0..n)
        .map(|j| {
            let col: Vec<T> = (0..b).map(|i| sims[i][j]).collect();
            first_hit(&col, &text_to_images[j])
        })
        .collect();
    let recall = |ranks: &[usize], k: usize| ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len().max(1) as f64;
    Ok(Retrieval {
        tr: ks.iter().map(|&k| (k, recall(&tr_rank, k))).collect(),
        ir: ks.iter().map(|&k| (k, recall(&ir_rank, k))).collect(),
        tr_hit1: tr_rank.iter().map(|&r| r == 0).collect(),
        ir_hit1: ir_rank.iter().map(|&r| r == 0).collect(),
    })
}

/// Rank of the best-ranked relevant item (`usize::MAX` if none).
fn first_hit<T: Scalar>(scores: &[T], relevant: &[usize]) -> usize {
    rank_descending(scores)
        .iter()
        .position(|j| relevant.contains(j))
        .unwrap_or(usize::MAX)
}

/// Fraction of clean successes that the attack turns into failures; `None`
/// when nothing succeeded on clean inputs.
pub fn attack_success_rate(clean: &[bool], adv: &[bool]) -> Result<Option<f64>> {
    if clean.len() != adv.len() {
        return Err(dim_err!("{} clean vs {} adversarial outcomes", clean.len(), adv.len()));
    }
    let successes = clean.iter().filter(|&&c| c).count();
    if successes == 0 {
        return Ok(None);
    }
    let flipped = clean.iter().zip(adv).filter(|&(&c, &a)| c && !a).count();
    Ok(Some(flipped as f64 / successes as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    /// Row: clean runner-up class. Column: adversarial prediction.
    pub matrix: Vec<Vec<u64>>,
    pub diagonal_mass: f64,
    /// `1 / (m − 1)`: the diagonal mass of uniformly random wrong answers.
    pub null_mass: f64,
}

/// Cross-tabulates each example's clean runner-up (best class other than
/// the true one) against its adversarial prediction.
pub fn proximity_confusion<T: Scalar>(clean_scores: &Tensor<T>, labels: &[usize], adv_preds: &[usize]) -> Result<Confusion> {
    let m = clean_scores.inner();
    if m < 2 {
        return Err(config_err!("confusion needs at least 2 classes"));
    }
    if clean_scores.outer() != labels.len() || labels.len() != adv_preds.len() {
        return Err(dim_err!("scores, labels and predictions disagree in length"));
    }
    let mut matrix = vec![vec![0u64; m]; m];
    for ((s, &y), &p) in clean_scores.rows().zip(labels).zip(adv_preds) {
        if y >= m || p >= m {
            return Err(config_err!("class index outside 0..{m}"));
        }
        let runner_up = rank_descending(s).into_iter().find(|&k| k != y).expect("m >= 2");
        matrix[runner_up][p] += 1;
    }
    let diag: u64 = (0..m).map(|k| matrix[k][k]).sum();
    Ok(Confusion {
        matrix,
        diagonal_mass: diag as f64 / labels.len().max(1) as f64,
        null_mass: 1.0 / (m - 1) as f64,
    })
}

/// Crafts adversarial inputs on each source model and scores them on each
/// target: `cell[s][t] = score(t, craft(s))`.
pub fn transfer_eval<A>(
    models: usize,
    craft: impl Fn(usize) -> Result<A>,
    score: impl Fn(usize, &A) -> Result<Option<f64>>,
) -> Result<Vec<Vec<Option<f64>>>> {
    if models < 2 {
        return Err(config_err!("transfer evaluation needs at least 2 models"));
    }
    (0..models)
        .map(|s| {
            let adv = craft(s)?;
            (0..models).map(|t| score(t, &adv)).collect()
        })
        .collect()
}

/// Mean of the off-diagonal cells that are defined.
pub fn mean_off_diagonal(matrix: &[Vec<Option<f64>>]) -> Option<f64> {
    let vals: Vec<f64> = matrix
        .iter()
        .enumerate()
        .flat_map(|(s, row)| row.iter().enumerate().filter(move |(t, _)| *t != s).filter_map(|(_, v)| *v))
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell<R> {
    /// On the `[0, 1]` pixel scale.
    pub epsilon: f64,
    pub steps: usize,
    pub result: R,
}

/// Runs `run` on the full cross-product of budgets and step counts.
pub fn ablation_sweep<R>(
    epsilons: &[f64],
    steps: &[usize],
    run: impl Fn(f64, usize) -> Result<R>,
) -> Result<Vec<AblationCell<R>>> {
    if epsilons.is_empty() || steps.is_empty() {
        return Err(config_err!("ablation grids must be non-empty"));
    }
    let mut cells = Vec::with_capacity(epsilons.len() * steps.len());
    for &e in epsilons {
        for &s in steps {
            cells.push(AblationCell {
                epsilon: e,
                steps: s,
                result: run(e, s)?,
            });
        }
    }
    Ok(cells)
}

/// Summary metrics of one evaluation run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top5: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tr: Option<BTreeMap<usize, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ir: Option<BTreeMap<usize, f64>>,
    /// Attack success rate per metric, e.g. `"top1"`, `"tr_r1"`.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub asr: BTreeMap<String, Option<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transfer: Option<Vec<Vec<Option<f64>>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confusion: Option<Confusion>,
}

impl MetricsReport {
    pub fn with_zeroshot(mut self, z: &ZeroShot) -> Self {
        self.top1 = Some(z.top1);
        self.top5 = Some(z.top5);
        self
    }

    pub fn with_retrieval(mut self, r: &Retrieval) -> Self {
        self.tr = Some(r.tr.clone());
        self.ir = Some(r.ir.clone());
        self
    }
}

/// CSV with a header row; `None` cells are left empty.
pub fn matrix_csv<V: std::fmt::Display>(header: &[String], rows: &[Vec<Option<V>>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|c| c.as_ref().map_or(String::new(), |v| v.to_string())).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}
