//! Guiding vectors `W` (one per row) and the per-example guiding labels the
//! feature guidance attack repels from.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, format_err, Error, Result};
use crate::models::{forward_image, forward_text, ImageEncoder, TextEncoder};
use crate::numkit::{cosine, Tensor};
use crate::scalar::Scalar;
use crate::synthdata::{tokenize, PairedDataset, TokenSeq, Vocab};
use crate::tensorfile::TensorFile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceSource {
    ClassMean,
    Prompt,
    DatasetTexts,
    Topk,
    /// Rows of a classification head.
    HeadWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceSet<T> {
    /// `m × d`.
    pub w: Tensor<T>,
    pub labels: Vec<Vec<usize>>,
    pub source: GuidanceSource,
    /// Pairs of row indices holding identical vectors.
    pub duplicate_rows: Vec<(usize, usize)>,
}

fn find_duplicates<T: Scalar>(w: &Tensor<T>) -> Vec<(usize, usize)> {
    let m = w.outer();
    let mut out = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            if w.row(i) == w.row(j) {
                out.push((i, j));
            }
        }
    }
    out
}

impl<T: Scalar> GuidanceSet<T> {
    /// Validates that every label indexes a row and that every example keeps
    /// at least one unguided row (`1 ≤ |labels| ≤ m − 1`).
    pub fn new(w: Tensor<T>, labels: Vec<Vec<usize>>, source: GuidanceSource) -> Result<Self> {
        if w.rank() != 2 {
            return Err(Error::Construction(format!("guiding matrix must be 2-D, got {:?}", w.shape())));
        }
        let m = w.outer();
        for (i, l) in labels.iter().enumerate() {
            if l.is_empty() || l.len() + 1 > m {
                return Err(Error::Construction(format!(
                    "example {i} has {} guiding labels; need 1..={} for {m} guiding vectors",
                    l.len(),
                    m.saturating_sub(1)
                )));
            }
            if let Some(&bad) = l.iter().find(|&&y| y >= m) {
                return Err(Error::Construction(format!("example {i}: label {bad} >= {m}")));
            }
        }
        let duplicate_rows = find_duplicates(&w);
        Ok(Self {
            w,
            labels,
            source,
            duplicate_rows,
        })
    }

    pub fn m(&self) -> usize {
        self.w.outer()
    }

    pub fn dim(&self) -> usize {
        self.w.inner()
    }

    pub fn with_labels(&self, labels: Vec<Vec<usize>>, source: GuidanceSource) -> Result<Self> {
        Self::new(self.w.clone(), labels, source)
    }

    /// Rows `i` and `k ∈ subset` of the labels, for attacking a slice of the
    /// examples.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let labels = indices
            .iter()
            .map(|&i| {
                self.labels
                    .get(i)
                    .cloned()
                    .ok_or_else(|| config_err!("example {i} outside guidance of {}", self.labels.len()))
            })
            .collect::<Result<_>>()?;
        Self::new(self.w.clone(), labels, self.source)
    }
}

/// Mean embedding per class, with each example guided away from its own
/// class mean.
pub fn class_mean_guidance<T: Scalar>(enc: &ImageEncoder<T>, data: &PairedDataset<T>) -> Result<GuidanceSet<T>> {
    let emb = forward_image(enc, &data.images)?;
    class_mean_from_embeddings(&emb, &data.labels, &data.class_names)
}

pub fn class_mean_from_embeddings<T: Scalar>(
    emb: &Tensor<T>,
    labels: &[usize],
    class_names: &[String],
) -> Result<GuidanceSet<T>> {
    let k = class_names.len();
    let d = emb.inner();
    let mut sums = vec![vec![T::zero(); d]; k];
    let mut counts = vec![0usize; k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Construction(format!("label {y} >= {k} classes")));
        }
        counts[y] += 1;
        for (s, &v) in sums[y].iter_mut().zip(emb.row(i)) {
            *s += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::Construction(format!("class '{}' has no images", class_names[c])));
        }
        let inv = T::one() / T::from_usize_lossy(n);
        sums[c].iter_mut().for_each(|s| *s *= inv);
    }
    GuidanceSet::new(
        Tensor::from_rows(&sums)?,
        labels.iter().map(|&y| vec![y]).collect(),
        GuidanceSource::ClassMean,
    )
}

/// Instantiates `template` (containing one `{}`) with a class name.
pub fn prompt(template: &str, class_name: &str) -> Result<String> {
    if template.matches("{}").count() != 1 {
        return Err(config_err!("prompt template '{template}' must contain exactly one '{{}}'"));
    }
    Ok(template.replace("{}", class_name))
}

/// Text embeddings of `template` filled with every class name; example `i`
/// is guided by its class `labels[i]`.
pub fn prompt_guidance<T: Scalar>(
    txt: &TextEncoder<T>,
    vocab: &Vocab,
    class_names: &[String],
    template: &str,
    labels: &[usize],
) -> Result<GuidanceSet<T>> {
    let seqs = class_names
        .iter()
        .map(|c| Ok(tokenize(&prompt(template, c)?, vocab)))
        .collect::<Result<Vec<_>>>()?;
    GuidanceSet::new(
        forward_text(txt, &seqs)?,
        labels.iter().map(|&y| vec![y]).collect(),
        GuidanceSource::Prompt,
    )
}

/// Distinct captions of a dataset in first-seen order, and for each image
/// the indices of its own captions in that list.
pub fn unique_captions<T: Scalar>(data: &PairedDataset<T>) -> (Vec<TokenSeq>, Vec<Vec<usize>>) {
    let mut index: HashMap<&TokenSeq, usize> = HashMap::new();
    let mut texts = Vec::new();
    let mut owners = Vec::with_capacity(data.len());
    for caps in &data.captions {
        let mut own = Vec::new();
        for c in caps {
            let id = *index.entry(c).or_insert_with(|| {
                texts.push(c.clone());
                texts.len() - 1
            });
            if !own.contains(&id) {
                own.push(id);
            }
        }
        owners.push(own);
    }
    (texts, owners)
}

/// Embeddings of every distinct caption; each image is guided by its own.
pub fn dataset_text_guidance<T: Scalar>(txt: &TextEncoder<T>, data: &PairedDataset<T>) -> Result<GuidanceSet<T>> {
    let (texts, owners) = unique_captions(data);
    GuidanceSet::new(forward_text(txt, &texts)?, owners, GuidanceSource::DatasetTexts)
}

/// Indices of the `k` rows of `w` most cosine-similar to `emb`, most similar
/// first, ties to the lower index.
pub fn topk_match_labels<T: Scalar>(emb: &[T], w: &Tensor<T>, k: usize) -> Result<Vec<usize>> {
    let m = w.outer();
    if k == 0 || k + 1 > m {
        return Err(config_err!("k = {k} outside 1..={}", m.saturating_sub(1)));
    }
    if emb.len() != w.inner() {
        return Err(crate::error::dim_err!("embedding has {} entries, rows have {}", emb.len(), w.inner()));
    }
    let sims: Vec<T> = w.rows().map(|r| cosine(emb, r)).collect();
    let mut order = crate::numkit::rank_descending(&sims);
    order.truncate(k);
    Ok(order)
}

/// Replaces the labels of `set` with top-`k` matches of each image
/// embedding; with `union`, existing labels are kept and matches appended.
pub fn topk_guidance<T: Scalar>(set: &GuidanceSet<T>, image_emb: &Tensor<T>, k: usize, union: bool) -> Result<GuidanceSet<T>> {
    let labels = image_emb
        .rows()
        .enumerate()
        .map(|(i, e)| {
            let mut l = if union { set.labels.get(i).cloned().unwrap_or_default() } else { Vec::new() };
            for y in topk_match_labels(e, &set.w, k)? {
                if !l.contains(&y) {
                    l.push(y);
                }
            }
            Ok(l)
        })
        .collect::<Result<_>>()?;
    set.with_labels(labels, GuidanceSource::Topk)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelSidecar {
    source: GuidanceSource,
    labels: Vec<Vec<usize>>,
}

/// Writes `w` as a tensor file and the labels to the `.json` sidecar.
pub fn save_guidance<T: Scalar>(set: &GuidanceSet<T>, path: &Path) -> Result<()> {
    let mut tf = TensorFile::new();
    tf.insert("w", &set.w)?;
    tf.write(path)?;
    let side = LabelSidecar {
        source: set.source,
        labels: set.labels.clone(),
    };
    fs::write(path.with_extension("json"), serde_json::to_string(&side)? + "\n")?;
    Ok(())
}

pub fn load_guidance<T: Scalar>(path: &Path) -> Result<GuidanceSet<T>> {
    let w = TensorFile::read(path)?.get::<T>("w")?;
    let side: LabelSidecar = serde_json::from_slice(&fs::read(path.with_extension("json"))?)?;
    GuidanceSet::new(w, side.labels, side.source).map_err(|e| format_err!("{e}"))
}
