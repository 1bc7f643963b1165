//! Greedy token-substitution text attack and the text-then-image FGA-T
//! pipeline.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::imgattack::{pgd_attack, AttackConfig, AttackTrace};
use crate::losses::{cosine_deviation, fused_deviation, set_guidance_batch, Guidance};
use crate::models::{forward_image, forward_text, FusionHead, ImageEncoder, TextEncoder};
use crate::numkit::{cosine, image_dims, rank_descending, Tensor};
use crate::scalar::Scalar;
use crate::synthdata::{TokenSeq, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateSource {
    Synonyms,
    /// The `k` tokens with the most similar embedding rows.
    Knn { k: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextObjective {
    CosineDeviation,
    FusedDeviation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextAttackConfig {
    /// Maximum number of substituted tokens.
    pub budget: usize,
    pub candidates: CandidateSource,
    pub objective: TextObjective,
    pub seed: u64,
}

impl Default for TextAttackConfig {
    fn default() -> Self {
        Self {
            budget: 1,
            candidates: CandidateSource::Synonyms,
            objective: TextObjective::CosineDeviation,
            seed: 0,
        }
    }
}

/// Substitution candidates for every token id, in trial order.
pub fn candidate_table<T: Scalar>(source: &CandidateSource, vocab: &Vocab, txt: &TextEncoder<T>) -> Result<Vec<Vec<usize>>> {
    match *source {
        CandidateSource::Synonyms => Ok((0..vocab.len()).map(|id| vocab.synonyms(id).to_vec()).collect()),
        CandidateSource::Knn { k } => {
            if k == 0 {
                return Err(config_err!("knn candidate count must be >= 1"));
            }
            if txt.table.outer() != vocab.len() {
                return Err(config_err!("text encoder has {} tokens, vocabulary {}", txt.table.outer(), vocab.len()));
            }
            let unk = vocab.unk_id();
            Ok((0..vocab.len())
                .map(|id| {
                    let sims: Vec<T> = (0..vocab.len())
                        .map(|j| cosine(txt.token_embedding(id), txt.token_embedding(j)))
                        .collect();
                    rank_descending(&sims)
                        .into_iter()
                        .filter(|&j| j != id && j != unk)
                        .take(k)
                        .collect()
                })
                .collect())
        }
    }
}

/// Positions ordered by how much replacing the token with `unk` raises the
/// objective, largest first, ties by position.
pub fn token_importance<T: Scalar>(seq: &TokenSeq, unk: usize, f: impl Fn(&TokenSeq) -> Result<T>) -> Result<Vec<usize>> {
    let base = f(seq)?;
    let gains = (0..seq.len())
        .map(|p| Ok(f(&seq.replaced(p, unk))? - base))
        .collect::<Result<Vec<T>>>()?;
    Ok(rank_descending(&gains))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubstitutionOutcome<T> {
    pub text: TokenSeq,
    pub clean_value: T,
    pub value: T,
    pub changed: usize,
    /// No position had any candidate to try.
    pub no_candidates: bool,
}

/// Visits positions in importance order; at each, evaluates every
/// candidate and keeps the best one if it strictly improves the current
/// objective. Stops after `budget` substitutions.
pub fn greedy_substitute<T: Scalar>(
    seq: &TokenSeq,
    unk: usize,
    candidates: &[Vec<usize>],
    budget: usize,
    f: impl Fn(&TokenSeq) -> Result<T>,
) -> Result<SubstitutionOutcome<T>> {
    let clean_value = f(seq)?;
    let mut out = SubstitutionOutcome {
        text: seq.clone(),
        clean_value,
        value: clean_value,
        changed: 0,
        no_candidates: seq.ids.iter().all(|&id| candidates.get(id).is_none_or(Vec::is_empty)),
    };
    if budget == 0 || out.no_candidates {
        return Ok(out);
    }
    for pos in token_importance(seq, unk, &f)? {
        if out.changed == budget {
            break;
        }
        let current = out.text.ids[pos];
        let mut best: Option<(T, TokenSeq)> = None;
        for &c in candidates.get(current).map_or(&[][..], Vec::as_slice) {
            if c == current {
                continue;
            }
            let trial = out.text.replaced(pos, c);
            let v = f(&trial)?;
            if best.as_ref().is_none_or(|(bv, _)| v > *bv) {
                best = Some((v, trial));
            }
        }
        if let Some((v, trial)) = best {
            if v > out.value {
                out.value = v;
                out.text = trial;
                out.changed += 1;
            }
        }
    }
    Ok(out)
}

/// `t' ↦ −cos(E_t(t'), e_v)`.
pub fn cosine_text_objective<'a, T: Scalar>(txt: &'a TextEncoder<T>, e_v: &'a [T]) -> impl Fn(&TokenSeq) -> Result<T> + 'a {
    move |t| Ok(cosine_deviation(&txt.embed_text(t)?, e_v)?.value)
}

/// `t' ↦ ‖E_m(e_v, E_t(t')) − f_clean‖`.
pub fn fused_text_objective<'a, T: Scalar>(
    txt: &'a TextEncoder<T>,
    head: &'a FusionHead<T>,
    e_v: &'a [T],
    f_clean: &'a [T],
) -> impl Fn(&TokenSeq) -> Result<T> + 'a {
    move |t| Ok(fused_deviation(&head.fused(e_v, &txt.embed_text(t)?)?, f_clean)?.value)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FgaTOutput<T> {
    pub images: Tensor<T>,
    /// `T_i'`, aligned with the input text sets.
    pub texts: Vec<Vec<TokenSeq>>,
    pub traces: Vec<AttackTrace>,
}

/// Text first, then image: every matched text is attacked against its
/// image's clean embedding, then each minibatch of images is attacked with
/// set-level guidance over the union of the minibatch's clean and
/// adversarial texts.
#[allow(clippy::too_many_arguments)]
pub fn fga_t<T: Scalar>(
    img: &ImageEncoder<T>,
    txt: &TextEncoder<T>,
    vocab: &Vocab,
    images: &Tensor<T>,
    texts: &[Vec<TokenSeq>],
    img_cfg: &AttackConfig,
    txt_cfg: &TextAttackConfig,
    minibatch: usize,
) -> Result<FgaTOutput<T>> {
    let (b, ..) = image_dims(images)?;
    if texts.len() != b {
        return Err(config_err!("{} text sets for {b} images", texts.len()));
    }
    if let Some(i) = texts.iter().position(Vec::is_empty) {
        return Err(config_err!("image {i} has no matched text"));
    }
    if minibatch == 0 {
        return Err(config_err!("minibatch must be >= 1"));
    }
    let candidates = candidate_table(&txt_cfg.candidates, vocab, txt)?;
    let e_v = forward_image(img, images)?;
    let adv_texts = (0..b)
        .into_par_iter()
        .map(|i| {
            texts[i]
                .iter()
                .map(|t| {
                    let f = cosine_text_objective(txt, e_v.row(i));
                    Ok(greedy_substitute(t, vocab.unk_id(), &candidates, txt_cfg.budget, f)?.text)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let per_image = images.len() / b.max(1);
    let mut data = Vec::with_capacity(images.len());
    let mut traces = Vec::with_capacity(b);
    for start in (0..b).step_by(minibatch) {
        let end = (start + minibatch).min(b);
        let mut shape = images.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::new(shape, images.data()[start * per_image..end * per_image].to_vec())?;
        let (union, own) = set_guidance_batch(&texts[start..end], &adv_texts[start..end])?;
        let w = forward_text(txt, &union)?;
        let objective = Guidance {
            w: &w,
            labels: &own,
            temperature: T::c(img_cfg.temperature),
        };
        let (adv, tr) = pgd_attack(img, &chunk, &objective, img_cfg)?;
        data.extend_from_slice(adv.data());
        traces.extend(tr);
    }
    Ok(FgaTOutput {
        images: Tensor::new(images.shape().to_vec(), data)?,
        texts: adv_texts,
        traces,
    })
}
