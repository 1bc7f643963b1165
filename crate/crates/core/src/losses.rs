//! Attack objectives over embeddings.
//!
//! Conventions: `loss_gui` and `loss_dev` are the quantities the attacker
//! maximizes; `loss_gui_targeted` is the log-probability of the target,
//! also maximized. Every image-level objective implements [`Objective`],
//! which returns a value to maximize together with its gradient with respect
//! to the embedding.

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{config_err, dim_err, Error, Result};
use crate::numkit::{dot, log_softmax, lp_norm, softmax, Norm, Tensor};
use crate::scalar::Scalar;

/// A scalar loss with an optional per-term breakdown (per guiding label or
/// per scale).
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<T> {
    pub value: T,
    pub terms: Vec<T>,
}

impl<T: Scalar> LossValue<T> {
    fn scalar(value: T) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {value}")));
        }
        Ok(Self { value, terms: Vec::new() })
    }
}

fn same_len<T>(a: &[T], b: &[T]) -> Result<()> {
    if a.len() != b.len() {
        return Err(dim_err!("vectors of length {} and {}", a.len(), b.len()));
    }
    Ok(())
}

/// `−e_adv · e_clean`.
pub fn loss_dev<T: Scalar>(e_adv: &[T], e_clean: &[T]) -> Result<LossValue<T>> {
    same_len(e_adv, e_clean)?;
    LossValue::scalar(-dot(e_adv, e_clean))
}

pub fn grad_dev<T: Scalar>(e_clean: &[T]) -> Vec<T> {
    e_clean.iter().map(|&v| -v).collect()
}

fn logits<T: Scalar>(e: &[T], w: &Tensor<T>, temperature: T) -> Result<Vec<T>> {
    if w.rank() != 2 || w.inner() != e.len() {
        return Err(dim_err!("embedding of length {} against guiding matrix {:?}", e.len(), w.shape()));
    }
    let inv = T::one() / temperature;
    Ok(w.rows().map(|r| dot(e, r) * inv).collect())
}

fn check_labels(labels: &[usize], m: usize) -> Result<()> {
    if labels.is_empty() {
        return Err(config_err!("guiding label list is empty"));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= m) {
        return Err(config_err!("guiding label {y} >= {m}"));
    }
    Ok(())
}

/// `−(1/n) Σ_i log softmax(e·W / τ)[y_i]`, with one term per label.
pub fn loss_gui_temp<T: Scalar>(e: &[T], w: &Tensor<T>, labels: &[usize], temperature: T) -> Result<LossValue<T>> {
    let z = logits(e, w, temperature)?;
    check_labels(labels, z.len())?;
    let ls = log_softmax(&z)?;
    let terms: Vec<T> = labels.iter().map(|&y| -ls[y]).collect();
    let value = terms.iter().copied().sum::<T>() / T::from_usize_lossy(labels.len());
    let mut out = LossValue::scalar(value)?;
    out.terms = terms;
    Ok(out)
}

pub fn loss_gui<T: Scalar>(e: &[T], w: &Tensor<T>, labels: &[usize]) -> Result<LossValue<T>> {
    loss_gui_temp(e, w, labels, T::one())
}

/// Closed-form gradient of [`loss_gui_temp`]:
/// `(−(1/n) Σ_i ω_{y_i} + Σ_k p_k ω_k) / τ`.
pub fn grad_gui_embedding_temp<T: Scalar>(e: &[T], w: &Tensor<T>, labels: &[usize], temperature: T) -> Result<Vec<T>> {
    let z = logits(e, w, temperature)?;
    check_labels(labels, z.len())?;
    let p = softmax(&z)?;
    let inv_n = T::one() / T::from_usize_lossy(labels.len());
    let mut coef = p;
    for &y in labels {
        coef[y] -= inv_n;
    }
    Ok(weighted_rows(w, &coef, T::one() / temperature))
}

pub fn grad_gui_embedding<T: Scalar>(e: &[T], w: &Tensor<T>, labels: &[usize]) -> Result<Vec<T>> {
    grad_gui_embedding_temp(e, w, labels, T::one())
}

fn weighted_rows<T: Scalar>(w: &Tensor<T>, coef: &[T], scale: T) -> Vec<T> {
    let mut g = vec![T::zero(); w.inner()];
    for (row, &c) in w.rows().zip(coef) {
        crate::numkit::axpy(c * scale, row, &mut g);
    }
    g
}

/// `log softmax(e·W / τ)[target]` (at most zero).
pub fn loss_gui_targeted_temp<T: Scalar>(e: &[T], w: &Tensor<T>, target: usize, temperature: T) -> Result<LossValue<T>> {
    let z = logits(e, w, temperature)?;
    check_labels(&[target], z.len())?;
    LossValue::scalar(log_softmax(&z)?[target])
}

pub fn loss_gui_targeted<T: Scalar>(e: &[T], w: &Tensor<T>, target: usize) -> Result<LossValue<T>> {
    loss_gui_targeted_temp(e, w, target, T::one())
}

/// `(ω_target − Σ_k p_k ω_k) / τ`.
pub fn grad_gui_targeted_temp<T: Scalar>(e: &[T], w: &Tensor<T>, target: usize, temperature: T) -> Result<Vec<T>> {
    let z = logits(e, w, temperature)?;
    check_labels(&[target], z.len())?;
    let mut coef: Vec<T> = softmax(&z)?.into_iter().map(|p| -p).collect();
    coef[target] += T::one();
    Ok(weighted_rows(w, &coef, T::one() / temperature))
}

/// Set-level guidance: `own` indexes the example's matched texts and their
/// adversarial versions inside the batch-wide text matrix `w_batch`;
/// repeated entries each contribute a term.
pub fn loss_set_gui<T: Scalar>(e: &[T], w_batch: &Tensor<T>, own: &[usize]) -> Result<LossValue<T>> {
    loss_gui(e, w_batch, own)
}

/// Union layout for set-level guidance. `texts[i]` and `adv_texts[i]` are
/// the keys (token sequences, say) of `T_i` and `T_i'`. Returns the distinct
/// keys in first-seen order over `T_1, T_1', T_2, T_2', ...` together with
/// each example's own indices; a key shared by several examples is stored
/// once and listed by all of them, and repeats within one example stay
/// repeated in its own list.
pub fn set_guidance_batch<K: Clone + Eq + Hash>(texts: &[Vec<K>], adv_texts: &[Vec<K>]) -> Result<(Vec<K>, Vec<Vec<usize>>)> {
    if texts.len() != adv_texts.len() {
        return Err(dim_err!("{} clean vs {} adversarial text sets", texts.len(), adv_texts.len()));
    }
    let mut keys = Vec::new();
    let mut index: HashMap<K, usize> = HashMap::new();
    let mut own = Vec::with_capacity(texts.len());
    for (t, a) in texts.iter().zip(adv_texts) {
        let mut mine = Vec::with_capacity(t.len() + a.len());
        for k in t.iter().chain(a) {
            let id = *index.entry(k.clone()).or_insert_with(|| {
                keys.push(k.clone());
                keys.len() - 1
            });
            mine.push(id);
        }
        if mine.is_empty() {
            return Err(config_err!("example without matched texts"));
        }
        own.push(mine);
    }
    Ok((keys, own))
}

/// `−cos(e_t_adv, e_v)`.
pub fn cosine_deviation<T: Scalar>(e_t_adv: &[T], e_v: &[T]) -> Result<LossValue<T>> {
    same_len(e_t_adv, e_v)?;
    let na = lp_norm(e_t_adv, Norm::L2);
    let nb = lp_norm(e_v, Norm::L2);
    if na == T::zero() || nb == T::zero() {
        return Err(Error::Numeric("cosine of a zero-norm vector".into()));
    }
    LossValue::scalar(-dot(e_t_adv, e_v) / (na * nb))
}

/// `‖f_adv − f_clean‖₂`.
pub fn fused_deviation<T: Scalar>(f_adv: &[T], f_clean: &[T]) -> Result<LossValue<T>> {
    same_len(f_adv, f_clean)?;
    let d: Vec<T> = f_adv.iter().zip(f_clean).map(|(&a, &b)| a - b).collect();
    LossValue::scalar(lp_norm(&d, Norm::L2))
}

/// An objective the image attack maximizes, evaluated on the embedding of
/// example `index`.
pub trait Objective<T: Scalar>: Sync {
    fn value_grad(&self, index: usize, e: &[T]) -> Result<(T, Vec<T>)>;
}

/// Feature deviation against per-example clean embeddings.
pub struct Deviation<'a, T> {
    pub clean: &'a Tensor<T>,
}

impl<T: Scalar> Objective<T> for Deviation<'_, T> {
    fn value_grad(&self, index: usize, e: &[T]) -> Result<(T, Vec<T>)> {
        let c = self.clean.row(index);
        Ok((loss_dev(e, c)?.value, grad_dev(c)))
    }
}

/// Untargeted feature guidance with a shared guiding matrix.
pub struct Guidance<'a, T> {
    pub w: &'a Tensor<T>,
    pub labels: &'a [Vec<usize>],
    pub temperature: T,
}

impl<T: Scalar> Objective<T> for Guidance<'_, T> {
    fn value_grad(&self, index: usize, e: &[T]) -> Result<(T, Vec<T>)> {
        let labels = self
            .labels
            .get(index)
            .ok_or_else(|| config_err!("no guiding labels for example {index}"))?;
        Ok((
            loss_gui_temp(e, self.w, labels, self.temperature)?.value,
            grad_gui_embedding_temp(e, self.w, labels, self.temperature)?,
        ))
    }
}

/// Targeted guidance toward one row per example.
pub struct Targeted<'a, T> {
    pub w: &'a Tensor<T>,
    pub targets: &'a [usize],
    pub temperature: T,
}

impl<T: Scalar> Objective<T> for Targeted<'_, T> {
    fn value_grad(&self, index: usize, e: &[T]) -> Result<(T, Vec<T>)> {
        let &t = self
            .targets
            .get(index)
            .ok_or_else(|| config_err!("no target for example {index}"))?;
        Ok((
            loss_gui_targeted_temp(e, self.w, t, self.temperature)?.value,
            grad_gui_targeted_temp(e, self.w, t, self.temperature)?,
        ))
    }
}
