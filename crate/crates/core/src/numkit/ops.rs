use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{config_err, dim_err, Result};
use crate::scalar::Scalar;

/// Perturbation norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Norm {
    #[serde(rename = "1")]
    L1,
    #[serde(rename = "2")]
    L2,
    #[serde(rename = "inf")]
    Linf,
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::L1 => "1",
            Norm::L2 => "2",
            Norm::Linf => "inf",
        })
    }
}

impl FromStr for Norm {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "1" | "l1" => Ok(Norm::L1),
            "2" | "l2" => Ok(Norm::L2),
            "inf" | "linf" => Ok(Norm::Linf),
            other => Err(config_err!("unknown norm '{other}' (expected 1, 2 or inf)")),
        }
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `y += a * x`
pub fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Standard p-norm. Non-finite input propagates into the result.
pub fn lp_norm<T: Scalar>(v: &[T], p: Norm) -> T {
    match p {
        Norm::L1 => v.iter().fold(T::zero(), |acc, x| acc + x.abs()),
        Norm::L2 => v.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt(),
        Norm::Linf => v.iter().fold(T::zero(), |acc, x| {
            if acc.is_nan() || x.is_nan() {
                T::nan()
            } else {
                acc.max(x.abs())
            }
        }),
    }
}

/// Cosine similarity; zero when either vector has zero length.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let na = lp_norm(a, Norm::L2);
    let nb = lp_norm(b, Norm::L2);
    if na == T::zero() || nb == T::zero() {
        return T::zero();
    }
    dot(a, b) / (na * nb)
}

/// Scales `v` to unit Euclidean length in place and returns the original norm.
pub fn l2_normalize<T: Scalar>(v: &mut [T]) -> T {
    let n = lp_norm(v, Norm::L2);
    if n > T::zero() {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

/// Max-subtracted softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    if logits.is_empty() {
        return Err(dim_err!("softmax of an empty vector"));
    }
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&x| (x - m).exp()).collect();
    let z: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Max-subtracted log-softmax.
pub fn log_softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    if logits.is_empty() {
        return Err(dim_err!("log_softmax of an empty vector"));
    }
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = m + logits.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
    Ok(logits.iter().map(|&x| x - lse).collect())
}

/// Nearest-rank percentile of `|g|`: the element at 1-based rank
/// `ceil(q/100 * N)` (clamped to `[1, N]`) of the ascending absolute values.
pub fn percentile_abs<T: Scalar>(g: &[T], q: f64) -> Result<T> {
    if !(0.0..=100.0).contains(&q) {
        return Err(config_err!("percentile {q} outside [0, 100]"));
    }
    if g.is_empty() {
        return Err(dim_err!("percentile of an empty vector"));
    }
    let mut abs: Vec<T> = g.iter().map(|x| x.abs()).collect();
    abs.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let n = abs.len();
    let rank = ((q * n as f64) / 100.0).ceil() as usize;
    Ok(abs[rank.clamp(1, n) - 1])
}

pub fn clamp_slice<T: Scalar>(t: &mut [T], lo: T, hi: T) {
    for x in t.iter_mut() {
        *x = x.max(lo).min(hi);
    }
}

pub fn clamp<T: Scalar>(t: &Tensor<T>, lo: T, hi: T) -> Result<Tensor<T>> {
    if lo > hi {
        return Err(config_err!("clamp bounds inverted: {lo} > {hi}"));
    }
    Ok(t.map(|x| x.max(lo).min(hi)))
}

/// Index of the largest element; ties go to the lowest index.
pub fn argmax<T: Scalar>(v: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &x) in v.iter().enumerate() {
        match best {
            Some((_, b)) if !(x > b) => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}

/// Indices sorted by descending score, ties by ascending index.
pub fn rank_descending<T: Scalar>(scores: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}
