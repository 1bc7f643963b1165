//! Iterative image attacks: steepest-ascent directions for ℓ1/ℓ2/ℓ∞, ball
//! projections, momentum, scale augmentation and masked patch attacks.

mod patch;
mod pgd;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::numkit::{lp_norm, percentile_abs, sign, Norm};
use crate::scalar::Scalar;

pub use patch::{fga_targeted_patch, patch_attack, PatchConfig, PatchSpec};
pub use pgd::{fga, gradient, pgd_attack, AttackTrace};

/// Resize factors used for scale augmentation.
pub const DEFAULT_SCALES: [f64; 4] = [0.5, 0.75, 1.25, 1.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub norm: Norm,
    /// Budget on the `[0, 1]` pixel scale.
    pub epsilon: f64,
    pub steps: usize,
    /// Step size; `None` means `2.5 · epsilon / steps`.
    pub alpha: Option<f64>,
    pub momentum: bool,
    pub momentum_mu: f64,
    /// Percentile threshold of the ℓ1 direction.
    pub q_percentile: f64,
    /// Scale augmentation factors; `None` attacks the input size only.
    pub scales: Option<Vec<f64>>,
    pub random_start: bool,
    /// Softmax temperature of the guidance objectives.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            norm: Norm::Linf,
            epsilon: 2.0 / 255.0,
            steps: 10,
            alpha: None,
            momentum: false,
            momentum_mu: 1.0,
            q_percentile: 90.0,
            scales: None,
            random_start: false,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl AttackConfig {
    /// ℓ1 defaults: budget 1.0 (255 on the byte scale), 20 steps.
    pub fn l1() -> Self {
        Self {
            norm: Norm::L1,
            epsilon: 1.0,
            steps: 20,
            ..Self::default()
        }
    }

    pub fn step_size(&self) -> f64 {
        self.alpha.unwrap_or(2.5 * self.epsilon / self.steps.max(1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(config_err!("epsilon must be >= 0, got {}", self.epsilon));
        }
        if self.steps == 0 {
            return Err(config_err!("steps must be >= 1"));
        }
        let alpha = self.step_size();
        if !(alpha > 0.0 || (alpha == 0.0 && self.epsilon == 0.0)) || !alpha.is_finite() {
            return Err(config_err!("alpha must be > 0, got {alpha}"));
        }
        if !(self.momentum_mu >= 0.0) {
            return Err(config_err!("momentum_mu must be >= 0"));
        }
        if !(0.0..=100.0).contains(&self.q_percentile) {
            return Err(config_err!("q_percentile must be in [0, 100]"));
        }
        if !(self.temperature > 0.0) {
            return Err(config_err!("temperature must be > 0"));
        }
        if let Some(s) = &self.scales {
            if s.is_empty() {
                return Err(config_err!("scale set must be non-empty"));
            }
            if let Some(bad) = s.iter().find(|&&v| !(v > 0.0 && v <= 4.0)) {
                return Err(config_err!("scale {bad} outside (0, 4]"));
            }
        }
        Ok(())
    }
}

/// Unit-norm steepest-ascent direction of `g` (zero when `g` is zero).
/// For ℓ1 only coordinates with `|g_i|` at or above the `q`-th percentile
/// of `|g|` are kept.
pub fn steepest_dir<T: Scalar>(g: &[T], norm: Norm, q_percentile: f64) -> Result<Vec<T>> {
    Ok(match norm {
        Norm::Linf => g.iter().map(|&v| sign(v)).collect(),
        Norm::L2 => {
            let n = lp_norm(g, Norm::L2);
            if n == T::zero() {
                vec![T::zero(); g.len()]
            } else {
                g.iter().map(|&v| v / n).collect()
            }
        }
        Norm::L1 => {
            if g.is_empty() {
                return Ok(Vec::new());
            }
            let t = percentile_abs(g, q_percentile)?;
            let e: Vec<T> = g
                .iter()
                .map(|&v| if v.abs() >= t { sign(v) } else { T::zero() })
                .collect();
            let n = lp_norm(&e, Norm::L1);
            if n == T::zero() {
                e
            } else {
                e.into_iter().map(|v| v / n).collect()
            }
        }
    })
}

/// Euclidean projection onto the `p`-ball of radius `epsilon`; points inside
/// are returned unchanged.
pub fn project<T: Scalar>(delta: &[T], epsilon: T, norm: Norm) -> Vec<T> {
    match norm {
        Norm::Linf => delta.iter().map(|&v| v.max(-epsilon).min(epsilon)).collect(),
        Norm::L2 => {
            let n = lp_norm(delta, Norm::L2);
            if n <= epsilon {
                delta.to_vec()
            } else {
                let s = epsilon / n;
                delta.iter().map(|&v| v * s).collect()
            }
        }
        Norm::L1 => project_l1(delta, epsilon),
    }
}

/// Soft-thresholding with the water-filling threshold `θ`, found by sorting
/// magnitudes in decreasing order.
fn project_l1<T: Scalar>(delta: &[T], epsilon: T) -> Vec<T> {
    if lp_norm(delta, Norm::L1) <= epsilon {
        return delta.to_vec();
    }
    if epsilon <= T::zero() {
        return vec![T::zero(); delta.len()];
    }
    let mut u: Vec<T> = delta.iter().map(|v| v.abs()).collect();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let mut cumsum = T::zero();
    let mut theta = T::zero();
    for (j, &uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - epsilon) / T::from_usize_lossy(j + 1);
        if uj - t > T::zero() {
            theta = t;
        } else {
            break;
        }
    }
    delta
        .iter()
        .map(|&v| sign(v) * (v.abs() - theta).max(T::zero()))
        .collect()
}

/// Momentum accumulator, zero at the start of every attack.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState<T> {
    pub g_m: Vec<T>,
}

impl<T: Scalar> MomentumState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            g_m: vec![T::zero(); len],
        }
    }
}

/// `g ← g / mean|g|; g ← g + μ·g_m; g_m ← g`. The division is skipped when
/// `mean|g|` is zero.
pub fn momentum_transform<T: Scalar>(g: &[T], state: &mut MomentumState<T>, mu: T) -> Vec<T> {
    let mean_abs = if g.is_empty() {
        T::zero()
    } else {
        lp_norm(g, Norm::L1) / T::from_usize_lossy(g.len())
    };
    let out: Vec<T> = g
        .iter()
        .zip(&state.g_m)
        .map(|(&v, &m)| {
            let n = if mean_abs > T::zero() { v / mean_abs } else { v };
            n + mu * m
        })
        .collect();
    state.g_m.clone_from(&out);
    out
}
