use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pgd::{gradient, value, AttackTrace};
use crate::error::{config_err, Result};
use crate::losses::{Objective, Targeted};
use crate::models::ImageModel;
use crate::numkit::{image_dims, sign, Image, RngStream, Tensor};
use crate::scalar::Scalar;

const PATCH_STREAM: u64 = 0x5041_5443;

/// Binary `H × W` mask (1 = patch pixel), shared by all channels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<u8>,
    /// `(row, col, side)` when built as a square.
    pub square: Option<(usize, usize, usize)>,
}

impl PatchSpec {
    pub fn from_mask(height: usize, width: usize, mask: Vec<u8>) -> Result<Self> {
        if mask.len() != height * width {
            return Err(config_err!("mask has {} entries for {height}x{width}", mask.len()));
        }
        if mask.iter().any(|&m| m > 1) {
            return Err(config_err!("mask values must be 0 or 1"));
        }
        Ok(Self {
            height,
            width,
            mask,
            square: None,
        })
    }

    pub fn square(height: usize, width: usize, row: usize, col: usize, side: usize) -> Result<Self> {
        if row + side > height || col + side > width {
            return Err(config_err!("patch {side}x{side} at ({row}, {col}) exceeds {height}x{width}"));
        }
        let mut mask = vec![0u8; height * width];
        for y in row..row + side {
            mask[y * width + col..y * width + col + side].fill(1);
        }
        Ok(Self {
            height,
            width,
            mask,
            square: Some((row, col, side)),
        })
    }

    /// Square covering about `area_fraction` of the image (at least one
    /// pixel) at a uniformly random position.
    pub fn random(height: usize, width: usize, area_fraction: f64, stream: RngStream) -> Result<Self> {
        if !(area_fraction > 0.0 && area_fraction <= 1.0) {
            return Err(config_err!("patch area fraction must be in (0, 1]"));
        }
        let side = ((area_fraction * (height * width) as f64).sqrt().round() as usize)
            .max(1)
            .min(height.min(width));
        let mut rng = stream.rng();
        let row = rng.random_range(0..=height - side);
        let col = rng.random_range(0..=width - side);
        Self::square(height, width, row, col, side)
    }

    pub fn area_fraction(&self) -> f64 {
        self.mask.iter().map(|&m| m as usize).sum::<usize>() as f64 / self.mask.len().max(1) as f64
    }

    pub fn is_empty(&self) -> bool {
        self.mask.iter().all(|&m| m == 0)
    }

    fn covers(&self, pixel: usize) -> bool {
        self.mask[pixel % (self.height * self.width)] == 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    pub steps: usize,
    /// Per-step ℓ∞ magnitude.
    pub alpha: f64,
    pub area_fraction: f64,
    /// Add the raw gradient instead of `alpha · sign(g)`.
    pub raw_gradient: bool,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            alpha: 8.0 / 255.0,
            area_fraction: 0.02,
            raw_gradient: false,
            temperature: 1.0,
            seed: 0,
        }
    }
}

fn compose<T: Scalar>(v: &Image<T>, delta: &[T], spec: &PatchSpec) -> Image<T> {
    v.with_data(
        v.data
            .iter()
            .zip(delta)
            .enumerate()
            .map(|(j, (&p, &d))| if spec.covers(j) { d } else { p })
            .collect(),
    )
}

fn patch_one<T: Scalar, M: ImageModel<T> + ?Sized, O: Objective<T> + ?Sized>(
    model: &M,
    index: usize,
    v: &Image<T>,
    objective: &O,
    spec: &PatchSpec,
    cfg: &PatchConfig,
) -> Result<(Image<T>, AttackTrace)> {
    if (spec.height, spec.width) != (v.height, v.width) {
        return Err(config_err!("patch mask is {}x{}, image {}x{}", spec.height, spec.width, v.height, v.width));
    }
    let clean: Vec<f64> = v.data.iter().map(|p| p.to_f64_lossy()).collect();
    if spec.is_empty() {
        if cfg.steps > 0 {
            log::warn!("example {index}: empty patch mask, returning the clean image");
        }
        let final_loss = value(model, index, v, objective, None)?.to_f64_lossy();
        return Ok((v.clone(), AttackTrace::new(Vec::new(), final_loss, &clean, &clean)));
    }
    let alpha = T::c(cfg.alpha);
    let mut delta = v.data.clone();
    let mut losses = Vec::with_capacity(cfg.steps);
    for iteration in 0..cfg.steps {
        let (loss, g) = gradient(model, index, &compose(v, &delta, spec), objective, None)?;
        if !loss.is_finite() || g.data.iter().any(|x| !x.is_finite()) {
            return Err(crate::Error::Attack {
                iteration,
                message: format!("non-finite objective or gradient (loss {loss})"),
            });
        }
        losses.push(loss.to_f64_lossy());
        for (j, (d, &gj)) in delta.iter_mut().zip(&g.data).enumerate() {
            if spec.covers(j) {
                let step = if cfg.raw_gradient { gj } else { alpha * sign(gj) };
                *d = (*d + step).max(T::zero()).min(T::one());
            }
        }
    }
    let adv = compose(v, &delta, spec);
    let final_loss = value(model, index, &adv, objective, None)?.to_f64_lossy();
    let adv64: Vec<f64> = adv.data.iter().map(|p| p.to_f64_lossy()).collect();
    Ok((adv, AttackTrace::new(losses, final_loss, &clean, &adv64)))
}

/// Unbounded attack confined to each example's mask: the patch starts as
/// the clean pixels and moves by `alpha · sign(g)` per step, clamped to
/// `[0, 1]`. Pixels outside the mask are returned untouched.
pub fn patch_attack<T: Scalar, M: ImageModel<T> + ?Sized, O: Objective<T> + ?Sized>(
    model: &M,
    images: &Tensor<T>,
    objective: &O,
    masks: &[PatchSpec],
    cfg: &PatchConfig,
) -> Result<(Tensor<T>, Vec<AttackTrace>)> {
    let (b, ..) = image_dims(images)?;
    if masks.len() != b {
        return Err(config_err!("{} masks for {b} images", masks.len()));
    }
    if !(cfg.alpha > 0.0) {
        return Err(config_err!("patch alpha must be > 0"));
    }
    let results = (0..b)
        .into_par_iter()
        .map(|i| patch_one(model, i, &Image::from_batch(images, i)?, objective, &masks[i], cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(images.len());
    let mut traces = Vec::with_capacity(b);
    for (img, t) in results {
        data.extend(img.data);
        traces.push(t);
    }
    Ok((Tensor::new(images.shape().to_vec(), data)?, traces))
}

/// Targeted patch attack pulling each example toward `w[targets[i]]`, with
/// a random square of `cfg.area_fraction` per example.
pub fn fga_targeted_patch<T: Scalar, M: ImageModel<T> + ?Sized>(
    model: &M,
    images: &Tensor<T>,
    w: &Tensor<T>,
    targets: &[usize],
    cfg: &PatchConfig,
) -> Result<(Tensor<T>, Vec<AttackTrace>, Vec<PatchSpec>)> {
    let (b, _, h, wd) = image_dims(images)?;
    let stream = RngStream::new(cfg.seed, PATCH_STREAM);
    let masks = (0..b)
        .map(|i| PatchSpec::random(h, wd, cfg.area_fraction, stream.child(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let objective = Targeted {
        w,
        targets,
        temperature: T::c(cfg.temperature),
    };
    let (adv, traces) = patch_attack(model, images, &objective, &masks, cfg)?;
    Ok((adv, traces, masks))
}
