use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{momentum_transform, project, steepest_dir, AttackConfig, MomentumState};
use crate::error::{Error, Result};
use crate::guidance::GuidanceSet;
use crate::losses::{Guidance, Objective, Targeted};
use crate::models::ImageModel;
use crate::numkit::{image_dims, lp_norm, resize, resize_to_vjp, Image, Norm, RngStream, Tensor};
use crate::scalar::Scalar;

const START_STREAM: u64 = 0x5354_4152;

/// Per-example record of one attack run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackTrace {
    /// Objective value at the start of each iteration.
    pub losses: Vec<f64>,
    /// Objective value at the returned image.
    pub final_loss: f64,
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
    pub iterations: usize,
}

impl AttackTrace {
    pub(crate) fn new(losses: Vec<f64>, final_loss: f64, clean: &[f64], adv: &[f64]) -> Self {
        let d: Vec<f64> = adv.iter().zip(clean).map(|(a, c)| a - c).collect();
        Self {
            iterations: losses.len(),
            losses,
            final_loss,
            l1: lp_norm(&d, Norm::L1),
            l2: lp_norm(&d, Norm::L2),
            linf: lp_norm(&d, Norm::Linf),
        }
    }

    pub fn norm(&self, p: Norm) -> f64 {
        match p {
            Norm::L1 => self.l1,
            Norm::L2 => self.l2,
            Norm::Linf => self.linf,
        }
    }
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64_lossy()).collect()
}

fn scaled<T: Scalar>(x: &Image<T>, s: f64) -> Result<Image<T>> {
    if s == 1.0 {
        Ok(x.clone())
    } else {
        resize(x, s)
    }
}

/// Objective value at `x`, summed over resized copies when `scales` is set.
pub(crate) fn value<T: Scalar, M: ImageModel<T> + ?Sized, O: Objective<T> + ?Sized>(
    model: &M,
    index: usize,
    x: &Image<T>,
    objective: &O,
    scales: Option<&[f64]>,
) -> Result<T> {
    match scales {
        None => Ok(objective.value_grad(index, &model.embed(index, x)?)?.0),
        Some(ss) => {
            let mut total: Option<T> = None;
            for &s in ss {
                let v = objective.value_grad(index, &model.embed(index, &scaled(x, s)?)?)?.0;
                total = Some(total.map_or(v, |t| t + v));
            }
            Ok(total.unwrap_or_else(T::zero))
        }
    }
}

/// Objective value and its gradient with respect to the input image; with
/// `scales`, the sum over resized copies, differentiated through the resize.
pub fn gradient<T: Scalar, M: ImageModel<T> + ?Sized, O: Objective<T> + ?Sized>(
    model: &M,
    index: usize,
    x: &Image<T>,
    objective: &O,
    scales: Option<&[f64]>,
) -> Result<(T, Image<T>)> {
    let one = [1.0];
    let ss = scales.unwrap_or(&one);
    let mut total: Option<(T, Image<T>)> = None;
    for &s in ss {
        let xs = scaled(x, s)?;
        let (v, ge) = objective.value_grad(index, &model.embed(index, &xs)?)?;
        let gs = model.embed_vjp(index, &xs, &ge)?;
        let g = if (xs.height, xs.width) == (x.height, x.width) {
            gs
        } else {
            resize_to_vjp(&gs, x.height, x.width)?
        };
        total = Some(match total {
            None => (v, g),
            Some((tv, mut tg)) => {
                for (a, &b) in tg.data.iter_mut().zip(&g.data) {
                    *a += b;
                }
                (tv + v, tg)
            }
        });
    }
    Ok(total.expect("at least one scale"))
}

fn random_start<T: Scalar>(n: usize, cfg: &AttackConfig, stream: RngStream) -> Vec<T> {
    let mut rng = stream.rng();
    let eps = cfg.epsilon;
    let d: Vec<f64> = match cfg.norm {
        Norm::Linf => (0..n).map(|_| rng.random_range(-1.0..=1.0) * eps).collect(),
        Norm::L2 => {
            let g: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = lp_norm(&g, Norm::L2).max(f64::MIN_POSITIVE);
            let r = eps * rng.random::<f64>().powf(1.0 / n as f64);
            g.iter().map(|v| v / norm * r).collect()
        }
        Norm::L1 => {
            let e: Vec<f64> = (0..=n).map(|_| Exp1.sample(&mut rng)).collect();
            let total: f64 = e.iter().sum();
            e[..n]
                .iter()
                .map(|v| {
                    let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    s * v / total * eps
                })
                .collect()
        }
    };
    d.into_iter().map(T::c).collect()
}

fn attack_one<T: Scalar, M: ImageModel<T> + ?Sized, O: Objective<T> + ?Sized>(
    model: &M,
    index: usize,
    v: &Image<T>,
    objective: &O,
    cfg: &AttackConfig,
) -> Result<(Image<T>, AttackTrace)> {
    let n = v.len();
    let eps = T::c(cfg.epsilon);
    let alpha = T::c(cfg.step_size());
    let mu = T::c(cfg.momentum_mu);
    let scales = cfg.scales.as_deref();
    let lo: Vec<T> = v.data.iter().map(|&p| -p).collect();
    let hi: Vec<T> = v.data.iter().map(|&p| T::one() - p).collect();
    let clamp_box = |d: &mut [T]| {
        for ((x, &l), &h) in d.iter_mut().zip(&lo).zip(&hi) {
            *x = x.max(l).min(h);
        }
    };
    let mut delta = if cfg.random_start {
        let mut d = random_start(n, cfg, RngStream::new(cfg.seed, START_STREAM).child(index as u64));
        clamp_box(&mut d);
        d
    } else {
        vec![T::zero(); n]
    };
    let compose = |d: &[T]| {
        v.with_data(
            v.data
                .iter()
                .zip(d)
                .map(|(&p, &q)| (p + q).max(T::zero()).min(T::one()))
                .collect(),
        )
    };
    let mut momentum = MomentumState::new(n);
    let mut losses = Vec::with_capacity(cfg.steps);
    for iteration in 0..cfg.steps {
        let (loss, g) = gradient(model, index, &compose(&delta), objective, scales).map_err(|e| match e {
            Error::Numeric(message) => Error::Attack { iteration, message },
            other => other,
        })?;
        if !loss.is_finite() || g.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Attack {
                iteration,
                message: format!("non-finite objective or gradient (loss {loss})"),
            });
        }
        losses.push(loss.to_f64_lossy());
        let g = if cfg.momentum {
            momentum_transform(&g.data, &mut momentum, mu)
        } else {
            g.data
        };
        let dir = steepest_dir(&g, cfg.norm, cfg.q_percentile)?;
        let stepped: Vec<T> = delta.iter().zip(&dir).map(|(&d, &s)| d + alpha * s).collect();
        delta = project(&stepped, eps, cfg.norm);
        clamp_box(&mut delta);
    }
    let adv = compose(&delta);
    let final_loss = value(model, index, &adv, objective, scales)?.to_f64_lossy();
    let trace = AttackTrace::new(losses, final_loss, &to_f64(&v.data), &to_f64(&adv.data));
    Ok((adv, trace))
}

/// Projected steepest ascent of `objective ∘ model` under `cfg`, one
/// independent attack per image (parallel across images; the result does
/// not depend on the thread count).
pub fn pgd_attack<T: Scalar, M: ImageModel<T> + ?Sized, O: Objective<T> + ?Sized>(
    model: &M,
    images: &Tensor<T>,
    objective: &O,
    cfg: &AttackConfig,
) -> Result<(Tensor<T>, Vec<AttackTrace>)> {
    cfg.validate()?;
    let (b, ..) = image_dims(images)?;
    let results = (0..b)
        .into_par_iter()
        .map(|i| {
            let v = Image::from_batch(images, i)?;
            if v.data.iter().any(|&p| !(p >= T::zero() && p <= T::one())) {
                return Err(crate::error::config_err!("image {i} has pixels outside [0, 1]"));
            }
            attack_one(model, i, &v, objective, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(images.len());
    let mut traces = Vec::with_capacity(b);
    for (img, t) in results {
        data.extend(img.data);
        traces.push(t);
    }
    Ok((Tensor::new(images.shape().to_vec(), data)?, traces))
}

/// Feature guidance attack: PGD on the guidance loss of `set` (targeted
/// toward row `t` for every example when `targeted` is given).
pub fn fga<T: Scalar, M: ImageModel<T> + ?Sized>(
    model: &M,
    images: &Tensor<T>,
    set: &GuidanceSet<T>,
    cfg: &AttackConfig,
    targeted: Option<usize>,
) -> Result<(Tensor<T>, Vec<AttackTrace>)> {
    let temperature = T::c(cfg.temperature);
    match targeted {
        None => pgd_attack(
            model,
            images,
            &Guidance {
                w: &set.w,
                labels: &set.labels,
                temperature,
            },
            cfg,
        ),
        Some(t) => {
            let targets = vec![t; image_dims(images)?.0];
            pgd_attack(
                model,
                images,
                &Targeted {
                    w: &set.w,
                    targets: &targets,
                    temperature,
                },
                cfg,
            )
        }
    }
}
