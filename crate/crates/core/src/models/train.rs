//! Contrastive (ITC) training of the dual encoders and supervised training
//! of the fusion head. Plain minibatch gradient descent, single-threaded,
//! deterministic given the stream.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::encoders::{forward_image, forward_text, FusionHead, ImageEncoder, TextEncoder};
use crate::error::{config_err, Error, Result};
use crate::numkit::{argmax, dot, log_softmax, softmax, Image, RngStream, Tensor};
use crate::scalar::Scalar;
use crate::synthdata::{PairedDataset, TokenSeq};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub epochs: usize,
    pub lr: f64,
    pub temperature: f64,
    pub batch_size: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.25,
            temperature: 0.1,
            batch_size: 16,
        }
    }
}

/// Mean loss per epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
    /// Per-batch losses of the first epoch.
    pub first_epoch_batches: Vec<f64>,
}

fn check_spec(spec: &TrainSpec) -> Result<()> {
    if !(spec.temperature > 0.0) {
        return Err(config_err!("temperature must be > 0"));
    }
    if !(spec.lr > 0.0) || spec.batch_size == 0 {
        return Err(config_err!("lr must be > 0 and batch_size >= 1"));
    }
    Ok(())
}

/// Loss with its gradients for the image and text embedding rows.
pub type LossAndGrads<T> = (T, Vec<Vec<T>>, Vec<Vec<T>>);

/// Symmetric InfoNCE over a batch of matched `(image, text)` embeddings.
pub fn info_nce<T: Scalar>(e_v: &[Vec<T>], e_t: &[Vec<T>], temperature: T) -> Result<LossAndGrads<T>> {
    let b = e_v.len();
    let inv_t = T::one() / temperature;
    let logits: Vec<Vec<T>> = e_v
        .iter()
        .map(|v| e_t.iter().map(|t| dot(v, t) * inv_t).collect())
        .collect();
    let cols: Vec<Vec<T>> = (0..b).map(|j| (0..b).map(|i| logits[i][j]).collect()).collect();
    let half_b = T::c(0.5) / T::from_usize_lossy(b);
    let mut loss = T::zero();
    let mut dlogits = vec![vec![T::zero(); b]; b];
    for i in 0..b {
        let ls = log_softmax(&logits[i])?;
        loss -= ls[i];
        let p = softmax(&logits[i])?;
        for j in 0..b {
            let target = if i == j { T::one() } else { T::zero() };
            dlogits[i][j] += (p[j] - target) * half_b;
        }
    }
    for j in 0..b {
        let ls = log_softmax(&cols[j])?;
        loss -= ls[j];
        let q = softmax(&cols[j])?;
        for i in 0..b {
            let target = if i == j { T::one() } else { T::zero() };
            dlogits[i][j] += (q[i] - target) * half_b;
        }
    }
    loss *= half_b;
    let d = e_v.first().map_or(0, Vec::len);
    let mut g_v = vec![vec![T::zero(); d]; b];
    let mut g_t = vec![vec![T::zero(); d]; b];
    for i in 0..b {
        for j in 0..b {
            let s = dlogits[i][j] * inv_t;
            for k in 0..d {
                g_v[i][k] += s * e_t[j][k];
                g_t[j][k] += s * e_v[i][k];
            }
        }
    }
    Ok((loss, g_v, g_t))
}

/// Trains both encoders with the symmetric image-text contrastive loss. Each
/// epoch shuffles the examples and picks one caption per image.
pub fn train_itc<T: Scalar>(
    mut img: ImageEncoder<T>,
    mut txt: TextEncoder<T>,
    data: &PairedDataset<T>,
    spec: &TrainSpec,
    stream: RngStream,
) -> Result<(ImageEncoder<T>, TextEncoder<T>, TrainLog)> {
    check_spec(spec)?;
    if data.is_empty() {
        return Err(config_err!("cannot train on an empty dataset"));
    }
    let images: Vec<Image<T>> = (0..data.len()).map(|i| data.image(i)).collect::<Result<_>>()?;
    let lr = T::c(spec.lr);
    let temperature = T::c(spec.temperature);
    let mut log = TrainLog::default();
    for epoch in 0..spec.epochs {
        let mut rng = stream.child(epoch as u64).rng();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let picks: Vec<usize> = order
            .iter()
            .map(|&i| rng.random_range(0..data.captions[i].len()))
            .collect();
        let mut total = 0.0;
        let mut batches = 0;
        for (step, chunk) in order.chunks(spec.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let offset = step * spec.batch_size;
            let texts: Vec<&TokenSeq> = chunk
                .iter()
                .enumerate()
                .map(|(k, &i)| &data.captions[i][picks[offset + k]])
                .collect();
            let e_v: Vec<Vec<T>> = chunk.iter().map(|&i| img.embed_image(&images[i])).collect::<Result<_>>()?;
            let e_t: Vec<Vec<T>> = texts.iter().map(|t| txt.embed_text(t)).collect::<Result<_>>()?;
            let (loss, g_v, g_t) = info_nce(&e_v, &e_t, temperature)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    step,
                    message: format!("non-finite contrastive loss {loss}"),
                });
            }
            let mut img_grad = img.mlp.zeros_like();
            let mut txt_grad = txt.zeros_like();
            for (k, &i) in chunk.iter().enumerate() {
                img.accumulate_param_grad(&images[i], &g_v[k], &mut img_grad)?;
                txt.accumulate_param_grad(texts[k], &g_t[k], &mut txt_grad)?;
            }
            img.mlp.sgd_step(&img_grad, lr);
            txt.sgd_step(&txt_grad, lr);
            if !img.mlp.is_finite() || !txt.table.is_finite() || !txt.mlp.is_finite() {
                return Err(Error::Training {
                    epoch,
                    step,
                    message: "parameters became non-finite".into(),
                });
            }
            let l = loss.to_f64_lossy();
            if epoch == 0 {
                log.first_epoch_batches.push(l);
            }
            total += l;
            batches += 1;
        }
        log.epoch_loss.push(if batches > 0 { total / batches as f64 } else { 0.0 });
    }
    Ok((img, txt, log))
}

/// Labeled `(image, text)` pairs for the fused classification task.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTask {
    pub image_index: Vec<usize>,
    pub texts: Vec<TokenSeq>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl PairTask {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Image-text matching task: every image is paired once with its own first
/// caption (label 1, "match") and once with the first caption of a random
/// image from another class (label 0, "mismatch").
pub fn matching_pairs<T: Scalar>(data: &PairedDataset<T>, stream: RngStream) -> Result<PairTask> {
    let mut rng = stream.rng();
    let mut task = PairTask {
        image_index: Vec::new(),
        texts: Vec::new(),
        labels: Vec::new(),
        classes: 2,
    };
    for i in 0..data.len() {
        task.image_index.push(i);
        task.texts.push(data.captions[i][0].clone());
        task.labels.push(1);
        let others: Vec<usize> = (0..data.len()).filter(|&j| data.labels[j] != data.labels[i]).collect();
        if others.is_empty() {
            return Err(config_err!("matching task needs at least two classes"));
        }
        let j = others[rng.random_range(0..others.len())];
        task.image_index.push(i);
        task.texts.push(data.captions[j][0].clone());
        task.labels.push(0);
    }
    Ok(task)
}

/// Supervised cross-entropy training of the fusion projector and head over
/// frozen encoder embeddings.
pub fn train_fusion<T: Scalar>(
    mut head: FusionHead<T>,
    img: &ImageEncoder<T>,
    txt: &TextEncoder<T>,
    data: &PairedDataset<T>,
    task: &PairTask,
    spec: &TrainSpec,
    stream: RngStream,
) -> Result<(FusionHead<T>, TrainLog)> {
    check_spec(spec)?;
    if task.is_empty() {
        return Err(config_err!("cannot train on an empty pair task"));
    }
    if task.classes != head.spec.classes {
        return Err(config_err!("task has {} classes, head has {}", task.classes, head.spec.classes));
    }
    let e_v = forward_image(img, &data.images)?;
    let e_t = forward_text(txt, &task.texts)?;
    let lr = T::c(spec.lr);
    let mut log = TrainLog::default();
    for epoch in 0..spec.epochs {
        let mut rng = stream.child(epoch as u64).rng();
        let mut order: Vec<usize> = (0..task.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (step, chunk) in order.chunks(spec.batch_size).enumerate() {
            let mut proj_grad = head.projector.zeros_like();
            let mut head_grad = super::mlp::Dense::zeros(head.spec.fused_dim, head.spec.classes);
            let mut loss = T::zero();
            let inv_b = T::one() / T::from_usize_lossy(chunk.len());
            for &p in chunk {
                let x: Vec<T> = e_v
                    .row(task.image_index[p])
                    .iter()
                    .chain(e_t.row(p))
                    .copied()
                    .collect();
                let trace = head.projector.forward_trace(&x);
                let logits = head.head.forward(&trace.output);
                let ls = log_softmax(&logits)?;
                loss -= ls[task.labels[p]] * inv_b;
                let mut g: Vec<T> = softmax(&logits)?;
                g[task.labels[p]] -= T::one();
                g.iter_mut().for_each(|v| *v *= inv_b);
                head_grad.accumulate(&trace.output, &g);
                let g_fused = head.head.backward_input(&g);
                head.projector.backward(&trace, &g_fused, Some(&mut proj_grad));
            }
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    step,
                    message: format!("non-finite fusion loss {loss}"),
                });
            }
            head.projector.sgd_step(&proj_grad, lr);
            head.head.sgd_step(&head_grad, lr);
            let l = loss.to_f64_lossy();
            if epoch == 0 {
                log.first_epoch_batches.push(l);
            }
            total += l;
            batches += 1;
        }
        log.epoch_loss.push(total / batches.max(1) as f64);
    }
    Ok((head, log))
}

/// Accuracy of the fused classifier on a pair task.
pub fn fusion_accuracy<T: Scalar>(
    head: &FusionHead<T>,
    img: &ImageEncoder<T>,
    txt: &TextEncoder<T>,
    data: &PairedDataset<T>,
    task: &PairTask,
) -> Result<f64> {
    if task.is_empty() {
        return Ok(0.0);
    }
    let e_v = forward_image(img, &data.images)?;
    let e_t = forward_text(txt, &task.texts)?;
    let mut correct = 0;
    for p in 0..task.len() {
        let fused = head.fused(e_v.row(task.image_index[p]), e_t.row(p))?;
        if argmax(&head.logits(&fused)?) == Some(task.labels[p]) {
            correct += 1;
        }
    }
    Ok(correct as f64 / task.len() as f64)
}

/// Mean cosine of matched (first caption) versus mismatched (other-class
/// first caption) image-text pairs.
pub fn alignment_gap<T: Scalar>(img: &ImageEncoder<T>, txt: &TextEncoder<T>, data: &PairedDataset<T>) -> Result<(f64, f64)> {
    let e_v = forward_image(img, &data.images)?;
    let firsts: Vec<TokenSeq> = data.captions.iter().map(|c| c[0].clone()).collect();
    let e_t: Tensor<T> = forward_text(txt, &firsts)?;
    let (mut matched, mut nm, mut mismatched, mut nmm) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..data.len() {
        for j in 0..data.len() {
            let c = crate::numkit::cosine(e_v.row(i), e_t.row(j)).to_f64_lossy();
            if i == j {
                matched += c;
                nm += 1;
            } else if data.labels[i] != data.labels[j] {
                mismatched += c;
                nmm += 1;
            }
        }
    }
    Ok((matched / nm.max(1) as f64, mismatched / nmm.max(1) as f64))
}
