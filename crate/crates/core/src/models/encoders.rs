use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mlp::{normalize, normalize_backward, Mlp};
use crate::error::{dim_err, Result};
use crate::numkit::{image_dims, resize_to, resize_to_vjp, Image, RngStream, Tensor};
use crate::scalar::Scalar;
use crate::synthdata::TokenSeq;

/// Differentiable image → embedding map used by the attack engine.
///
/// `index` identifies the example inside the batch being attacked so that
/// conditioned models (an image encoder fused with that example's text) can
/// look up their per-example context.
pub trait ImageModel<T: Scalar>: Sync {
    fn embed(&self, index: usize, image: &Image<T>) -> Result<Vec<T>>;

    /// `∂⟨grad, embed(image)⟩ / ∂image`.
    fn embed_vjp(&self, index: usize, image: &Image<T>, grad: &[T]) -> Result<Image<T>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageEncoderSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub normalize: bool,
}

impl Default for ImageEncoderSpec {
    fn default() -> Self {
        Self {
            channels: 3,
            height: 16,
            width: 16,
            hidden: vec![128, 64],
            embed_dim: 32,
            normalize: true,
        }
    }
}

/// MLP over flattened, standardized pixels `(x − mean) · gain`. Inputs
/// whose spatial size differs from the native `height × width` are first
/// resized bilinearly to it.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoder<T> {
    pub spec: ImageEncoderSpec,
    pub input_mean: Vec<T>,
    pub input_gain: T,
    pub mlp: Mlp<T>,
}

impl<T: Scalar> ImageEncoder<T> {
    pub fn new(spec: &ImageEncoderSpec, stream: RngStream) -> Result<Self> {
        let mut widths = vec![spec.channels * spec.height * spec.width];
        widths.extend(&spec.hidden);
        widths.push(spec.embed_dim);
        Ok(Self {
            spec: spec.clone(),
            input_mean: vec![T::zero(); widths[0]],
            input_gain: T::one(),
            mlp: Mlp::init(&widths, false, stream)?,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.spec.embed_dim
    }

    /// Sets the per-pixel mean and the inverse pixel standard deviation
    /// (pooled over all pixels) from a batch at native resolution.
    pub fn fit_standardization(&mut self, images: &Tensor<T>) -> Result<()> {
        let (b, c, h, w) = image_dims(images)?;
        if (c, h, w) != (self.spec.channels, self.spec.height, self.spec.width) || b == 0 {
            return Err(dim_err!("standardization needs a non-empty batch of native {}x{}x{} images", c, h, w));
        }
        let n = c * h * w;
        let inv_b = T::one() / T::from_usize_lossy(b);
        let mut mean = vec![T::zero(); n];
        for row in images.rows() {
            for (m, &x) in mean.iter_mut().zip(row) {
                *m += x * inv_b;
            }
        }
        let var = images
            .rows()
            .flat_map(|row| row.iter().zip(&mean).map(|(&x, &m)| (x - m) * (x - m)))
            .sum::<T>()
            / T::from_usize_lossy(b * n);
        let std = var.sqrt();
        self.input_mean = mean;
        self.input_gain = if std > T::zero() { T::one() / std } else { T::one() };
        Ok(())
    }

    fn standardize(&self, x: &[T]) -> Vec<T> {
        x.iter()
            .zip(&self.input_mean)
            .map(|(&v, &m)| (v - m) * self.input_gain)
            .collect()
    }

    fn native(&self, img: &Image<T>) -> Result<Option<Image<T>>> {
        if img.channels != self.spec.channels {
            return Err(dim_err!(
                "image has {} channels, encoder expects {}",
                img.channels,
                self.spec.channels
            ));
        }
        if (img.height, img.width) == (self.spec.height, self.spec.width) {
            Ok(None)
        } else {
            resize_to(img, self.spec.height, self.spec.width).map(Some)
        }
    }

    /// Pre-normalization output.
    pub fn raw_embed(&self, img: &Image<T>) -> Result<Vec<T>> {
        let resized = self.native(img)?;
        let x = resized.as_ref().unwrap_or(img);
        Ok(self.mlp.forward(&self.standardize(&x.data)))
    }

    pub fn embed_image(&self, img: &Image<T>) -> Result<Vec<T>> {
        let z = self.raw_embed(img)?;
        Ok(if self.spec.normalize { normalize(&z) } else { z })
    }

    pub fn embed_image_vjp(&self, img: &Image<T>, grad: &[T]) -> Result<Image<T>> {
        if grad.len() != self.embed_dim() {
            return Err(dim_err!("embedding gradient has {} entries, expected {}", grad.len(), self.embed_dim()));
        }
        let resized = self.native(img)?;
        let x = resized.as_ref().unwrap_or(img);
        let trace = self.mlp.forward_trace(&self.standardize(&x.data));
        let gz = if self.spec.normalize {
            normalize_backward(&trace.output, grad)
        } else {
            grad.to_vec()
        };
        let gain = self.input_gain;
        let gx = x.with_data(self.mlp.backward(&trace, &gz, None).into_iter().map(|g| g * gain).collect());
        match resized {
            Some(_) => resize_to_vjp(&gx, img.height, img.width),
            None => Ok(gx),
        }
    }

    /// Accumulates parameter gradients of `⟨grad, embed(img)⟩` into `acc`.
    pub fn accumulate_param_grad(&self, img: &Image<T>, grad: &[T], acc: &mut Mlp<T>) -> Result<()> {
        let resized = self.native(img)?;
        let x = resized.as_ref().unwrap_or(img);
        let trace = self.mlp.forward_trace(&self.standardize(&x.data));
        let gz = if self.spec.normalize {
            normalize_backward(&trace.output, grad)
        } else {
            grad.to_vec()
        };
        self.mlp.backward(&trace, &gz, Some(acc));
        Ok(())
    }
}

impl<T: Scalar> ImageModel<T> for ImageEncoder<T> {
    fn embed(&self, _index: usize, image: &Image<T>) -> Result<Vec<T>> {
        self.embed_image(image)
    }

    fn embed_vjp(&self, _index: usize, image: &Image<T>, grad: &[T]) -> Result<Image<T>> {
        self.embed_image_vjp(image, grad)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextEncoderSpec {
    pub vocab_size: usize,
    pub token_dim: usize,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub normalize: bool,
}

impl Default for TextEncoderSpec {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            token_dim: 32,
            hidden: vec![64],
            embed_dim: 32,
            normalize: true,
        }
    }
}

/// Token embedding table, mean pooling, then an MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder<T> {
    pub spec: TextEncoderSpec,
    /// `vocab_size × token_dim`
    pub table: Tensor<T>,
    pub mlp: Mlp<T>,
}

impl<T: Scalar> TextEncoder<T> {
    pub fn new(spec: &TextEncoderSpec, stream: RngStream) -> Result<Self> {
        use rand_distr::{Distribution, Normal};
        if spec.vocab_size == 0 || spec.token_dim == 0 {
            return Err(dim_err!("text encoder needs a non-empty vocabulary and token_dim"));
        }
        let mut rng = stream.child(1000).rng();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let table = Tensor::new(
            vec![spec.vocab_size, spec.token_dim],
            (0..spec.vocab_size * spec.token_dim)
                .map(|_| T::c(normal.sample(&mut rng)))
                .collect(),
        )?;
        let mut widths = vec![spec.token_dim];
        widths.extend(&spec.hidden);
        widths.push(spec.embed_dim);
        Ok(Self {
            spec: spec.clone(),
            table,
            mlp: Mlp::init(&widths, false, stream)?,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.spec.embed_dim
    }

    pub fn token_embedding(&self, id: usize) -> &[T] {
        self.table.row(id)
    }

    fn pool(&self, seq: &TokenSeq) -> Result<Vec<T>> {
        if seq.is_empty() {
            return Err(dim_err!("empty token sequence"));
        }
        let mut pooled = vec![T::zero(); self.spec.token_dim];
        for &id in &seq.ids {
            if id >= self.spec.vocab_size {
                return Err(dim_err!("token id {id} outside vocabulary of {}", self.spec.vocab_size));
            }
            for (p, &v) in pooled.iter_mut().zip(self.table.row(id)) {
                *p += v;
            }
        }
        let inv = T::one() / T::from_usize_lossy(seq.len());
        pooled.iter_mut().for_each(|p| *p *= inv);
        Ok(pooled)
    }

    pub fn embed_text(&self, seq: &TokenSeq) -> Result<Vec<T>> {
        let z = self.mlp.forward(&self.pool(seq)?);
        Ok(if self.spec.normalize { normalize(&z) } else { z })
    }

    /// Accumulates gradients of `⟨grad, embed(seq)⟩` into `acc` (same
    /// architecture, used as a buffer).
    pub fn accumulate_param_grad(&self, seq: &TokenSeq, grad: &[T], acc: &mut TextEncoder<T>) -> Result<()> {
        let pooled = self.pool(seq)?;
        let trace = self.mlp.forward_trace(&pooled);
        let gz = if self.spec.normalize {
            normalize_backward(&trace.output, grad)
        } else {
            grad.to_vec()
        };
        let gp = self.mlp.backward(&trace, &gz, Some(&mut acc.mlp));
        let inv = T::one() / T::from_usize_lossy(seq.len());
        for &id in &seq.ids {
            for (a, &g) in acc.table.row_mut(id).iter_mut().zip(&gp) {
                *a += g * inv;
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            table: Tensor::zeros(self.table.shape().to_vec()),
            mlp: self.mlp.zeros_like(),
        }
    }

    pub fn sgd_step(&mut self, grad: &TextEncoder<T>, lr: T) {
        for (w, &g) in self.table.data_mut().iter_mut().zip(grad.table.data()) {
            *w -= lr * g;
        }
        self.mlp.sgd_step(&grad.mlp, lr);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSpec {
    pub image_dim: usize,
    pub text_dim: usize,
    pub hidden: Vec<usize>,
    pub fused_dim: usize,
    pub classes: usize,
}

impl Default for FusionSpec {
    fn default() -> Self {
        Self {
            image_dim: 32,
            text_dim: 32,
            hidden: vec![64],
            fused_dim: 32,
            classes: 2,
        }
    }
}

/// Projector over concatenated `(image, text)` embeddings followed by a
/// linear classification head whose rows serve as guiding vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead<T> {
    pub spec: FusionSpec,
    pub projector: Mlp<T>,
    pub head: super::mlp::Dense<T>,
}

impl<T: Scalar> FusionHead<T> {
    pub fn new(spec: &FusionSpec, stream: RngStream) -> Result<Self> {
        if spec.classes < 2 {
            return Err(dim_err!("fusion head needs at least 2 classes"));
        }
        let mut widths = vec![spec.image_dim + spec.text_dim];
        widths.extend(&spec.hidden);
        widths.push(spec.fused_dim);
        Ok(Self {
            spec: spec.clone(),
            projector: Mlp::init(&widths, true, stream.child(0))?,
            head: super::mlp::Dense::init(spec.fused_dim, spec.classes, stream.child(1)),
        })
    }

    fn concat(&self, e_v: &[T], e_t: &[T]) -> Result<Vec<T>> {
        if e_v.len() != self.spec.image_dim || e_t.len() != self.spec.text_dim {
            return Err(dim_err!(
                "fusion expects ({}, {}) inputs, got ({}, {})",
                self.spec.image_dim,
                self.spec.text_dim,
                e_v.len(),
                e_t.len()
            ));
        }
        Ok(e_v.iter().chain(e_t).copied().collect())
    }

    pub fn fused(&self, e_v: &[T], e_t: &[T]) -> Result<Vec<T>> {
        Ok(self.projector.forward(&self.concat(e_v, e_t)?))
    }

    pub fn logits(&self, fused: &[T]) -> Result<Vec<T>> {
        if fused.len() != self.spec.fused_dim {
            return Err(dim_err!("fused vector has {} entries, expected {}", fused.len(), self.spec.fused_dim));
        }
        Ok(self.head.forward(fused))
    }

    /// Gradient of `⟨grad, fused(e_v, e_t)⟩` with respect to `e_v`.
    pub fn fused_vjp_image_embedding(&self, e_v: &[T], e_t: &[T], grad: &[T]) -> Result<Vec<T>> {
        if grad.len() != self.spec.fused_dim {
            return Err(dim_err!("fused gradient has {} entries, expected {}", grad.len(), self.spec.fused_dim));
        }
        let trace = self.projector.forward_trace(&self.concat(e_v, e_t)?);
        let mut g = self.projector.backward(&trace, grad, None);
        g.truncate(self.spec.image_dim);
        Ok(g)
    }

    /// Guiding vectors: the rows of the classification head.
    pub fn head_rows(&self) -> Tensor<T> {
        self.head.weight.clone()
    }
}

/// `E(v | t)`: the fused embedding of an image with a fixed per-example text
/// embedding, as an attackable image model.
pub struct ConditionedFusion<'a, T> {
    pub image: &'a ImageEncoder<T>,
    pub head: &'a FusionHead<T>,
    /// `B × d_t`, row `i` conditions example `i`.
    pub text_embeddings: &'a Tensor<T>,
}

impl<T: Scalar> ImageModel<T> for ConditionedFusion<'_, T> {
    fn embed(&self, index: usize, image: &Image<T>) -> Result<Vec<T>> {
        let e_v = self.image.embed_image(image)?;
        self.head.fused(&e_v, self.text_embeddings.row(index))
    }

    fn embed_vjp(&self, index: usize, image: &Image<T>, grad: &[T]) -> Result<Image<T>> {
        let e_v = self.image.embed_image(image)?;
        let g_ev = self
            .head
            .fused_vjp_image_embedding(&e_v, self.text_embeddings.row(index), grad)?;
        self.image.embed_image_vjp(image, &g_ev)
    }
}

fn stack<T: Scalar>(rows: Vec<Vec<T>>, dim: usize) -> Result<Tensor<T>> {
    let n = rows.len();
    Tensor::new(vec![n, dim], rows.into_iter().flatten().collect())
}

/// `B×d` embeddings of an image batch.
pub fn forward_image<T: Scalar>(enc: &ImageEncoder<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, ..) = image_dims(images)?;
    let rows = (0..b)
        .into_par_iter()
        .map(|i| enc.embed_image(&Image::from_batch(images, i)?))
        .collect::<Result<Vec<_>>>()?;
    stack(rows, enc.embed_dim())
}

/// `∂⟨grad_emb, forward_image(images)⟩ / ∂images`, shaped like `images`.
pub fn vjp_image<T: Scalar>(enc: &ImageEncoder<T>, images: &Tensor<T>, grad_emb: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, ..) = image_dims(images)?;
    if grad_emb.shape() != [b, enc.embed_dim()] {
        return Err(dim_err!("gradient shape {:?} vs expected {:?}", grad_emb.shape(), [b, enc.embed_dim()]));
    }
    let grads = (0..b)
        .into_par_iter()
        .map(|i| enc.embed_image_vjp(&Image::from_batch(images, i)?, grad_emb.row(i)))
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(images.shape().to_vec(), grads.into_iter().flat_map(|g| g.data).collect())
}

pub fn forward_text<T: Scalar>(enc: &TextEncoder<T>, texts: &[TokenSeq]) -> Result<Tensor<T>> {
    let rows = texts
        .par_iter()
        .map(|t| enc.embed_text(t))
        .collect::<Result<Vec<_>>>()?;
    stack(rows, enc.embed_dim())
}

pub fn forward_fused<T: Scalar>(head: &FusionHead<T>, e_v: &Tensor<T>, e_t: &Tensor<T>) -> Result<Tensor<T>> {
    if e_v.outer() != e_t.outer() {
        return Err(dim_err!("{} image vs {} text embeddings", e_v.outer(), e_t.outer()));
    }
    let rows = (0..e_v.outer())
        .map(|i| head.fused(e_v.row(i), e_t.row(i)))
        .collect::<Result<Vec<_>>>()?;
    stack(rows, head.spec.fused_dim)
}

pub fn fused_logits<T: Scalar>(head: &FusionHead<T>, fused: &Tensor<T>) -> Result<Tensor<T>> {
    let rows = fused.rows().map(|f| head.logits(f)).collect::<Result<Vec<_>>>()?;
    stack(rows, head.spec.classes)
}

/// Gradient of `⟨grad_fused, forward_fused(forward_image(images), e_t)⟩`
/// with respect to the images.
pub fn vjp_fused_image<T: Scalar>(
    enc: &ImageEncoder<T>,
    head: &FusionHead<T>,
    images: &Tensor<T>,
    e_t: &Tensor<T>,
    grad_fused: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, ..) = image_dims(images)?;
    if grad_fused.shape() != [b, head.spec.fused_dim] || e_t.outer() != b {
        return Err(dim_err!("fused gradient / text embeddings do not match batch of {b}"));
    }
    let model = ConditionedFusion {
        image: enc,
        head,
        text_embeddings: e_t,
    };
    let grads = (0..b)
        .into_par_iter()
        .map(|i| model.embed_vjp(i, &Image::from_batch(images, i)?, grad_fused.row(i)))
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(images.shape().to_vec(), grads.into_iter().flat_map(|g| g.data).collect())
}
