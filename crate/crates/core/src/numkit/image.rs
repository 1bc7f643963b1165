use super::Tensor;
use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

/// A single `C×H×W` image, row-major per channel plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if channels * height * width != data.len() {
            return Err(dim_err!(
                "image {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Image `i` of a `B×C×H×W` batch.
    pub fn from_batch(batch: &Tensor<T>, i: usize) -> Result<Self> {
        let (b, c, h, w) = image_dims(batch)?;
        if i >= b {
            return Err(dim_err!("image index {i} out of range for batch of {b}"));
        }
        Ok(Self {
            channels: c,
            height: h,
            width: w,
            data: batch.row(i).to_vec(),
        })
    }

    pub fn with_data(&self, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// `(B, C, H, W)` of an image batch tensor.
pub fn image_dims<T: Scalar>(batch: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match *batch.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        ref s => Err(dim_err!("expected B×C×H×W image batch, got shape {s:?}")),
    }
}

/// Stacks equally sized images into a batch tensor.
pub fn stack_images<T: Scalar>(images: &[Image<T>]) -> Result<Tensor<T>> {
    let Some(first) = images.first() else {
        return Err(dim_err!("cannot stack an empty image list"));
    };
    let (c, h, w) = first.dims();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if img.dims() != (c, h, w) {
            return Err(dim_err!(
                "image dims {:?} differ from {:?}",
                img.dims(),
                (c, h, w)
            ));
        }
        data.extend_from_slice(&img.data);
    }
    Tensor::new(vec![images.len(), c, h, w], data)
}
