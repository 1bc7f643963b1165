//! Numeric kernel: dense tensors, softmax, norms, percentiles, bilinear
//! resize and seeded random streams.

mod image;
mod ops;
mod resize;
mod rng;
mod tensor;

pub use image::{image_dims, stack_images, Image};
pub use ops::{
    argmax, axpy, clamp, clamp_slice, cosine, dot, l2_normalize, log_softmax, lp_norm,
    percentile_abs, rank_descending, sign, softmax, Norm,
};
pub use resize::{resize, resize_batch, resize_to, resize_to_vjp, scaled_dims};
pub use rng::RngStream;
pub use tensor::Tensor;
