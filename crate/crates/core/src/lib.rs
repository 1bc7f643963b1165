//! Feature-guidance adversarial attacks against small differentiable
//! image, text and fusion encoders.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`). The
//! `*32` / `*64` aliases below fix the precision: `f32` is the production
//! default, `f64` is used for gradient verification.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod error;
mod scalar;

pub mod evalkit;
pub mod guidance;
pub mod imgattack;
pub mod losses;
pub mod models;
pub mod numkit;
pub mod synthdata;
pub mod tensorfile;
pub mod txtattack;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = numkit::Tensor<f32>;
pub type Tensor64 = numkit::Tensor<f64>;
pub type PairedDataset32 = synthdata::PairedDataset<f32>;
pub type PairedDataset64 = synthdata::PairedDataset<f64>;
pub type ImageEncoder32 = models::ImageEncoder<f32>;
pub type ImageEncoder64 = models::ImageEncoder<f64>;
pub type TextEncoder32 = models::TextEncoder<f32>;
pub type TextEncoder64 = models::TextEncoder<f64>;
pub type FusionHead32 = models::FusionHead<f32>;
pub type FusionHead64 = models::FusionHead<f64>;
pub type GuidanceSet32 = guidance::GuidanceSet<f32>;
pub type GuidanceSet64 = guidance::GuidanceSet<f64>;
