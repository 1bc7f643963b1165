//! CIFAR-10 binary batches: 3073-byte records, one label byte followed by
//! the 1024-byte red, green and blue planes of a 32×32 image.

use std::path::Path;

use super::dataset::{PairedDataset, CAPTION_TEMPLATES};
use super::vocab::{tokenize, Vocab};
use crate::error::{format_err, Result};
use crate::numkit::Tensor;
use crate::scalar::Scalar;

pub const CIFAR_RECORD_LEN: usize = 3073;
const SIDE: usize = 32;
const PIXELS: usize = 3 * SIDE * SIDE;

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

/// Parses CIFAR-10 records from memory; captions are
/// `"a photo of a {class}"`.
pub fn read_cifar10<T: Scalar>(bytes: &[u8]) -> Result<PairedDataset<T>> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_LEN) {
        return Err(format_err!(
            "CIFAR-10 file length {} is not a multiple of {CIFAR_RECORD_LEN}",
            bytes.len()
        ));
    }
    let class_names: Vec<String> = CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect();
    let vocab = Vocab::standard(&class_names)?;
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let inv = T::c(1.0 / 255.0);
    let mut data = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    let mut captions = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(format_err!("record {r} has label byte {label} > 9"));
        }
        data.extend(rec[1..].iter().map(|&b| T::c(b as f64) * inv));
        labels.push(label);
        let text = CAPTION_TEMPLATES[0].replace("{}", CIFAR10_CLASSES[label]);
        captions.push(vec![tokenize(&text, &vocab)]);
    }
    Ok(PairedDataset {
        images: Tensor::new(vec![n, 3, SIDE, SIDE], data)?,
        captions,
        labels,
        class_names,
        vocab,
    })
}

pub fn load_cifar10<T: Scalar>(path: &Path) -> Result<PairedDataset<T>> {
    read_cifar10(&std::fs::read(path)?)
}

/// Serializes 3×32×32 images with labels < 10 into the CIFAR-10 layout,
/// quantizing pixels to `round(255 x)`.
pub fn write_cifar10<T: Scalar>(ds: &PairedDataset<T>) -> Result<Vec<u8>> {
    if ds.images.shape()[1..] != [3, SIDE, SIDE] {
        return Err(format_err!("CIFAR-10 records must be 3x32x32, got {:?}", ds.images.shape()));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD_LEN);
    for (i, &label) in ds.labels.iter().enumerate() {
        if label > 9 {
            return Err(format_err!("label {label} does not fit CIFAR-10"));
        }
        out.push(label as u8);
        out.extend(
            ds.images
                .row(i)
                .iter()
                .map(|&x| (x.to_f64_lossy() * 255.0).round().clamp(0.0, 255.0) as u8),
        );
    }
    Ok(out)
}
