//! Model checkpoints: a tensor file holding the parameters plus a JSON
//! sidecar (same stem, `.json` extension) holding architecture and run
//! metadata.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::encoders::{FusionHead, FusionSpec, ImageEncoder, ImageEncoderSpec, TextEncoder, TextEncoderSpec};
use super::mlp::{Dense, Mlp};
use crate::error::{format_err, Result};
use crate::numkit::Tensor;
use crate::scalar::Scalar;
use crate::tensorfile::TensorFile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub image: ImageEncoderSpec,
    pub text: TextEncoderSpec,
    pub fusion: Option<FusionSpec>,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub tensors: TensorFile,
    pub meta: CheckpointMeta,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ckpt.tensors.write(path)?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&ckpt.meta)? + "\n")?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let tensors = TensorFile::read(path)?;
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    Ok(Checkpoint { tensors, meta })
}

/// The trained models of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle<T> {
    pub image: ImageEncoder<T>,
    pub text: TextEncoder<T>,
    pub fusion: Option<FusionHead<T>>,
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend(hidden);
    w.push(output);
    w
}

fn read_dense<T: Scalar>(tf: &TensorFile, prefix: &str, inputs: usize, outputs: usize) -> Result<Dense<T>> {
    Ok(Dense {
        weight: tf.get_shaped(&format!("{prefix}.weight"), &[outputs, inputs])?,
        bias: tf.get_shaped(&format!("{prefix}.bias"), &[outputs])?.into_data(),
    })
}

fn read_mlp<T: Scalar>(tf: &TensorFile, prefix: &str, widths: &[usize], tanh_output: bool) -> Result<Mlp<T>> {
    if widths.contains(&0) {
        return Err(format_err!("checkpoint declares a zero-width layer in '{prefix}'"));
    }
    let layers = widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| read_dense(tf, &format!("{prefix}.{i}"), w[0], w[1]))
        .collect::<Result<_>>()?;
    Ok(Mlp { layers, tanh_output })
}

impl<T: Scalar> ModelBundle<T> {
    pub fn to_checkpoint(&self, seed: u64, config_hash: &str) -> Result<Checkpoint> {
        let mut tf = TensorFile::new();
        for (name, t) in self.image.mlp.named_tensors("image") {
            tf.insert(name, &t)?;
        }
        tf.insert("image.input_mean", &Tensor::from_vec(self.image.input_mean.clone()))?;
        tf.insert("image.input_gain", &Tensor::from_vec(vec![self.image.input_gain]))?;
        tf.insert("text.table", &self.text.table)?;
        for (name, t) in self.text.mlp.named_tensors("text") {
            tf.insert(name, &t)?;
        }
        if let Some(f) = &self.fusion {
            for (name, t) in f.projector.named_tensors("fusion") {
                tf.insert(name, &t)?;
            }
            tf.insert("head.weight", &f.head.weight)?;
            tf.insert("head.bias", &Tensor::from_vec(f.head.bias.clone()))?;
        }
        Ok(Checkpoint {
            tensors: tf,
            meta: CheckpointMeta {
                image: self.image.spec.clone(),
                text: self.text.spec.clone(),
                fusion: self.fusion.as_ref().map(|f| f.spec.clone()),
                seed,
                config_hash: config_hash.to_string(),
            },
        })
    }

    /// Rebuilds the models, checking every tensor against the dims the
    /// metadata declares.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let tf = &ckpt.tensors;
        let is = &ckpt.meta.image;
        let n_pix = is.channels * is.height * is.width;
        let image = ImageEncoder {
            spec: is.clone(),
            input_mean: tf.get_shaped::<T>("image.input_mean", &[n_pix])?.into_data(),
            input_gain: tf.get_shaped::<T>("image.input_gain", &[1])?.data()[0],
            mlp: read_mlp(tf, "image", &widths(is.channels * is.height * is.width, &is.hidden, is.embed_dim), false)?,
        };
        let ts = &ckpt.meta.text;
        let text = TextEncoder {
            spec: ts.clone(),
            table: tf.get_shaped("text.table", &[ts.vocab_size, ts.token_dim])?,
            mlp: read_mlp(tf, "text", &widths(ts.token_dim, &ts.hidden, ts.embed_dim), false)?,
        };
        let fusion = match &ckpt.meta.fusion {
            None => None,
            Some(fs) => Some(FusionHead {
                spec: fs.clone(),
                projector: read_mlp(tf, "fusion", &widths(fs.image_dim + fs.text_dim, &fs.hidden, fs.fused_dim), true)?,
                head: read_dense(tf, "head", fs.fused_dim, fs.classes)?,
            }),
        };
        Ok(Self { image, text, fusion })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::RngStream;

    fn bundle() -> ModelBundle<f32> {
        let s = RngStream::new(3, 0);
        let ispec = ImageEncoderSpec {
            channels: 1,
            height: 4,
            width: 4,
            hidden: vec![5],
            embed_dim: 3,
            normalize: true,
        };
        let tspec = TextEncoderSpec {
            vocab_size: 6,
            token_dim: 4,
            hidden: vec![],
            embed_dim: 3,
            normalize: true,
        };
        let fspec = FusionSpec {
            image_dim: 3,
            text_dim: 3,
            hidden: vec![4],
            fused_dim: 2,
            classes: 2,
        };
        ModelBundle {
            image: ImageEncoder::new(&ispec, s.child(0)).unwrap(),
            text: TextEncoder::new(&tspec, s.child(1)).unwrap(),
            fusion: Some(FusionHead::new(&fspec, s.child(2)).unwrap()),
        }
    }

    #[test]
    fn save_load_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fgak");
        let b = bundle();
        let ck = b.to_checkpoint(3, "abc").unwrap();
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(ModelBundle::<f32>::from_checkpoint(&back).unwrap(), b);
    }

    #[test]
    fn dim_mismatch_is_format_error() {
        let mut ck = bundle().to_checkpoint(0, "").unwrap();
        ck.meta.image.hidden = vec![6];
        let err = ModelBundle::<f32>::from_checkpoint(&ck).unwrap_err();
        assert!(matches!(err, crate::Error::Format(_)), "{err}");
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fgak");
        save_checkpoint(&path, &bundle().to_checkpoint(0, "").unwrap()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(crate::Error::Format(_))));
    }
}
