use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::cifar::CIFAR10_CLASSES;
use super::vocab::{detokenize, tokenize, TokenSeq, Vocab, ATTRIBUTE_GROUPS};
use crate::error::{config_err, format_err, Result};
use crate::numkit::{image_dims, resize_to, Image, RngStream, Tensor};
use crate::scalar::Scalar;
use crate::tensorfile::TensorFile;

/// Caption templates; `{}` is replaced by the attribute words followed by
/// the class name. Caption `j` of an image uses template `j % 2`.
pub const CAPTION_TEMPLATES: [&str; 2] = ["a photo of a {}", "there is a {} in this photo"];

/// Images with matched captions and class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset<T> {
    /// `B×C×H×W`, values in `[0, 1]`.
    pub images: Tensor<T>,
    pub captions: Vec<Vec<TokenSeq>>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub vocab: Vocab,
}

impl<T: Scalar> PairedDataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image(&self, i: usize) -> Result<Image<T>> {
        Image::from_batch(&self.images, i)
    }

    /// `(C, H, W)` of the images.
    pub fn image_dims(&self) -> Result<(usize, usize, usize)> {
        let (_, c, h, w) = image_dims(&self.images)?;
        Ok((c, h, w))
    }

    pub fn caption_text(&self, i: usize, j: usize) -> String {
        detokenize(&self.captions[i][j], &self.vocab)
    }

    pub fn validate(&self) -> Result<()> {
        let (b, ..) = image_dims(&self.images)?;
        if b != self.labels.len() || b != self.captions.len() {
            return Err(format_err!(
                "dataset has {b} images, {} labels, {} caption lists",
                self.labels.len(),
                self.captions.len()
            ));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.class_names.len()) {
            return Err(format_err!("label {l} outside {} classes", self.class_names.len()));
        }
        if self.captions.iter().any(Vec::is_empty) {
            return Err(format_err!("every image needs at least one caption"));
        }
        if self
            .images
            .data()
            .iter()
            .any(|&x| !(x >= T::zero() && x <= T::one()))
        {
            return Err(format_err!("pixel values must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (_, c, h, w) = image_dims(&self.images)?;
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            data.extend_from_slice(self.images.row(i));
        }
        Ok(Self {
            images: Tensor::new(vec![indices.len(), c, h, w], data)?,
            captions: indices.iter().map(|&i| self.captions[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            vocab: self.vocab.clone(),
        })
    }

    /// Deterministic split: every `stride`-th example (starting at `offset`)
    /// goes to the second part.
    pub fn split_every(&self, stride: usize, offset: usize) -> Result<(Self, Self)> {
        let (held, kept): (Vec<usize>, Vec<usize>) =
            (0..self.len()).partition(|i| stride > 0 && i % stride == offset % stride);
        Ok((self.subset(&kept)?, self.subset(&held)?))
    }
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
    pub captions_per_image: usize,
    /// Probability that an image carries an attribute from each group.
    pub attribute_prob: f64,
    /// Blend weight of an attribute's visual effect.
    pub attribute_strength: f64,
    /// Prototype `k` is `(1 − c)·base + c·u_k` with a shared uniform `base`
    /// and per-class uniform `u_k`; `1.0` gives independent prototypes.
    pub class_contrast: f64,
    /// When set, uniform fields are drawn on a `cells × cells` grid and
    /// bilinearly upsampled, giving spatially smooth prototypes.
    pub prototype_cells: Option<usize>,
    /// Defaults to the CIFAR-10 names (or `class<k>` beyond ten classes).
    pub class_names: Option<Vec<String>>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 40,
            channels: 3,
            height: 16,
            width: 16,
            noise_sigma: 0.1,
            captions_per_image: 1,
            attribute_prob: 0.5,
            attribute_strength: 0.25,
            class_contrast: 1.0,
            prototype_cells: None,
            class_names: None,
        }
    }
}

impl SynthSpec {
    pub fn resolved_class_names(&self) -> Vec<String> {
        match &self.class_names {
            Some(names) => names.clone(),
            None => (0..self.classes)
                .map(|k| {
                    if self.classes <= CIFAR10_CLASSES.len() {
                        CIFAR10_CLASSES[k].to_string()
                    } else {
                        format!("class{k}")
                    }
                })
                .collect(),
        }
    }
}

fn apply_attribute<T: Scalar>(img: &mut Image<T>, word: &str, strength: f64) {
    let a = T::c(strength);
    let keep = T::one() - a;
    let (c, h, w) = img.dims();
    let mut blend = |ch: usize, y: usize, x: usize, target: T| {
        let v = &mut img.data[(ch * h + y) * w + x];
        *v = keep * *v + a * target;
    };
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                match word {
                    "dark" => blend(ch, y, x, T::zero()),
                    "bright" => blend(ch, y, x, T::one()),
                    "red" if ch == 0 => blend(ch, y, x, T::one()),
                    "green" if ch == 1 => blend(ch, y, x, T::one()),
                    "blue" if ch == 2 => blend(ch, y, x, T::one()),
                    "striped" if y % 4 < 2 => blend(ch, y, x, T::one()),
                    "framed" if y == 0 || x == 0 || y + 1 == h || x + 1 == w => {
                        blend(ch, y, x, T::one())
                    }
                    _ => {}
                }
            }
        }
    }
}

fn uniform_field<R: Rng>(rng: &mut R, c: usize, h: usize, w: usize, cells: Option<usize>) -> Result<Vec<f64>> {
    match cells {
        None => Ok((0..c * h * w).map(|_| rng.random::<f64>()).collect()),
        Some(g) => {
            let coarse = Image::new(c, g, g, (0..c * g * g).map(|_| rng.random::<f64>()).collect())?;
            Ok(resize_to(&coarse, h, w)?.data)
        }
    }
}

/// Synthetic paired dataset: one uniform-random prototype per class; each
/// sample draws attribute words (rendered into the image and named in its
/// captions) and additive Gaussian pixel noise, then clamps to `[0, 1]`.
/// Labels are class-major. Fully determined by `spec` and `stream`.
pub fn gen_dataset<T: Scalar>(spec: &SynthSpec, vocab: Option<&Vocab>, stream: RngStream) -> Result<PairedDataset<T>> {
    if spec.classes < 2 {
        return Err(config_err!("need at least 2 classes, got {}", spec.classes));
    }
    if spec.per_class < 1 || spec.captions_per_image < 1 {
        return Err(config_err!("per_class and captions_per_image must be at least 1"));
    }
    if !(spec.noise_sigma >= 0.0) || !(0.0..=1.0).contains(&spec.attribute_prob) {
        return Err(config_err!("noise_sigma must be >= 0 and attribute_prob in [0, 1]"));
    }
    if !(spec.class_contrast > 0.0 && spec.class_contrast <= 1.0) {
        return Err(config_err!("class_contrast must be in (0, 1]"));
    }
    if spec.prototype_cells == Some(0) {
        return Err(config_err!("prototype_cells must be at least 1"));
    }
    if spec.channels == 0 || spec.height == 0 || spec.width == 0 {
        return Err(config_err!("image dims must be positive"));
    }
    let class_names = spec.resolved_class_names();
    if class_names.len() != spec.classes {
        return Err(config_err!(
            "{} class names given for {} classes",
            class_names.len(),
            spec.classes
        ));
    }
    let vocab = match vocab {
        Some(v) => {
            if let Some(missing) = class_names.iter().find(|n| !v.contains(n)) {
                return Err(config_err!("vocabulary lacks class name '{missing}'"));
            }
            v.clone()
        }
        None => Vocab::standard(&class_names)?,
    };

    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let n_pix = c * h * w;
    let mut rng = stream.rng();
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| config_err!("noise: {e}"))?;
    let contrast = spec.class_contrast;
    let field = |rng: &mut _| uniform_field(rng, c, h, w, spec.prototype_cells);
    let base: Vec<f64> = if contrast < 1.0 {
        field(&mut rng)?
    } else {
        vec![0.0; n_pix]
    };
    let prototypes: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            Ok(base
                .iter()
                .zip(field(&mut rng)?)
                .map(|(&b, u)| (1.0 - contrast) * b + contrast * u)
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut data = Vec::with_capacity(spec.classes * spec.per_class * n_pix);
    let mut captions = Vec::new();
    let mut labels = Vec::new();
    for (k, proto) in prototypes.iter().enumerate() {
        for _ in 0..spec.per_class {
            let mut words: Vec<&str> = Vec::new();
            for (g, group) in ATTRIBUTE_GROUPS.iter().enumerate() {
                let tint_group = g == 1;
                let draw = rng.random::<f64>() < spec.attribute_prob;
                let pick = rng.random_range(0..group.len());
                if draw && !(tint_group && c != 3) {
                    words.push(group[pick]);
                }
            }
            let mut img = Image::new(c, h, w, proto.iter().map(|&p| T::c(p)).collect())?;
            for word in &words {
                apply_attribute(&mut img, word, spec.attribute_strength);
            }
            for px in img.data.iter_mut() {
                let noisy = px.to_f64_lossy() + noise.sample(&mut rng);
                *px = T::c(noisy.clamp(0.0, 1.0));
            }
            data.extend(img.data);

            let mut phrase: Vec<&str> = words.clone();
            phrase.push(&class_names[k]);
            let phrase = phrase.join(" ");
            captions.push(
                (0..spec.captions_per_image)
                    .map(|j| {
                        let text = CAPTION_TEMPLATES[j % CAPTION_TEMPLATES.len()].replace("{}", &phrase);
                        tokenize(&text, &vocab)
                    })
                    .collect(),
            );
            labels.push(k);
        }
    }
    let ds = PairedDataset {
        images: Tensor::new(vec![labels.len(), c, h, w], data)?,
        captions,
        labels,
        class_names,
        vocab,
    };
    ds.validate()?;
    Ok(ds)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetSidecar {
    class_names: Vec<String>,
    labels: Vec<usize>,
    captions: Vec<Vec<String>>,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

/// Writes images to `path` (tensor file, tensor `images`) and captions,
/// labels and class names to the JSON sidecar next to it.
pub fn save_dataset<T: Scalar>(ds: &PairedDataset<T>, path: &Path) -> Result<()> {
    let mut file = TensorFile::new();
    file.insert("images", &ds.images)?;
    file.write(path)?;
    let sidecar = DatasetSidecar {
        class_names: ds.class_names.clone(),
        labels: ds.labels.clone(),
        captions: (0..ds.len())
            .map(|i| (0..ds.captions[i].len()).map(|j| ds.caption_text(i, j)).collect())
            .collect(),
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_dataset<T: Scalar>(path: &Path) -> Result<PairedDataset<T>> {
    let file = TensorFile::read(path)?;
    let images = file.get::<T>("images")?;
    let sidecar: DatasetSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    let vocab = Vocab::standard(&sidecar.class_names)?;
    let captions = sidecar
        .captions
        .iter()
        .map(|caps| caps.iter().map(|c| tokenize(c, &vocab)).collect())
        .collect();
    let ds = PairedDataset {
        images,
        captions,
        labels: sidecar.labels,
        class_names: sidecar.class_names,
        vocab,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{lp_norm, Norm};

    fn small(sigma: f64) -> SynthSpec {
        SynthSpec {
            classes: 2,
            per_class: 3,
            channels: 3,
            height: 4,
            width: 4,
            noise_sigma: sigma,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn counts_and_labels() {
        let ds: PairedDataset<f32> = gen_dataset(&small(0.1), None, RngStream::new(1, 0)).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.labels, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(ds.images.shape(), &[6, 3, 4, 4]);
        assert!(ds.captions.iter().all(|c| c.len() == 1));
    }

    #[test]
    fn zero_noise_without_attributes_reproduces_prototypes() {
        let spec = SynthSpec {
            attribute_prob: 0.0,
            ..small(0.0)
        };
        let ds: PairedDataset<f64> = gen_dataset(&spec, None, RngStream::new(5, 0)).unwrap();
        assert_eq!(ds.images.row(0), ds.images.row(1));
        assert_eq!(ds.images.row(0), ds.images.row(2));
        assert_ne!(ds.images.row(0), ds.images.row(3));
        assert_eq!(ds.caption_text(0, 0), "a photo of a airplane");
    }

    #[test]
    fn deterministic_given_seed() {
        let a: PairedDataset<f32> = gen_dataset(&small(0.1), None, RngStream::new(9, 2)).unwrap();
        let b: PairedDataset<f32> = gen_dataset(&small(0.1), None, RngStream::new(9, 2)).unwrap();
        assert_eq!(a, b);
        let c: PairedDataset<f32> = gen_dataset(&small(0.1), None, RngStream::new(10, 2)).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn captions_name_rendered_attributes() {
        let spec = SynthSpec {
            attribute_prob: 1.0,
            captions_per_image: 2,
            ..small(0.0)
        };
        let ds: PairedDataset<f64> = gen_dataset(&spec, None, RngStream::new(3, 0)).unwrap();
        for i in 0..ds.len() {
            let first = ds.caption_text(i, 0);
            let words: Vec<&str> = first.split(' ').collect();
            assert_eq!(words.len(), 4 + 3 + 1, "{first}");
            assert!(ds.caption_text(i, 1).starts_with("there is a"));
        }
    }

    #[test]
    fn vocabulary_lacking_class_names_is_config_error() {
        let v = Vocab::standard(&["cat".to_string()]).unwrap();
        let err = gen_dataset::<f32>(&small(0.1), Some(&v), RngStream::new(0, 0)).unwrap_err();
        assert!(matches!(err, crate::Error::Config(_)));
    }

    #[test]
    fn invalid_specs() {
        let one = SynthSpec { classes: 1, ..small(0.1) };
        assert!(gen_dataset::<f32>(&one, None, RngStream::new(0, 0)).is_err());
        let neg = small(-1.0);
        assert!(gen_dataset::<f32>(&neg, None, RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn classes_are_separable_at_small_sigma() {
        let spec = SynthSpec {
            classes: 4,
            per_class: 6,
            height: 8,
            width: 8,
            noise_sigma: 0.05,
            ..SynthSpec::default()
        };
        let ds: PairedDataset<f64> = gen_dataset(&spec, None, RngStream::new(11, 0)).unwrap();
        let (mut intra, mut ni, mut inter, mut ne) = (0.0, 0, 0.0, 0);
        for i in 0..ds.len() {
            for j in i + 1..ds.len() {
                let d: Vec<f64> = ds.images.row(i).iter().zip(ds.images.row(j)).map(|(a, b)| a - b).collect();
                let dist = lp_norm(&d, Norm::L2);
                if ds.labels[i] == ds.labels[j] {
                    intra += dist;
                    ni += 1;
                } else {
                    inter += dist;
                    ne += 1;
                }
            }
        }
        assert!(intra / ni as f64 <= inter / ne as f64 * 0.8);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.fgak");
        let spec = SynthSpec { captions_per_image: 2, ..small(0.1) };
        let ds: PairedDataset<f32> = gen_dataset(&spec, None, RngStream::new(2, 0)).unwrap();
        save_dataset(&ds, &path).unwrap();
        let back: PairedDataset<f32> = load_dataset(&path).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn subset_and_split() {
        let ds: PairedDataset<f32> = gen_dataset(&small(0.1), None, RngStream::new(1, 0)).unwrap();
        let s = ds.subset(&[4, 1]).unwrap();
        assert_eq!(s.labels, vec![1, 0]);
        assert_eq!(s.images.row(0), ds.images.row(4));
        let (train, test) = ds.split_every(3, 2).unwrap();
        assert_eq!(train.len(), 4);
        assert_eq!(test.len(), 2);
    }
}
