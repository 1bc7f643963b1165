//! Run configuration: one JSON document with a section per subcommand.
//! Every field has a default and unknown keys are rejected.

use std::path::{Path, PathBuf};

use fgakit::evalkit::{EPS_GRID_255, RECALL_KS, STEP_GRID};
use fgakit::imgattack::{AttackConfig, PatchConfig, DEFAULT_SCALES};
use fgakit::models::{ImageEncoderSpec, TextEncoderSpec, TrainSpec};
use fgakit::numkit::Norm;
use fgakit::synthdata::SynthSpec;
use fgakit::txtattack::CandidateSource;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every random stream of a run derives from it.
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub paths: Paths,
    pub model: ModelConfig,
    pub train: TrainSpec,
    pub attack: AttackSection,
    pub eval: EvalConfig,
    pub transfer: TransferConfig,
    pub ablate: AblateConfig,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            data: DataConfig::default(),
            paths: Paths::default(),
            model: ModelConfig::default(),
            train: TrainSpec::default(),
            attack: AttackSection::default(),
            eval: EvalConfig::default(),
            transfer: TransferConfig::default(),
            ablate: AblateConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

/// Synthetic generator settings that give a toy contrastive model clean
/// accuracy well above chance while leaving room for attacks to act.
pub fn toy_synth() -> SynthSpec {
    SynthSpec {
        classes: 10,
        per_class: 60,
        noise_sigma: 0.02,
        class_contrast: 0.1,
        attribute_strength: 0.05,
        prototype_cells: Some(4),
        ..SynthSpec::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synth: SynthSpec,
    /// CIFAR-10 binary batch to ingest instead of generating.
    pub cifar: Option<PathBuf>,
    /// Keep only the first `n` CIFAR records.
    pub cifar_limit: Option<usize>,
    /// Every `split_stride`-th example (from `split_offset`) is used for
    /// training, the rest for evaluation.
    pub split_stride: usize,
    pub split_offset: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synth: toy_synth(),
            cifar: None,
            cifar_limit: None,
            split_stride: 3,
            split_offset: 0,
        }
    }
}

/// Artifact locations; unset entries default to fixed names in the output
/// directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub adversarial: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image: ImageEncoderSpec,
    /// `vocab_size` is taken from the dataset.
    pub text: TextEncoderSpec,
    /// Fit per-pixel input standardization on the training images.
    pub standardize: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image: ImageEncoderSpec::default(),
            text: TextEncoderSpec::default(),
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Fga,
    Fda,
    FgaT,
    /// Targeted patch attack towards a random other class.
    Patch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceKind {
    ClassMean,
    Prompt,
    DatasetTexts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub method: Method,
    pub guidance: GuidanceKind,
    pub prompt_template: String,
    /// Replace each example's labels by its top-k guiding vectors.
    pub topk: Option<usize>,
    pub topk_union: bool,
    pub norm: Norm,
    /// On the `[0, 1]` pixel scale.
    pub epsilon: f64,
    pub steps: usize,
    pub alpha: Option<f64>,
    pub momentum: bool,
    pub momentum_mu: f64,
    pub q_percentile: f64,
    /// Attack through resized copies at `scales`.
    pub augment: bool,
    pub scales: Vec<f64>,
    pub random_start: bool,
    pub temperature: f64,
    pub text_budget: usize,
    pub text_candidates: CandidateSource,
    pub minibatch: usize,
    pub patch: PatchSection,
}

impl Default for AttackSection {
    fn default() -> Self {
        let core = AttackConfig::default();
        Self {
            method: Method::Fga,
            guidance: GuidanceKind::ClassMean,
            prompt_template: "a photo of a {}".into(),
            topk: None,
            topk_union: false,
            norm: core.norm,
            epsilon: core.epsilon,
            steps: core.steps,
            alpha: core.alpha,
            momentum: core.momentum,
            momentum_mu: core.momentum_mu,
            q_percentile: core.q_percentile,
            augment: false,
            scales: DEFAULT_SCALES.to_vec(),
            random_start: core.random_start,
            temperature: core.temperature,
            text_budget: 1,
            text_candidates: CandidateSource::Synonyms,
            minibatch: 32,
            patch: PatchSection::default(),
        }
    }
}

impl AttackSection {
    pub fn image_config(&self, seed: u64) -> AttackConfig {
        AttackConfig {
            norm: self.norm,
            epsilon: self.epsilon,
            steps: self.steps,
            alpha: self.alpha,
            momentum: self.momentum,
            momentum_mu: self.momentum_mu,
            q_percentile: self.q_percentile,
            scales: self.augment.then(|| self.scales.clone()),
            random_start: self.random_start,
            temperature: self.temperature,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchSection {
    pub steps: usize,
    pub alpha: f64,
    pub area_fraction: f64,
    pub raw_gradient: bool,
}

impl Default for PatchSection {
    fn default() -> Self {
        let p = PatchConfig::default();
        Self {
            steps: p.steps,
            alpha: p.alpha,
            area_fraction: p.area_fraction,
            raw_gradient: p.raw_gradient,
        }
    }
}

impl PatchSection {
    pub fn config(&self, temperature: f64, seed: u64) -> PatchConfig {
        PatchConfig {
            steps: self.steps,
            alpha: self.alpha,
            area_fraction: self.area_fraction,
            raw_gradient: self.raw_gradient,
            temperature,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub prompt_template: String,
    pub ks: Vec<usize>,
    /// Also score the adversarial artifact and report attack success rates.
    pub adversarial: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            prompt_template: "a photo of a {}".into(),
            ks: RECALL_KS.to_vec(),
            adversarial: true,
        }
    }
}

/// Named variants of the text-then-image attack compared for transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferVariant {
    FgaT,
    FgaTAug,
    MfgaTAug,
}

impl TransferVariant {
    pub fn name(self) -> &'static str {
        match self {
            Self::FgaT => "fga-t",
            Self::FgaTAug => "fga-t-aug",
            Self::MfgaTAug => "mfga-t-aug",
        }
    }

    pub fn apply(self, attack: &AttackSection) -> AttackSection {
        let mut a = attack.clone();
        a.method = Method::FgaT;
        a.augment = self != Self::FgaT;
        a.momentum = self == Self::MfgaTAug;
        a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    /// Independently initialized models trained on the same data.
    pub models: usize,
    pub variants: Vec<TransferVariant>,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            models: 2,
            variants: vec![TransferVariant::FgaT, TransferVariant::FgaTAug, TransferVariant::MfgaTAug],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// Budgets on the 0–255 scale, swept at `sweep_steps`.
    pub epsilons_255: Vec<f64>,
    pub sweep_steps: usize,
    /// Step counts, swept at `sweep_epsilon_255`.
    pub steps: Vec<usize>,
    pub sweep_epsilon_255: f64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            epsilons_255: EPS_GRID_255.to_vec(),
            sweep_steps: 1,
            steps: STEP_GRID.to_vec(),
            sweep_epsilon_255: 0.5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Report files to merge.
    pub inputs: Vec<PathBuf>,
}

impl RunConfig {
    /// Parses a config document, naming the offending key on failure.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| CliError::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    /// Makes every relative path relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !base.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out);
        for p in [
            &mut self.data.cifar,
            &mut self.paths.train_data,
            &mut self.paths.test_data,
            &mut self.paths.checkpoint,
            &mut self.paths.adversarial,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        self.report.inputs.iter_mut().for_each(fix);
    }

    pub fn train_data(&self) -> PathBuf {
        self.paths.train_data.clone().unwrap_or_else(|| self.out.join("train.fgak"))
    }

    pub fn test_data(&self) -> PathBuf {
        self.paths.test_data.clone().unwrap_or_else(|| self.out.join("test.fgak"))
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.paths.checkpoint.clone().unwrap_or_else(|| self.out.join("model.fgak"))
    }

    pub fn adversarial(&self) -> PathBuf {
        self.paths.adversarial.clone().unwrap_or_else(|| self.out.join("adv.fgak"))
    }

    /// Hex SHA-256 of the compact JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}
