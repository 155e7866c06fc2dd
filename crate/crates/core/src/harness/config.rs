//! Versioned JSON experiment configuration. Unknown keys are rejected at
//! every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::classifier::ClassifierConfig;
use crate::data::Preset;
use crate::denoiser::TrainConfig;
use crate::error::{Error, Result};
use crate::latent::AeTrainConfig;
use crate::metrics::KidConfig;
use crate::nn::AdamConfig;
use crate::samplers::SamplerConfig;
use crate::schedule::ScheduleConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ddpm,
    Ldm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Synthesise this preset in memory.
    #[serde(default)]
    pub preset: Option<Preset>,
    /// Or read an `extract` output directory (with `train/` and `test/`).
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "default_slides")]
    pub slides_per_class: usize,
    #[serde(default = "default_extent")]
    pub extent: usize,
    /// Extraction stride in slide pixels; defaults to the crop extent.
    #[serde(default)]
    pub stride: Option<usize>,
}

fn default_slides() -> usize {
    5
}
fn default_extent() -> usize {
    crate::data::DEFAULT_EXTENT
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            preset: Some(Preset::Toy224),
            path: None,
            slides_per_class: default_slides(),
            extent: default_extent(),
            stride: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserSection {
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_time_dim")]
    pub time_dim: usize,
    #[serde(default = "default_emb")]
    pub emb_dim: usize,
}

fn default_width() -> usize {
    16
}
fn default_depth() -> usize {
    5
}
fn default_time_dim() -> usize {
    64
}
fn default_emb() -> usize {
    32
}

impl Default for DenoiserSection {
    fn default() -> Self {
        DenoiserSection {
            width: default_width(),
            depth: default_depth(),
            time_dim: default_time_dim(),
            emb_dim: default_emb(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderSection {
    #[serde(default = "default_latent")]
    pub latent_channels: usize,
    #[serde(default = "default_ae_width")]
    pub width: usize,
    #[serde(default)]
    pub codebook_size: Option<usize>,
}

fn default_latent() -> usize {
    4
}
fn default_ae_width() -> usize {
    16
}

impl Default for AutoencoderSection {
    fn default() -> Self {
        AutoencoderSection {
            latent_channels: default_latent(),
            width: default_ae_width(),
            codebook_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default)]
    pub denoiser: DenoiserSection,
    #[serde(default)]
    pub autoencoder: AutoencoderSection,
    /// Pretrained autoencoder for LDM; trained from scratch when absent.
    #[serde(default)]
    pub ae_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Fid,
    Kid,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    Classifier,
    Randproj,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    #[serde(default = "default_metric")]
    pub metric: MetricKind,
    #[serde(default = "default_extractor")]
    pub extractor: ExtractorKind,
    #[serde(default)]
    pub kid: KidConfig,
    /// Generated images per class for evaluation.
    #[serde(default = "default_per_class")]
    pub gen_per_class: usize,
}

fn default_metric() -> MetricKind {
    MetricKind::Both
}
fn default_extractor() -> ExtractorKind {
    ExtractorKind::Classifier
}
fn default_per_class() -> usize {
    40
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            metric: default_metric(),
            extractor: default_extractor(),
            kid: KidConfig::default(),
            gen_per_class: default_per_class(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub ae_train: AeTrainConfig,
    #[serde(default = "default_sampler")]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub metrics: MetricConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_sampler() -> SamplerConfig {
    SamplerConfig::ddim(50, 0.0)
}

impl ExperimentConfig {
    pub fn new(kind: ModelKind) -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            name: None,
            dataset: DatasetConfig::default(),
            model: ModelConfig {
                kind,
                denoiser: DenoiserSection::default(),
                autoencoder: AutoencoderSection::default(),
                ae_checkpoint: None,
            },
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            optimizer: AdamConfig::default(),
            ae_train: AeTrainConfig::default(),
            sampler: default_sampler(),
            metrics: MetricConfig::default(),
            classifier: ClassifierConfig::default(),
            seed: 0,
            output_dir: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        match (&self.dataset.preset, &self.dataset.path) {
            (Some(_), Some(_)) => return Err(Error::Config("dataset: give either preset or path, not both".into())),
            (None, None) => return Err(Error::Config("dataset: preset or path is required".into())),
            _ => {}
        }
        if self.dataset.slides_per_class == 0 {
            return Err(Error::Config("dataset.slides_per_class must be positive".into()));
        }
        let steps = self.schedule.steps();
        self.sampler
            .validate(steps)
            .map_err(|e| Error::Config(format!("sampler: {e}")))?;
        if self.train.batch_size == 0 || self.ae_train.batch_size == 0 || self.classifier.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.train.p_uncond) {
            return Err(Error::Config("train.p_uncond must be in [0, 1)".into()));
        }
        if !(4..=6).contains(&self.model.denoiser.depth) {
            return Err(Error::Config(format!(
                "model.denoiser.depth must be 4..=6, got {}",
                self.model.denoiser.depth
            )));
        }
        if self.metrics.gen_per_class == 0 {
            return Err(Error::Config("metrics.gen_per_class must be positive".into()));
        }
        Ok(())
    }
}
