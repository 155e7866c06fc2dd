//! Glue from configuration to trained models, samples, and metric reports.
//! The command-line tool and the end-to-end tests share these functions.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::classifier::Classifier;
use super::config::{ExperimentConfig, ExtractorKind, MetricConfig, MetricKind, ModelKind};
use crate::data::{
    self, extract_patches, is_test_slide, resize, slide_seed, Checkpoint, Manifest, PatchSpec, SyntheticSlide,
};
use crate::denoiser::{self, ConvDenoiser, ConvDenoiserConfig, TrainReport, TrainableDenoiser};
use crate::error::{Error, Result};
use crate::latent::{self, Autoencoder, AutoencoderConfig};
use crate::metrics::{fid, fit_stats, kid, FeatureExtractor, KidConfig, RandProj};
use crate::nn::{AdamState, ParamSet};
use crate::numerics::{RngStream, Tensor};
use crate::samplers::{self, SampleOutput, SamplerConfig};
use crate::schedule::{NoiseSchedule, ScheduleConfig};

pub type Labeled = Vec<(Tensor, usize)>;

/// Train and held-out test patches, split by slide.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Labeled,
    pub test: Labeled,
    pub manifest: Manifest,
}

/// Extracts every slide yielded by `slide_at(class, index)` and splits
/// 80/20 by slide.
pub fn extract_split(
    classes: usize,
    slides_per_class: usize,
    spec: &PatchSpec,
    stride: Option<usize>,
    seed: u64,
    mut slide_at: impl FnMut(usize, usize) -> Result<SyntheticSlide>,
) -> Result<Splits> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for k in 0..classes {
        for j in 0..slides_per_class {
            let slide = slide_at(k, j)?;
            let crop = spec.crop_extent(slide.mpp)?;
            let ex = extract_patches::<f64>(&slide, spec, stride.unwrap_or(crop), spec.patch_size_px())?;
            let dst = if is_test_slide(j, slides_per_class) { &mut test } else { &mut train };
            dst.extend(ex.patches.into_iter().map(|p| (p, k)));
        }
    }
    let manifest = Manifest {
        classes,
        mpp: spec.resolution_mpp(),
        fov: spec.fov_microns(),
        patch_px: spec.patch_size_px(),
        count: train.len(),
        seed,
    };
    Ok(Splits { train, test, manifest })
}

/// Loads or synthesises the configured dataset.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Splits> {
    let d = &cfg.dataset;
    if let Some(preset) = d.preset {
        let seed = cfg.seed;
        return extract_split(
            data::NUM_CLASSES,
            d.slides_per_class,
            &preset.spec(),
            d.stride,
            seed,
            |k, j| data::generate_slide_with(k, slide_seed(seed, k, j), d.extent, data::DEFAULT_MPP),
        );
    }
    let root = d.path.as_ref().expect("validated");
    let (train, manifest) = data::read_dataset(&root.join("train"))?;
    let (test, _) = data::read_dataset(&root.join("test"))?;
    Ok(Splits { train, test, manifest })
}

fn dataset_shape(train: &[(Tensor, usize)]) -> Result<(usize, usize)> {
    let (first, _) = train
        .first()
        .ok_or_else(|| Error::InsufficientData("training set is empty".into()))?;
    let s = first.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::Contract(format!("expected square [c, p, p] patches, got {s:?}")));
    }
    Ok((s[0], s[1]))
}

/// A pixel- or latent-space diffusion model ready to sample.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub kind: ModelKind,
    pub schedule_config: ScheduleConfig,
    pub schedule: NoiseSchedule,
    pub denoiser: ConvDenoiser,
    pub ae: Option<Autoencoder>,
    pub num_classes: usize,
    pub image_channels: usize,
    /// Training patch extent in pixels.
    pub train_px: usize,
}

impl TrainedModel {
    /// Freshly initialised (untrained) model for the given data geometry.
    pub fn init(cfg: &ExperimentConfig, channels: usize, num_classes: usize, train_px: usize, ae: Option<Autoencoder>) -> Result<Self> {
        let den_channels = match (cfg.model.kind, &ae) {
            (ModelKind::Ddpm, _) => channels,
            (ModelKind::Ldm, Some(ae)) => ae.config().latent_channels,
            (ModelKind::Ldm, None) => return Err(Error::Contract("latent model needs an autoencoder".into())),
        };
        let d = &cfg.model.denoiser;
        let dcfg = ConvDenoiserConfig {
            channels: den_channels,
            num_classes,
            width: d.width,
            depth: d.depth,
            time_dim: d.time_dim,
            emb_dim: d.emb_dim,
        };
        let mut rng = RngStream::with_stream(cfg.seed, 0xd3).child(0);
        Ok(TrainedModel {
            kind: cfg.model.kind,
            schedule_config: cfg.schedule,
            schedule: cfg.schedule.build()?,
            denoiser: ConvDenoiser::new(dcfg, &mut rng)?,
            ae,
            num_classes,
            image_channels: channels,
            train_px,
        })
    }

    /// Samples `n` images of `class`; an empty `target_size` means the
    /// training extent.
    pub fn sample(&self, cfg: &SamplerConfig, class: Option<usize>, n: usize, rng: &mut RngStream) -> Result<SampleOutput> {
        let mut cfg = cfg.clone();
        if cfg.target_size.is_empty() {
            cfg.target_size = vec![self.train_px, self.train_px];
        }
        match &self.ae {
            None => samplers::sample(&self.denoiser, &self.schedule, &cfg, class, n, rng),
            Some(ae) => latent::ldm_sample(ae, &self.denoiser, &self.schedule, &cfg, class, n, rng),
        }
    }

    /// `per_class` images of every class, class-major; class `k` draws from
    /// child stream `k` of `seed`.
    pub fn generate_labeled(&self, cfg: &SamplerConfig, per_class: usize, seed: u64) -> Result<Labeled> {
        let mut out = Vec::with_capacity(per_class * self.num_classes);
        for k in 0..self.num_classes {
            let mut rng = RngStream::with_stream(seed, 0x9e4).child(k as u64);
            let s = self.sample(cfg, Some(k), per_class, &mut rng)?;
            out.extend(s.samples.unstack().into_iter().map(|x| (x, k)));
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let component = match self.kind {
            ModelKind::Ddpm => "ddpm",
            ModelKind::Ldm => "ldm",
        };
        let mut c = Checkpoint::new(component);
        c.set_meta("schedule", self.schedule_config)?;
        c.set_meta("num_classes", self.num_classes)?;
        c.set_meta("image_channels", self.image_channels)?;
        c.set_meta("train_px", self.train_px)?;
        c.set_meta("denoiser", self.denoiser.config())?;
        c.push_params("denoiser.", self.denoiser.params());
        if let Some(ae) = &self.ae {
            c.set_meta("autoencoder", ae.config())?;
            c.set_meta("latent_scale", ae.latent_scale())?;
            c.push_params("ae.", ae.params());
        }
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let kind = match c.component() {
            Some("ddpm") => ModelKind::Ddpm,
            Some("ldm") => ModelKind::Ldm,
            other => {
                return Err(Error::Contract(format!(
                    "checkpoint holds {other:?}, expected a diffusion model"
                )))
            }
        };
        let schedule_config: ScheduleConfig = c.meta_as("schedule")?;
        let dcfg: ConvDenoiserConfig = c.meta_as("denoiser")?;
        let mut params = ConvDenoiser::<f64>::new(dcfg, &mut RngStream::new(0))?.params().clone();
        c.load_params("denoiser.", &mut params)?;
        let ae = match kind {
            ModelKind::Ddpm => None,
            ModelKind::Ldm => Some(ae_from_checkpoint_prefixed(c, "ae.")?),
        };
        Ok(TrainedModel {
            kind,
            schedule_config,
            schedule: schedule_config.build()?,
            denoiser: ConvDenoiser::from_params(dcfg, params)?,
            ae,
            num_classes: c.meta_as("num_classes")?,
            image_channels: c.meta_as("image_channels")?,
            train_px: c.meta_as("train_px")?,
        })
    }
}

pub fn ae_to_checkpoint(ae: &Autoencoder) -> Result<Checkpoint> {
    let mut c = Checkpoint::new("ae");
    c.set_meta("autoencoder", ae.config())?;
    c.set_meta("latent_scale", ae.latent_scale())?;
    c.set_meta("usage", &ae.usage.counts)?;
    c.push_params("ae.", ae.params());
    Ok(c)
}

pub fn ae_from_checkpoint(c: &Checkpoint) -> Result<Autoencoder> {
    c.expect_component("ae")?;
    let mut ae = ae_from_checkpoint_prefixed(c, "ae.")?;
    if let Ok(counts) = c.meta_as::<Vec<u64>>("usage") {
        ae.usage.counts = counts;
    }
    Ok(ae)
}

fn ae_from_checkpoint_prefixed(c: &Checkpoint, prefix: &str) -> Result<Autoencoder> {
    let cfg: AutoencoderConfig = c.meta_as("autoencoder")?;
    let mut params: ParamSet<f64> = Autoencoder::new(cfg, &mut RngStream::new(0))?.params().clone();
    c.load_params(prefix, &mut params)?;
    Autoencoder::from_params(cfg, &params, c.meta_as("latent_scale")?)
}

/// Trains the autoencoder on the training images and calibrates its
/// latent scale.
pub fn train_autoencoder(cfg: &ExperimentConfig, train: &[(Tensor, usize)]) -> Result<(Autoencoder, TrainReport)> {
    let (channels, _) = dataset_shape(train)?;
    let a = &cfg.model.autoencoder;
    let ae_cfg = AutoencoderConfig {
        channels,
        latent_channels: a.latent_channels,
        width: a.width,
        codebook_size: a.codebook_size,
    };
    let root = RngStream::with_stream(cfg.seed, 0xae);
    let mut ae = Autoencoder::new(ae_cfg, &mut root.child(0))?;
    let images: Vec<Tensor> = train.iter().map(|(x, _)| x.clone()).collect();
    let mut opt = AdamState::new(ae.params(), cfg.optimizer);
    let report = latent::train_ae(&mut ae, &images, &mut opt, &cfg.ae_train, &mut root.child(1))?;
    ae.calibrate_scale(&images)?;
    Ok((ae, report))
}

/// Trains the configured diffusion model. For LDM, `ae` supplies a
/// pretrained autoencoder; otherwise one is trained first.
pub fn train_model(cfg: &ExperimentConfig, train: &[(Tensor, usize)], num_classes: usize, ae: Option<Autoencoder>) -> Result<(TrainedModel, TrainReport)> {
    let (channels, px) = dataset_shape(train)?;
    let ae = match cfg.model.kind {
        ModelKind::Ddpm => None,
        ModelKind::Ldm => Some(match ae {
            Some(ae) => ae,
            None => train_autoencoder(cfg, train)?.0,
        }),
    };
    let mut model = TrainedModel::init(cfg, channels, num_classes, px, ae)?;
    let mut opt = AdamState::new(model.denoiser.params(), cfg.optimizer);
    let mut rng = RngStream::with_stream(cfg.seed, 0x7a1);
    let report = match &model.ae {
        None => denoiser::train(&mut model.denoiser, train, &model.schedule, &mut opt, &cfg.train, &mut rng)?,
        Some(ae) => latent::train_latent_denoiser(ae, &mut model.denoiser, train, &model.schedule, &mut opt, &cfg.train, &mut rng)?,
    };
    Ok((model, report))
}

/// Boxed feature extractor of the configured kind.
pub fn extractor<'a>(kind: ExtractorKind, classifier: Option<&'a Classifier>) -> Result<Box<dyn FeatureExtractor<f64> + 'a>> {
    match kind {
        ExtractorKind::Randproj => Ok(Box::new(RandProj::default())),
        ExtractorKind::Classifier => classifier
            .map(|c| Box::new(c.clone()) as Box<dyn FeatureExtractor<f64>>)
            .ok_or_else(|| Error::Contract("classifier extractor needs a trained classifier".into())),
    }
}

/// Stacks images, resizing any whose extent differs from `px`.
pub fn batch_at(items: &[Tensor], px: usize) -> Result<Tensor> {
    let resized: Vec<Tensor> = items
        .iter()
        .map(|x| {
            if x.shape()[1] == px && x.shape()[2] == px {
                Ok(x.clone())
            } else {
                resize(x, px, px)
            }
        })
        .collect::<Result<_>>()?;
    if resized.is_empty() {
        return Err(Error::InsufficientData("no images".into()));
    }
    Tensor::stack(&resized)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    pub extractor: String,
    pub n_real: usize,
    pub n_gen: usize,
    pub config: serde_json::Value,
}

/// FID and/or KID between real and generated images, both brought to the
/// real images' extent before feature extraction.
pub fn compare(
    real: &[Tensor],
    generated: &[Tensor],
    fx: &dyn FeatureExtractor<f64>,
    cfg: &MetricConfig,
    seed: u64,
) -> Result<Vec<MetricReport>> {
    let px = real
        .first()
        .ok_or_else(|| Error::InsufficientData("no real images".into()))?
        .shape()[1];
    let fr = fx.extract(&batch_at(real, px)?)?;
    let fg = fx.extract(&batch_at(generated, px)?)?;
    let mut out = Vec::new();
    let base = |metric: &str, value, std, config| MetricReport {
        metric: metric.into(),
        value,
        std,
        extractor: fx.name().into(),
        n_real: real.len(),
        n_gen: generated.len(),
        config,
    };
    if matches!(cfg.metric, MetricKind::Fid | MetricKind::Both) {
        let v = fid(&fit_stats(&fr)?, &fit_stats(&fg)?)?;
        out.push(base("fid", v, None, serde_json::json!({ "dim": fx.dim() })));
    }
    if matches!(cfg.metric, MetricKind::Kid | MetricKind::Both) {
        let kcfg = KidConfig {
            subset_size: cfg.kid.subset_size.min(real.len()).min(generated.len()),
            ..cfg.kid
        };
        let r = kid(&fr, &fg, &kcfg, &mut RngStream::with_stream(seed, 0x6b1d))?;
        out.push(base("kid", r.mean, Some(r.std), serde_json::to_value(kcfg).expect("kid config")));
    }
    Ok(out)
}

pub fn images(items: &[(Tensor, usize)]) -> Vec<Tensor> {
    items.iter().map(|(x, _)| x.clone()).collect()
}

/// Loads an extraction output, accepting either its root (with `train/`)
/// or a single patch directory.
pub fn read_patch_dir(root: &Path) -> Result<(Labeled, Manifest)> {
    if root.join(data::MANIFEST).exists() {
        data::read_dataset(root)
    } else {
        data::read_dataset(&root.join("train"))
    }
}

pub fn classifier_to_checkpoint(net: &Classifier) -> Result<Checkpoint> {
    let mut c = Checkpoint::new("classifier");
    c.set_meta("channels", net.channels())?;
    c.set_meta("num_classes", net.num_classes())?;
    c.set_meta("widths", net.widths())?;
    c.push_params("cls.", net.params());
    Ok(c)
}

pub fn classifier_from_checkpoint(c: &Checkpoint) -> Result<Classifier> {
    c.expect_component("classifier")?;
    let channels = c.meta_as("channels")?;
    let num_classes = c.meta_as("num_classes")?;
    let widths = c.meta_as("widths")?;
    let mut params = Classifier::<f64>::new(channels, num_classes, widths, &mut RngStream::new(0))?
        .params()
        .clone();
    c.load_params("cls.", &mut params)?;
    Classifier::from_params(channels, num_classes, widths, &params)
}
