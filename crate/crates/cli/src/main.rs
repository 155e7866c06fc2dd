use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use difpath::data::{self, Manifest, PatchSpec, SlideSetManifest};
use difpath::harness::pipeline::{self, TrainedModel};
use difpath::harness::{
    evaluate, run_triplet, train_classifier, ClassifierConfig, ExperimentConfig, ExtractorKind, MetricConfig,
    MetricKind, ModelKind, TrainSource,
};
use difpath::numerics::RngStream;
use difpath::samplers::SamplerConfig;
use difpath::Error;

/// Desk-scale diffusion models for pathology-like patches.
#[derive(Parser)]
#[command(name = "difpath", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    Ddpm,
    Ddim,
    Eps,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Fid,
    Kid,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExtractorArg {
    Classifier,
    Randproj,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic slides.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long)]
        slides_per_class: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = data::DEFAULT_MPP)]
        mpp: f64,
        #[arg(long, default_value_t = data::DEFAULT_EXTENT)]
        extent: usize,
    },
    /// Cut field-of-view patches from a slide set into train/ and test/.
    Extract {
        #[arg(long)]
        slides: PathBuf,
        /// Field of view in microns.
        #[arg(long)]
        fov: f64,
        /// Patch resolution in microns per pixel.
        #[arg(long)]
        mpp: f64,
        /// Output patch extent in pixels.
        #[arg(long)]
        size: usize,
        /// Grid stride in slide pixels.
        #[arg(long)]
        stride: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a diffusion model (pixel or latent) from a config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the autoencoder for latent diffusion.
    TrainAe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw samples from a trained model.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        sampler: SamplerArg,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long = "scale-s")]
        scale_s: Option<f64>,
        /// Output extent in pixels (defaults to the training extent).
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        class: usize,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// FID and/or KID between two patch directories.
    Eval {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        metric: MetricArg,
        #[arg(long, value_enum, default_value = "classifier")]
        extractor: ExtractorArg,
        #[arg(long)]
        cls_ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the patch classifier.
    TrainCls {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Real / generated / combined classifier comparison.
    EvalTriplet {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Field of view in microns of a patch size at a resolution.
    Fov {
        #[arg(long)]
        size: usize,
        #[arg(long)]
        mpp: f64,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 3,
        Error::Io { .. } => 4,
        Error::Format { .. } => 5,
        Error::Parameter(_)
        | Error::Contract(_)
        | Error::Size(_)
        | Error::Extraction(_)
        | Error::DegenerateData(_)
        | Error::InsufficientData(_) => 6,
        Error::Divergence { .. } => 7,
        Error::NotSymmetric { .. } | Error::NotPsd { .. } => 1,
    }
}

fn error_line(code: u8, kind: &str, msg: &str) {
    eprintln!("error: code={code} kind={kind} msg={}", msg.replace('\n', " "));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            error_line(2, "usage", &e.kind().to_string());
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            error_line(code, e.kind(), &e.to_string());
            ExitCode::from(code)
        }
    }
}

fn create_dir(p: &Path) -> difpath::Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string(v).expect("json"));
}

fn load_config(path: &Path) -> difpath::Result<ExperimentConfig> {
    ExperimentConfig::load(path)
}

fn run(cmd: Command) -> difpath::Result<()> {
    match cmd {
        Command::GenData {
            out,
            classes,
            slides_per_class,
            seed,
            mpp,
            extent,
        } => {
            if classes == 0 || classes > data::NUM_CLASSES {
                return Err(Error::Parameter(format!("classes must be 1..={}", data::NUM_CLASSES)));
            }
            if slides_per_class == 0 {
                return Err(Error::Parameter("slides-per-class must be positive".into()));
            }
            let m = SlideSetManifest {
                classes,
                slides_per_class,
                seed,
                mpp,
                extent,
            };
            data::write_slide_set(&out, &m)?;
            print_json(&serde_json::json!({ "slides": classes * slides_per_class, "out": out }));
        }
        Command::Extract {
            slides,
            fov,
            mpp,
            size,
            stride,
            out,
        } => {
            let spec = PatchSpec::from_size(size, mpp)?;
            if (spec.fov_microns() - fov).abs() > 1e-9 * fov.abs().max(1.0) {
                return Err(Error::Parameter(format!(
                    "fov {fov} µm does not equal size × mpp = {}",
                    spec.fov_microns()
                )));
            }
            let m = data::read_slide_manifest(&slides)?;
            let splits = pipeline::extract_split(m.classes, m.slides_per_class, &spec, Some(stride), m.seed, |k, j| {
                data::read_slide(&slides, &m, k, j)
            })?;
            let manifest = splits.manifest.clone();
            data::write_dataset(&out.join("train"), &splits.train, &manifest)?;
            data::write_dataset(&out.join("test"), &splits.test, &manifest)?;
            print_json(&serde_json::json!({ "train": splits.train.len(), "test": splits.test.len() }));
        }
        Command::Train { config, out } => {
            let cfg = load_config(&config)?;
            let splits = pipeline::load_dataset(&cfg)?;
            let ae = match (&cfg.model.kind, &cfg.model.ae_checkpoint) {
                (ModelKind::Ldm, Some(p)) => Some(pipeline::ae_from_checkpoint(&data::load_checkpoint(p)?)?),
                _ => None,
            };
            let (model, report) = pipeline::train_model(&cfg, &splits.train, splits.manifest.classes, ae)?;
            let mut ckpt = model.to_checkpoint()?;
            ckpt.set_meta("dataset", &splits.manifest)?;
            ckpt.set_meta("config", &cfg)?;
            data::save_checkpoint(&out, &ckpt)?;
            print_json(&serde_json::json!({
                "steps": report.step_losses.len(),
                "final_epoch_loss": report.epoch_losses.last(),
            }));
        }
        Command::TrainAe { config, out } => {
            let cfg = load_config(&config)?;
            let splits = pipeline::load_dataset(&cfg)?;
            let (ae, report) = pipeline::train_autoencoder(&cfg, &splits.train)?;
            data::save_checkpoint(&out, &pipeline::ae_to_checkpoint(&ae)?)?;
            print_json(&serde_json::json!({
                "steps": report.step_losses.len(),
                "final_epoch_loss": report.epoch_losses.last(),
                "latent_scale": ae.latent_scale(),
            }));
        }
        Command::Sample {
            ckpt,
            sampler,
            steps,
            eta,
            guidance,
            scale_s,
            size,
            class,
            n,
            seed,
            out,
        } => {
            let c = data::load_checkpoint(&ckpt)?;
            let model = TrainedModel::from_checkpoint(&c)?;
            let mut cfg = match sampler {
                SamplerArg::Ddpm => SamplerConfig::ddpm(),
                SamplerArg::Ddim => SamplerConfig::ddim(steps.unwrap_or(50), eta.unwrap_or(0.0)),
                SamplerArg::Eps => SamplerConfig::eps_scale(scale_s.unwrap_or(1.014)),
            };
            if let Some(w) = guidance {
                cfg.guidance_w = w;
            }
            let px = size.unwrap_or(model.train_px);
            cfg.target_size = vec![px, px];
            create_dir(&out)?;
            if n == 0 {
                // validate the request even when nothing is drawn
                model.sample(&cfg, Some(class), 0, &mut RngStream::new(seed))?;
                print_json(&serde_json::json!({ "written": 0 }));
                return Ok(());
            }
            let mut rng = RngStream::new(seed);
            let s = model.sample(&cfg, Some(class), n, &mut rng)?;
            let items: Vec<_> = s.samples.unstack().into_iter().map(|x| (x, class)).collect();
            let dir = data::class_dir(&out, class);
            create_dir(&dir)?;
            let start = next_free_index(&dir)?;
            for (i, (x, _)) in items.iter().enumerate() {
                data::save_ppm(&dir.join(format!("patch_{}.ppm", start + i)), x)?;
            }
            let train_mpp = c.meta_as::<Manifest>("dataset").map(|m| m.mpp).unwrap_or(1.0);
            let count = count_patches(&out, model.num_classes)?;
            let manifest = Manifest {
                classes: model.num_classes,
                mpp: train_mpp,
                fov: px as f64 * train_mpp,
                patch_px: px,
                count,
                seed,
            };
            data::write_json_report(&out.join(data::MANIFEST), &manifest)?;
            print_json(&serde_json::json!({
                "written": n,
                "denoiser_calls": s.stats.denoiser_calls,
                "sigma_clamps": s.stats.sigma_clamps,
            }));
        }
        Command::Eval {
            real,
            gen,
            metric,
            extractor,
            cls_ckpt,
            out,
        } => {
            let (real_items, _) = pipeline::read_patch_dir(&real)?;
            let (gen_items, _) = data::read_dataset(&gen)?;
            let metric = match metric {
                MetricArg::Fid => MetricKind::Fid,
                MetricArg::Kid => MetricKind::Kid,
                MetricArg::Both => MetricKind::Both,
            };
            let kind = match extractor {
                ExtractorArg::Classifier => ExtractorKind::Classifier,
                ExtractorArg::Randproj => ExtractorKind::Randproj,
            };
            let cls = match (kind, cls_ckpt) {
                (ExtractorKind::Classifier, Some(p)) => {
                    Some(pipeline::classifier_from_checkpoint(&data::load_checkpoint(&p)?)?)
                }
                (ExtractorKind::Classifier, None) => {
                    let classes = real_items.iter().map(|(_, k)| k + 1).max().unwrap_or(0);
                    let (net, _) =
                        train_classifier(&real_items, classes, &ClassifierConfig::default(), &mut RngStream::new(0))?;
                    Some(net)
                }
                _ => None,
            };
            let fx = pipeline::extractor(kind, cls.as_ref())?;
            let mcfg = MetricConfig {
                metric,
                extractor: kind,
                ..MetricConfig::default()
            };
            let reports = pipeline::compare(
                &pipeline::images(&real_items),
                &pipeline::images(&gen_items),
                fx.as_ref(),
                &mcfg,
                0,
            )?;
            let v = if reports.len() == 1 {
                serde_json::to_value(&reports[0])
            } else {
                serde_json::to_value(&reports)
            }
            .expect("report");
            data::write_json_report(&out, &v)?;
            print_json(&v);
        }
        Command::TrainCls { data: dir, out, seed } => {
            let (items, manifest) = pipeline::read_patch_dir(&dir)?;
            let cfg = ClassifierConfig::default();
            let (net, losses) = train_classifier(&items, manifest.classes, &cfg, &mut RngStream::new(seed))?;
            data::save_checkpoint(&out, &pipeline::classifier_to_checkpoint(&net)?)?;
            let test_dir = dir.join("test");
            let accuracy = if test_dir.join(data::MANIFEST).exists() {
                let (test, _) = data::read_dataset(&test_dir)?;
                Some(evaluate(&net, &test, TrainSource::Real, items.len())?.overall_accuracy)
            } else {
                None
            };
            print_json(&serde_json::json!({
                "train_size": items.len(),
                "final_epoch_loss": losses.last(),
                "test_accuracy": accuracy,
            }));
        }
        Command::EvalTriplet { real, gen, out, seed } => {
            let (train, manifest) = data::read_dataset::<f64>(&real.join("train"))?;
            let (test, _) = data::read_dataset(&real.join("test"))?;
            let (generated, _) = data::read_dataset(&gen)?;
            let report = run_triplet(
                &train,
                &generated,
                &test,
                manifest.classes,
                &ClassifierConfig::default(),
                &RngStream::new(seed),
            )?;
            let v = serde_json::to_value(&report).expect("report");
            data::write_json_report(&out, &v)?;
            print_json(&serde_json::json!({
                "real": report.real.overall_accuracy,
                "generated": report.generated.overall_accuracy,
                "combined": report.combined.overall_accuracy,
                "ordering": report.ordering,
            }));
        }
        Command::Fov { size, mpp } => {
            println!("{}", data::fov_of(size, mpp)?);
        }
    }
    Ok(())
}

fn patch_indices(dir: &Path) -> difpath::Result<Vec<usize>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let e = e.map_err(|e| Error::io(dir, e))?;
        let name = e.file_name();
        let name = name.to_string_lossy();
        if let Some(i) = data::patch_index(&name) {
            out.push(i);
        }
    }
    Ok(out)
}

fn next_free_index(dir: &Path) -> difpath::Result<usize> {
    Ok(patch_indices(dir)?.into_iter().max().map_or(0, |m| m + 1))
}

fn count_patches(root: &Path, classes: usize) -> difpath::Result<usize> {
    let mut n = 0;
    for k in 0..classes {
        n += patch_indices(&data::class_dir(root, k))?.len();
    }
    Ok(n)
}
