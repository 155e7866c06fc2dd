//! Reverse-process samplers: ancestral DDPM, DDIM with η-interpolation,
//! epsilon scaling, and classifier-free guidance.

use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, MIN_SPATIAL};
use crate::diffusion::posterior_mean;
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
    EpsScale,
}

/// Fixed reverse-step variance `σ_t²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseVariance {
    /// `β̃_t`
    #[default]
    Posterior,
    /// `β_t`
    Beta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// DDIM step count; validated against `T` for every kind.
    #[serde(default = "default_steps")]
    pub n_steps: usize,
    #[serde(default)]
    pub eta: f64,
    #[serde(default)]
    pub guidance_w: f64,
    /// Constant epsilon-scaling factor λ.
    #[serde(default = "default_eps_scale")]
    pub eps_scale_s: f64,
    /// Linear schedule `λ_t = k·t + b`, used when both are present.
    #[serde(default)]
    pub eps_scale_k: Option<f64>,
    #[serde(default)]
    pub eps_scale_b: Option<f64>,
    /// Spatial extents of generated items; empty for flat (non-image) data.
    #[serde(default)]
    pub target_size: Vec<usize>,
    #[serde(default = "default_clip")]
    pub clip_x0: bool,
    #[serde(default)]
    pub reverse_variance: ReverseVariance,
}

fn default_steps() -> usize {
    50
}
fn default_eps_scale() -> f64 {
    1.014
}
fn default_clip() -> bool {
    true
}

impl SamplerConfig {
    pub fn new(kind: SamplerKind) -> Self {
        SamplerConfig {
            kind,
            n_steps: default_steps(),
            eta: 0.0,
            guidance_w: 0.0,
            eps_scale_s: default_eps_scale(),
            eps_scale_k: None,
            eps_scale_b: None,
            target_size: Vec::new(),
            clip_x0: default_clip(),
            reverse_variance: ReverseVariance::Posterior,
        }
    }

    pub fn ddpm() -> Self {
        Self::new(SamplerKind::Ddpm)
    }

    pub fn ddim(n_steps: usize, eta: f64) -> Self {
        SamplerConfig {
            n_steps,
            eta,
            ..Self::new(SamplerKind::Ddim)
        }
    }

    pub fn eps_scale(s: f64) -> Self {
        SamplerConfig {
            eps_scale_s: s,
            ..Self::new(SamplerKind::EpsScale)
        }
    }

    pub fn with_size(mut self, target_size: &[usize]) -> Self {
        self.target_size = target_size.to_vec();
        self
    }

    pub fn with_guidance(mut self, w: f64) -> Self {
        self.guidance_w = w;
        self
    }

    pub fn with_clip(mut self, clip: bool) -> Self {
        self.clip_x0 = clip;
        self
    }

    /// Range checks on every field, including those the kind ignores.
    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if self.n_steps == 0 || self.n_steps > total_steps {
            return Err(Error::Parameter(format!(
                "n_steps {} outside 1..={total_steps}",
                self.n_steps
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Parameter(format!("eta must be in [0, 1], got {}", self.eta)));
        }
        if !(self.guidance_w >= 0.0 && self.guidance_w.is_finite()) {
            return Err(Error::Parameter(format!("guidance_w must be >= 0, got {}", self.guidance_w)));
        }
        if !(self.eps_scale_s > 0.0 && self.eps_scale_s.is_finite()) {
            return Err(Error::Parameter(format!("eps_scale_s must be > 0, got {}", self.eps_scale_s)));
        }
        if self.eps_scale_k.is_some() != self.eps_scale_b.is_some() {
            return Err(Error::Parameter("eps_scale_k and eps_scale_b must be given together".into()));
        }
        if let Some(&bad) = self.target_size.iter().find(|&&e| e < MIN_SPATIAL) {
            return Err(Error::Size(format!("target extent {bad} below {MIN_SPATIAL}")));
        }
        Ok(())
    }

    /// λ_t used by epsilon scaling at timestep `t`.
    pub fn lambda(&self, t: usize) -> f64 {
        match (self.eps_scale_k, self.eps_scale_b) {
            (Some(k), Some(b)) => k * t as f64 + b,
            _ => self.eps_scale_s,
        }
    }
}

/// Source of standard normal noise for the reverse steps.
pub trait NoiseSource {
    fn draw<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T>;
}

impl NoiseSource for RngStream {
    fn draw<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        self.gaussian(shape)
    }
}

/// One stream per batch item: item `i` of every draw comes from stream `i`,
/// so a sample's trajectory is independent of how the batch is split.
#[derive(Debug, Clone)]
pub struct PerItemStreams(pub Vec<RngStream>);

impl NoiseSource for PerItemStreams {
    fn draw<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        assert_eq!(shape.first().copied(), Some(self.0.len()), "batch/stream count mismatch");
        let item = &shape[1..];
        let mut data = Vec::with_capacity(shape.iter().product());
        for s in &mut self.0 {
            data.extend(s.gaussian::<T>(item).into_data());
        }
        Tensor::new(shape.to_vec(), data).expect("shape")
    }
}

/// `(1 + w)·ε_cond − w·ε_uncond`
pub fn cfg_combine<T: Scalar>(eps_cond: &Tensor<T>, eps_uncond: &Tensor<T>, w: T) -> Result<Tensor<T>> {
    eps_cond.check_same_shape(eps_uncond, "guidance")?;
    let a = T::one() + w;
    Ok(eps_cond.zip_map(eps_uncond, |c, u| a * c - w * u))
}

/// Reverse-step standard deviation for DDPM-type updates.
pub fn ddpm_sigma<T: Scalar>(t: usize, s: &NoiseSchedule<T>, variance: ReverseVariance) -> T {
    match variance {
        ReverseVariance::Posterior => s.posterior_var(t).sqrt(),
        ReverseVariance::Beta => s.beta(t).sqrt(),
    }
}

/// Posterior mean plus `σ·z`; no noise is added at `t = 1` or when `σ = 0`.
pub fn ddpm_step_with_sigma<T: Scalar, N: NoiseSource>(
    x_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    s: &NoiseSchedule<T>,
    sigma: T,
    noise: &mut N,
) -> Result<Tensor<T>> {
    let mut mean = posterior_mean(x_t, eps_hat, t, s)?;
    if t > 1 && sigma > T::zero() {
        let z: Tensor<T> = noise.draw(x_t.shape());
        mean.axpy(sigma, &z);
    }
    Ok(mean)
}

pub fn ddpm_step<T: Scalar, N: NoiseSource>(
    x_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    s: &NoiseSchedule<T>,
    variance: ReverseVariance,
    noise: &mut N,
) -> Result<Tensor<T>> {
    s.check_timestep(t)?;
    ddpm_step_with_sigma(x_t, eps_hat, t, s, ddpm_sigma(t, s, variance), noise)
}

/// DDPM update with the prediction divided by `λ > 0`.
pub fn eps_scale_step<T: Scalar, N: NoiseSource>(
    x_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    s: &NoiseSchedule<T>,
    lambda: T,
    variance: ReverseVariance,
    noise: &mut N,
) -> Result<Tensor<T>> {
    if !(lambda > T::zero()) {
        return Err(Error::Parameter(format!("epsilon scale must be positive, got {lambda}")));
    }
    let scaled = eps_hat.map(|e| e / lambda);
    ddpm_step(x_t, &scaled, t, s, variance, noise)
}

/// DDIM noise level between `t` and `t_prev`:
/// `η·√((1−ᾱ_prev)/(1−ᾱ_t)·(1−ᾱ_t/ᾱ_prev))`, which is `η·√β̃_t` when
/// `t_prev = t − 1`.
pub fn ddim_sigma<T: Scalar>(t: usize, t_prev: usize, s: &NoiseSchedule<T>, eta: T) -> T {
    let ab = s.alpha_bar(t);
    let ab_prev = s.alpha_bar(t_prev);
    let var = (T::one() - ab_prev) / (T::one() - ab) * (T::one() - ab / ab_prev);
    eta * var.max(T::zero()).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdimOutcome<T: Scalar = f64> {
    pub x_prev: Tensor<T>,
    /// Set when `1 − ᾱ_prev − σ²` went negative and σ was clamped.
    pub sigma_clamped: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn ddim_step<T: Scalar, N: NoiseSource>(
    x_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule<T>,
    eta: T,
    clip_x0: bool,
    noise: &mut N,
) -> Result<DdimOutcome<T>> {
    s.check_timestep(t)?;
    if t_prev >= t {
        return Err(Error::Parameter(format!("t_prev {t_prev} must be below t {t}")));
    }
    if !(eta >= T::zero() && eta <= T::one()) {
        return Err(Error::Parameter(format!("eta must be in [0, 1], got {eta}")));
    }
    x_t.check_same_shape(eps_hat, "ddim step")?;
    let ab = s.alpha_bar(t);
    let ab_prev = s.alpha_bar(t_prev);
    let mut sigma = ddim_sigma(t, t_prev, s, eta);
    let mut dir_var = T::one() - ab_prev - sigma * sigma;
    let mut clamped = false;
    if dir_var < T::zero() {
        sigma = (T::one() - ab_prev).max(T::zero()).sqrt();
        dir_var = T::zero();
        clamped = true;
    }
    let (sab, s1ab) = (ab.sqrt(), (T::one() - ab).sqrt());
    let (sab_prev, dir) = (ab_prev.sqrt(), dir_var.sqrt());
    let lo = -T::one();
    let mut x_prev = x_t.zip_map(eps_hat, |x, e| {
        let mut x0 = (x - s1ab * e) / sab;
        if clip_x0 {
            x0 = x0.max(lo).min(T::one());
        }
        sab_prev * x0 + dir * e
    });
    if sigma > T::zero() {
        let z: Tensor<T> = noise.draw(x_t.shape());
        x_prev.axpy(sigma, &z);
    }
    Ok(DdimOutcome {
        x_prev,
        sigma_clamped: clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepRecord {
    pub kind: SamplerKind,
    pub t: usize,
    pub t_prev: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SampleStats {
    /// Batched denoiser evaluations (two per step under guidance).
    pub denoiser_calls: usize,
    pub sigma_clamps: usize,
    pub trace: Vec<StepRecord>,
}

#[derive(Debug, Clone)]
pub struct SampleOutput<T: Scalar = f64> {
    pub samples: Tensor<T>,
    pub stats: SampleStats,
}

/// Timestep pairs `(t, t_prev)` visited by the configured sampler.
pub fn step_pairs<T: Scalar>(s: &NoiseSchedule<T>, cfg: &SamplerConfig) -> Result<Vec<(usize, usize)>> {
    match cfg.kind {
        SamplerKind::Ddpm | SamplerKind::EpsScale => Ok((1..=s.steps()).rev().map(|t| (t, t - 1)).collect()),
        SamplerKind::Ddim => {
            let seq = s.subsequence(cfg.n_steps)?;
            Ok((0..seq.len())
                .rev()
                .map(|i| (seq[i], if i == 0 { 0 } else { seq[i - 1] }))
                .collect())
        }
    }
}

/// Draws `n` items starting from `x_T ~ N(0, I)`.
///
/// Item `i` uses child stream `i` of a stream forked from `rng` for both
/// its initial noise and every reverse-step draw.
pub fn sample<T: Scalar, D: Denoiser<T> + ?Sized>(
    d: &D,
    s: &NoiseSchedule<T>,
    cfg: &SamplerConfig,
    class_label: Option<usize>,
    n: usize,
    rng: &mut RngStream,
) -> Result<SampleOutput<T>> {
    cfg.validate(s.steps())?;
    if let Some(c) = class_label {
        if c >= d.num_classes() {
            return Err(Error::Parameter(format!(
                "class {c} out of range for {} classes",
                d.num_classes()
            )));
        }
    }
    let item_shape = d.item_shape(&cfg.target_size)?;
    let mut stats = SampleStats::default();
    if n == 0 {
        return Ok(SampleOutput {
            samples: Tensor::empty_batch(&item_shape),
            stats,
        });
    }
    let base = rng.fork();
    let mut noise = PerItemStreams((0..n as u64).map(|i| base.child(i)).collect());
    let mut shape = vec![n];
    shape.extend_from_slice(&item_shape);
    let mut x: Tensor<T> = noise.draw(&shape);

    let guided = cfg.guidance_w > 0.0 && class_label.is_some();
    let w = T::of(cfg.guidance_w);
    for (t, t_prev) in step_pairs(s, cfg)? {
        let mut eps = d.predict(&x, t, class_label)?;
        stats.denoiser_calls += 1;
        if guided {
            let uncond = d.predict(&x, t, None)?;
            stats.denoiser_calls += 1;
            eps = cfg_combine(&eps, &uncond, w)?;
        }
        x = match cfg.kind {
            SamplerKind::Ddpm => ddpm_step(&x, &eps, t, s, cfg.reverse_variance, &mut noise)?,
            SamplerKind::EpsScale => {
                eps_scale_step(&x, &eps, t, s, T::of(cfg.lambda(t)), cfg.reverse_variance, &mut noise)?
            }
            SamplerKind::Ddim => {
                let out = ddim_step(&x, &eps, t, t_prev, s, T::of(cfg.eta), cfg.clip_x0, &mut noise)?;
                stats.sigma_clamps += usize::from(out.sigma_clamped);
                out.x_prev
            }
        };
        stats.trace.push(StepRecord {
            kind: cfg.kind,
            t,
            t_prev,
        });
    }
    if !x.is_finite() {
        return Err(Error::Divergence {
            step: stats.trace.len(),
            loss: f64::NAN,
        });
    }
    Ok(SampleOutput { samples: x, stats })
}
