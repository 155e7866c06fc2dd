//! Autoencoder with a 4× spatial reduction, optional vector quantisation,
//! and latent-space diffusion built on the same schedule and samplers as
//! the pixel-space path.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{self, Denoiser, TrainConfig, TrainReport, TrainableDenoiser};
use crate::error::{Error, Result};
use crate::nn::ops::{self, Conv2d};
use crate::nn::{fan_in_std, AdamState, ParamSet};
use crate::numerics::{RngStream, Tensor};
use crate::samplers::{self, SampleOutput, SamplerConfig};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

/// Spatial downsampling factor of the encoder.
pub const DOWNSAMPLE: usize = 4;

pub const CODEBOOK_WEIGHT: f64 = 1.0;
pub const COMMITMENT_WEIGHT: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub channels: usize,
    #[serde(default = "default_latent")]
    pub latent_channels: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    /// Codebook size; `None` for a continuous latent space.
    #[serde(default)]
    pub codebook_size: Option<usize>,
}

fn default_latent() -> usize {
    4
}
fn default_width() -> usize {
    16
}

impl AutoencoderConfig {
    pub fn new(channels: usize) -> Self {
        AutoencoderConfig {
            channels,
            latent_channels: default_latent(),
            width: default_width(),
            codebook_size: None,
        }
    }
}

/// Codebook usage accounting, separate from the trainable vectors.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VqUsage {
    pub counts: Vec<u64>,
}

impl VqUsage {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone)]
pub struct Autoencoder<T: Scalar = f64> {
    config: AutoencoderConfig,
    params: ParamSet<T>,
    latent_scale: T,
    pub usage: VqUsage,
}

// encoder layers 0..4, decoder layers 4..8; each has (w, b)
const N_LAYERS: usize = 8;

struct LayerCache<T> {
    input: Vec<T>,
    cols: Vec<T>,
    pre: Vec<T>,
    h: usize,
    w: usize,
}

struct AeCache<T> {
    layers: Vec<LayerCache<T>>,
    z_e: Vec<T>,
    indices: Vec<usize>,
    out: Vec<T>,
}

#[derive(Clone, Copy)]
enum LayerKind {
    Same,
    Down,
    Up,
}

impl<T: Scalar> Autoencoder<T> {
    pub fn new(config: AutoencoderConfig, rng: &mut RngStream) -> Result<Self> {
        if config.channels == 0 || config.latent_channels == 0 || config.width == 0 {
            return Err(Error::Parameter("autoencoder channel counts must be positive".into()));
        }
        if let Some(k) = config.codebook_size {
            if k < 2 {
                return Err(Error::Parameter(format!("codebook needs at least 2 entries, got {k}")));
            }
        }
        let mut params = ParamSet::new();
        for l in 0..N_LAYERS {
            let (conv, _) = Self::layer(&config, l);
            let prefix = if l < 4 { format!("enc{l}") } else { format!("dec{}", l - 4) };
            params.push_normal(format!("{prefix}.w"), &conv.weight_shape(), fan_in_std(conv.fan_in()) * 1.4, rng);
            let bias_len = match Self::layer(&config, l).1 {
                LayerKind::Up => conv.c_in,
                _ => conv.c_out,
            };
            params.push_zeros(format!("{prefix}.b"), &[bias_len]);
        }
        let mut usage = VqUsage::default();
        if let Some(k) = config.codebook_size {
            params.push_normal("vq.codebook", &[k, config.latent_channels], 1.0, rng);
            usage.counts = vec![0; k];
        }
        Ok(Autoencoder {
            config,
            params,
            latent_scale: T::one(),
            usage,
        })
    }

    pub fn from_params(config: AutoencoderConfig, params: &ParamSet<T>, latent_scale: T) -> Result<Self> {
        let mut ae = Self::new(config, &mut RngStream::new(0))?;
        ae.params.load_from("", |n| params.index_of(n).map(|i| params.get(i)))?;
        ae.latent_scale = latent_scale;
        Ok(ae)
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn latent_scale(&self) -> T {
        self.latent_scale
    }

    pub fn set_latent_scale(&mut self, s: T) {
        self.latent_scale = s;
    }

    /// Geometry of layer `l`. For `Up` layers the conv is the one whose
    /// transpose is applied, so `c_out` is the layer's input channels.
    fn layer(c: &AutoencoderConfig, l: usize) -> (Conv2d, LayerKind) {
        let (w, lat, ch) = (c.width, c.latent_channels, c.channels);
        match l {
            0 => (Conv2d::same3x3(ch, w), LayerKind::Same),
            1 | 2 => (Conv2d::down2(w, w), LayerKind::Down),
            3 => (Conv2d::same3x3(w, lat), LayerKind::Same),
            4 => (Conv2d::same3x3(lat, w), LayerKind::Same),
            5 | 6 => (Conv2d::down2(w, w), LayerKind::Up),
            _ => (Conv2d::same3x3(w, ch), LayerKind::Same),
        }
    }

    fn check_image(&self, shape: &[usize]) -> Result<(usize, usize)> {
        if shape.len() != 3 || shape[0] != self.config.channels {
            return Err(Error::Contract(format!(
                "expected [{}, h, w] images, got {shape:?}",
                self.config.channels
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        if h == 0 || w == 0 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return Err(Error::Size(format!(
                "image extents {h}×{w} must be positive multiples of {DOWNSAMPLE}"
            )));
        }
        Ok((h, w))
    }

    /// Runs layers `range`; the activation after each layer is SiLU except
    /// after layer 3 (latent) and layer 7 (tanh applied by the caller).
    fn run_layers(&self, range: std::ops::Range<usize>, mut x: Vec<T>, mut h: usize, mut w: usize, caches: &mut Vec<LayerCache<T>>) -> (Vec<T>, usize, usize) {
        for l in range {
            let (conv, kind) = Self::layer(&self.config, l);
            let wt = self.params.get(2 * l).data();
            let b = self.params.get(2 * l + 1).data();
            let (pre, cols, ho, wo) = match kind {
                LayerKind::Same | LayerKind::Down => conv.forward(&x, h, w, wt, b),
                LayerKind::Up => {
                    let (out, ho, wo) = conv.transpose_forward(&x, h, w, wt, b);
                    (out, Vec::new(), ho, wo)
                }
            };
            let act = if l == 3 || l == 7 { pre.clone() } else { ops::silu_vec(&pre) };
            caches.push(LayerCache { input: x, cols, pre, h, w });
            x = act;
            h = ho;
            w = wo;
        }
        (x, h, w)
    }

    fn backprop_layers(&self, range: std::ops::Range<usize>, mut g: Vec<T>, caches: &[LayerCache<T>], grads: &mut ParamSet<T>) -> Vec<T> {
        for l in range.rev() {
            let (conv, kind) = Self::layer(&self.config, l);
            let c = &caches[l];
            let d_pre = if l == 3 || l == 7 { g } else { ops::silu_backward(&g, &c.pre) };
            let wt = self.params.get(2 * l).data();
            let (dw, db) = grads.pair_mut(2 * l, 2 * l + 1);
            g = match kind {
                LayerKind::Same | LayerKind::Down => conv
                    .backward(&d_pre, &c.cols, c.h, c.w, wt, dw, db, true)
                    .expect("input grad requested"),
                LayerKind::Up => conv.transpose_backward(&d_pre, &c.input, c.h, c.w, wt, dw, db),
            };
        }
        g
    }

    fn codebook(&self) -> Option<&Tensor<T>> {
        self.config.codebook_size.map(|_| self.params.get(2 * N_LAYERS))
    }

    /// Nearest-codebook replacement of each spatial latent vector in a
    /// `[lat, h, w]` item. Returns the quantised item and the chosen indices.
    pub fn quantize_item(&self, z: &[T], plane: usize) -> (Vec<T>, Vec<usize>) {
        let Some(cb) = self.codebook() else {
            return (z.to_vec(), Vec::new());
        };
        let lat = self.config.latent_channels;
        let mut out = vec![T::zero(); z.len()];
        let mut idx = Vec::with_capacity(plane);
        for p in 0..plane {
            let mut best = (T::infinity(), 0);
            for k in 0..cb.rows() {
                let e = cb.row(k);
                let d: T = (0..lat).map(|c| (z[c * plane + p] - e[c]).powi(2)).sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
            let e = cb.row(best.1);
            for c in 0..lat {
                out[c * plane + p] = e[c];
            }
            idx.push(best.1);
        }
        (out, idx)
    }

    fn forward_item(&self, x: &[T], h: usize, w: usize) -> AeCache<T> {
        let mut layers = Vec::with_capacity(N_LAYERS);
        let (z_e, hl, wl) = self.run_layers(0..4, x.to_vec(), h, w, &mut layers);
        let (z_q, indices) = self.quantize_item(&z_e, hl * wl);
        let (pre_out, _, _) = self.run_layers(4..8, z_q, hl, wl, &mut layers);
        let out = pre_out.iter().map(|v| v.tanh()).collect();
        AeCache {
            layers,
            z_e,
            indices,
            out,
        }
    }

    /// Encodes a batch `[n, C, H, W]` into diffusion-space latents
    /// `[n, lat, H/4, W/4]` (quantised when VQ is on, then scaled).
    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 4 {
            return Err(Error::Contract(format!("expected [n, c, h, w], got {:?}", x.shape())));
        }
        let (h, w) = self.check_image(x.item_shape())?;
        let (hl, wl) = (h / DOWNSAMPLE, w / DOWNSAMPLE);
        let scale = self.latent_scale;
        let items: Vec<Vec<T>> = (0..x.batch_len())
            .into_par_iter()
            .map(|i| {
                let mut scratch = Vec::new();
                let (z, _, _) = self.run_layers(0..4, x.item(i).to_vec(), h, w, &mut scratch);
                let (zq, _) = self.quantize_item(&z, hl * wl);
                zq.into_iter().map(|v| v * scale).collect()
            })
            .collect();
        Tensor::new(vec![x.batch_len(), self.config.latent_channels, hl, wl], items.concat())
    }

    /// Encoder output `[n, lat, H/4, W/4]` before quantisation and scaling.
    pub fn encode_continuous(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 4 {
            return Err(Error::Contract(format!("expected [n, c, h, w], got {:?}", x.shape())));
        }
        let (h, w) = self.check_image(x.item_shape())?;
        let items: Vec<Vec<T>> = (0..x.batch_len())
            .into_par_iter()
            .map(|i| {
                let mut scratch = Vec::new();
                self.run_layers(0..4, x.item(i).to_vec(), h, w, &mut scratch).0
            })
            .collect();
        Tensor::new(
            vec![x.batch_len(), self.config.latent_channels, h / DOWNSAMPLE, w / DOWNSAMPLE],
            items.concat(),
        )
    }

    /// Decodes diffusion-space latents back to images in `[-1, 1]`.
    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        if z.rank() != 4 || z.shape()[1] != self.config.latent_channels || z.shape()[2] == 0 || z.shape()[3] == 0 {
            return Err(Error::Contract(format!(
                "expected [n, {}, h, w] latents, got {:?}",
                self.config.latent_channels,
                z.shape()
            )));
        }
        let (hl, wl) = (z.shape()[2], z.shape()[3]);
        let inv = T::one() / self.latent_scale;
        let items: Vec<Vec<T>> = (0..z.batch_len())
            .into_par_iter()
            .map(|i| {
                let mut scratch = Vec::new();
                let zi: Vec<T> = z.item(i).iter().map(|&v| v * inv).collect();
                let (out, _, _) = self.run_layers(4..8, zi, hl, wl, &mut scratch);
                out.into_iter().map(|v| v.tanh()).collect()
            })
            .collect();
        Tensor::new(
            vec![z.batch_len(), self.config.channels, hl * DOWNSAMPLE, wl * DOWNSAMPLE],
            items.concat(),
        )
    }

    pub fn reconstruct(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.decode(&self.encode(x)?)
    }

    /// Training loss of one image and its parameter gradient. With VQ the
    /// codebook and commitment terms are added and the quantiser is passed
    /// straight through. Returns the chosen code indices as well.
    pub fn item_loss_grad(&self, x: &Tensor<T>) -> Result<(T, ParamSet<T>, Vec<usize>)> {
        let (h, w) = self.check_image(x.shape())?;
        let cache = self.forward_item(x.data(), h, w);
        let n = T::of_usize(cache.out.len());
        let mut loss = T::zero();
        let d_out: Vec<T> = cache
            .out
            .iter()
            .zip(x.data())
            .map(|(&o, &y)| {
                let d = o - y;
                loss += d * d;
                T::of(2.0) * d / n * (T::one() - o * o)
            })
            .collect();
        loss /= n;
        let mut grads = self.params.zeros_like();
        let mut d_z = self.backprop_layers(4..8, d_out, &cache.layers, &mut grads);

        if self.codebook().is_some() {
            let lat = self.config.latent_channels;
            let plane = cache.z_e.len() / lat;
            let n_lat = T::of_usize(cache.z_e.len());
            let (zq, _) = self.quantize_item(&cache.z_e, plane);
            let cb_w = T::of(CODEBOOK_WEIGHT);
            let cm_w = T::of(COMMITMENT_WEIGHT);
            let mut sq = T::zero();
            for (j, (&ze, &q)) in cache.z_e.iter().zip(&zq).enumerate() {
                let diff = ze - q;
                sq += diff * diff;
                d_z[j] += cm_w * T::of(2.0) * diff / n_lat;
            }
            loss += (cb_w + cm_w) * sq / n_lat;
            let cb_grad = grads.get_mut(2 * N_LAYERS).data_mut();
            for p in 0..plane {
                let k = cache.indices[p];
                for c in 0..lat {
                    let diff = cache.z_e[c * plane + p] - zq[c * plane + p];
                    cb_grad[k * lat + c] -= cb_w * T::of(2.0) * diff / n_lat;
                }
            }
        }
        self.backprop_layers(0..4, d_z, &cache.layers, &mut grads);
        Ok((loss, grads, cache.indices))
    }

    /// Sets the latent scale so encoded training latents have unit
    /// standard deviation.
    pub fn calibrate_scale(&mut self, images: &[Tensor<T>]) -> Result<T> {
        self.latent_scale = T::one();
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut count = 0usize;
        for x in images {
            let batch = Tensor::stack(std::slice::from_ref(x))?;
            let z = self.encode(&batch)?;
            for &v in z.data() {
                let v = v.as_f64();
                sum += v;
                sq += v * v;
            }
            count += z.len();
        }
        if count < 2 {
            return Err(Error::InsufficientData("need latents to calibrate the scale".into()));
        }
        let mean = sum / count as f64;
        let var = (sq / count as f64 - mean * mean).max(1e-12);
        self.latent_scale = T::of(1.0 / var.sqrt());
        Ok(self.latent_scale)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        AeTrainConfig {
            epochs: 10,
            batch_size: 16,
            max_steps: None,
        }
    }
}

/// Minimises reconstruction MSE (plus VQ terms) with Adam.
pub fn train_ae<T: Scalar>(
    ae: &mut Autoencoder<T>,
    dataset: &[Tensor<T>],
    opt: &mut AdamState<T>,
    cfg: &AeTrainConfig,
    rng: &mut RngStream,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::Parameter("autoencoder training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Parameter("batch size must be positive".into()));
    }
    let mut report = TrainReport::default();
    let mut step = 0usize;
    let done = |step: usize| cfg.max_steps.is_some_and(|m| step >= m);
    for _ in 0..cfg.epochs {
        let order = rng.permutation(dataset.len());
        let (mut sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if done(step) {
                break;
            }
            let per: Vec<(T, ParamSet<T>, Vec<usize>)> = chunk
                .par_iter()
                .map(|&i| ae.item_loss_grad(&dataset[i]))
                .collect::<Result<_>>()?;
            let mut grads = ae.params.zeros_like();
            let mut loss = T::zero();
            for (l, g, idx) in &per {
                loss += *l;
                grads.axpy(T::one(), g);
                for &k in idx {
                    ae.usage.counts[k] += 1;
                }
            }
            let inv = T::one() / T::of_usize(chunk.len());
            grads.scale_inplace(inv);
            let loss = (loss * inv).as_f64();
            step += 1;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            opt.update(&mut ae.params, &grads);
            report.step_losses.push(loss);
            sum += loss;
            batches += 1;
        }
        if batches > 0 {
            report.epoch_losses.push(sum / batches as f64);
        }
        if done(step) {
            break;
        }
    }
    Ok(report)
}

/// Encodes a labelled image set once into diffusion-space latents.
pub fn encode_dataset<T: Scalar>(ae: &Autoencoder<T>, data: &[(Tensor<T>, usize)]) -> Result<Vec<(Tensor<T>, usize)>> {
    data.iter()
        .map(|(x, c)| {
            let z = ae.encode(&Tensor::stack(std::slice::from_ref(x))?)?;
            Ok((z.item_tensor(0), *c))
        })
        .collect()
}

/// Trains a latent denoiser on the autoencoder's encoding of `data`.
pub fn train_latent_denoiser<T, D>(
    ae: &Autoencoder<T>,
    net: &mut D,
    data: &[(Tensor<T>, usize)],
    s: &NoiseSchedule<T>,
    opt: &mut AdamState<T>,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<TrainReport>
where
    T: Scalar,
    D: TrainableDenoiser<T>,
{
    let latents = encode_dataset(ae, data)?;
    denoiser::train(net, &latents, s, opt, cfg, rng)
}

/// Samples in latent space with any configured sampler, then decodes.
/// `cfg.target_size` is given in pixels and must be divisible by 4.
pub fn ldm_sample<T: Scalar, D: Denoiser<T> + ?Sized>(
    ae: &Autoencoder<T>,
    d: &D,
    s: &NoiseSchedule<T>,
    cfg: &SamplerConfig,
    class_label: Option<usize>,
    n: usize,
    rng: &mut RngStream,
) -> Result<SampleOutput<T>> {
    let mut latent_cfg = cfg.clone();
    latent_cfg.target_size = latent_extents(&cfg.target_size)?;
    let out = samplers::sample(d, s, &latent_cfg, class_label, n, rng)?;
    let samples = if n == 0 {
        let mut shape = vec![ae.config.channels];
        shape.extend(cfg.target_size.iter());
        Tensor::empty_batch(&shape)
    } else {
        ae.decode(&out.samples)?
    };
    Ok(SampleOutput {
        samples,
        stats: out.stats,
    })
}

/// Pixel extents to latent extents.
pub fn latent_extents(pixels: &[usize]) -> Result<Vec<usize>> {
    pixels
        .iter()
        .map(|&p| {
            if p % DOWNSAMPLE != 0 {
                Err(Error::Size(format!("extent {p} not divisible by {DOWNSAMPLE}")))
            } else {
                Ok(p / DOWNSAMPLE)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ae(vq: Option<usize>) -> Autoencoder {
        let cfg = AutoencoderConfig {
            channels: 3,
            latent_channels: 2,
            width: 4,
            codebook_size: vq,
        };
        Autoencoder::new(cfg, &mut RngStream::new(4)).unwrap()
    }

    #[test]
    fn shape_arithmetic() {
        let a = ae(None);
        let x: Tensor = RngStream::new(1).gaussian(&[2, 3, 16, 16]);
        let z = a.encode(&x).unwrap();
        assert_eq!(z.shape(), &[2, 2, 4, 4]);
        let y = a.decode(&z).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|v| v.abs() <= 1.0));
        let big: Tensor = Tensor::zeros(&[1, 3, 128, 128]);
        assert_eq!(a.encode(&big).unwrap().shape(), &[1, 2, 32, 32]);
        assert!(matches!(a.encode(&Tensor::zeros(&[1, 3, 10, 16])), Err(Error::Size(_))));
        assert!(a.decode(&Tensor::zeros(&[1, 3, 4, 4])).is_err());
    }

    #[test]
    fn zero_latent_decodes_finite() {
        let a = ae(None);
        let y = a.decode(&Tensor::zeros(&[1, 2, 4, 4])).unwrap();
        assert!(y.is_finite());
    }

    #[test]
    fn vq_latents_are_codebook_entries() {
        let mut a = ae(Some(2));
        let idx = a.params.index_of("vq.codebook").unwrap();
        *a.params.get_mut(idx) = Tensor::from_rows(&[vec![1.0, 1.0], vec![-1.0, -1.0]]).unwrap();
        let x: Tensor = RngStream::new(6).gaussian(&[3, 3, 8, 8]);
        let z = a.encode(&x).unwrap();
        let plane = 4;
        for i in 0..3 {
            let item = z.item(i);
            for p in 0..plane {
                let v = [item[p], item[plane + p]];
                assert!(v == [1.0, 1.0] || v == [-1.0, -1.0], "{v:?}");
            }
        }
    }

    #[test]
    fn latent_extents_need_divisibility() {
        assert_eq!(latent_extents(&[128, 32]).unwrap(), vec![32, 8]);
        assert!(latent_extents(&[30]).is_err());
    }
}
