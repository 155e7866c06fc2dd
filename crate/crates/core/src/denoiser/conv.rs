use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Denoiser, TrainableDenoiser};
use crate::error::{Error, Result};
use crate::nn::ops::{self, Conv2d};
use crate::nn::{fan_in_std, ParamSet};
use crate::numerics::{RngStream, Tensor};
use crate::scalar::Scalar;

/// Smallest accepted spatial extent.
pub const MIN_SPATIAL: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvDenoiserConfig {
    /// Image (or latent) channels.
    pub channels: usize,
    pub num_classes: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    /// Number of 3×3 convolutions, 4 to 6.
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_time_dim")]
    pub time_dim: usize,
    #[serde(default = "default_width")]
    pub emb_dim: usize,
}

fn default_width() -> usize {
    32
}
fn default_depth() -> usize {
    5
}
fn default_time_dim() -> usize {
    64
}

impl ConvDenoiserConfig {
    pub fn new(channels: usize, num_classes: usize) -> Self {
        ConvDenoiserConfig {
            channels,
            num_classes,
            width: default_width(),
            depth: default_depth(),
            time_dim: default_time_dim(),
            emb_dim: default_width(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(4..=6).contains(&self.depth) {
            return Err(Error::Parameter(format!("depth must be 4..=6, got {}", self.depth)));
        }
        if self.channels == 0 || self.width == 0 || self.emb_dim == 0 {
            return Err(Error::Parameter("channels, width and emb_dim must be positive".into()));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::Parameter(format!("time_dim must be even and >= 2, got {}", self.time_dim)));
        }
        Ok(())
    }
}

/// Fully convolutional noise predictor: a stack of same-padded 3×3
/// convolutions with SiLU. Each hidden stage is modulated per channel as
/// `(1 + γ)·conv(h) + β`, with `γ, β` projected from the joint time/class
/// embedding. Stages that map width to width are residual and dilated
/// (2, 4, 8), so five stages see a 33-pixel window. The output adds
/// `s·x_t` with a per-channel gain `s` read off the embedding, which
/// carries the near-identity prediction at high noise levels.
#[derive(Debug, Clone)]
pub struct ConvDenoiser<T: Scalar = f64> {
    config: ConvDenoiserConfig,
    params: ParamSet<T>,
}

// fixed parameter slots
const TIME_W1: usize = 0;
const TIME_B1: usize = 1;
const TIME_W2: usize = 2;
const TIME_B2: usize = 3;
const CLASS_EMB: usize = 4;
const FIRST_STAGE: usize = 5;

struct StageCache<T> {
    cols: Vec<T>,
    z: Vec<T>,
    pre: Vec<T>,
    gamma: Vec<T>,
}

struct ItemCache<T> {
    x: Vec<T>,
    te: Vec<T>,
    h1: Vec<T>,
    a1: Vec<T>,
    e0: Vec<T>,
    e: Vec<T>,
    class_row: usize,
    stages: Vec<StageCache<T>>,
    last_cols: Vec<T>,
}

impl<T: Scalar> ConvDenoiser<T> {
    /// Random initialisation with the final convolution zeroed, so the
    /// untrained network predicts `ε̂ = 0`.
    pub fn new(config: ConvDenoiserConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let (e, td, w) = (config.emb_dim, config.time_dim, config.width);
        let mut p = ParamSet::new();
        p.push_normal("time.w1", &[e, td], fan_in_std(td), rng);
        p.push_zeros("time.b1", &[e]);
        p.push_normal("time.w2", &[e, e], fan_in_std(e), rng);
        p.push_zeros("time.b2", &[e]);
        p.push_normal("class.emb", &[config.num_classes + 1, e], 0.5, rng);
        for s in 0..config.depth {
            let conv = Self::stage_conv(&config, s);
            if s + 1 == config.depth {
                p.push_zeros(format!("conv{s}.w"), &conv.weight_shape());
                p.push_zeros(format!("conv{s}.b"), &[conv.c_out]);
            } else {
                p.push_normal(format!("conv{s}.w"), &conv.weight_shape(), fan_in_std(conv.fan_in()) * 1.4, rng);
                p.push_zeros(format!("conv{s}.b"), &[conv.c_out]);
                // rows 0..w give γ, rows w..2w give β
                p.push_normal(format!("proj{s}.w"), &[2 * w, e], fan_in_std(e), rng);
                p.push_zeros(format!("proj{s}.b"), &[2 * w]);
            }
        }
        p.push_zeros("skip.w", &[config.channels, e]);
        p.push_zeros("skip.b", &[config.channels]);
        Ok(ConvDenoiser { config, params: p })
    }

    /// Builds the network around existing weights (e.g. from a checkpoint).
    pub fn from_params(config: ConvDenoiserConfig, params: ParamSet<T>) -> Result<Self> {
        let mut net = Self::new(config, &mut RngStream::new(0))?;
        net.params.load_from("", |name| params.index_of(name).map(|i| params.get(i)))?;
        Ok(net)
    }

    pub fn config(&self) -> &ConvDenoiserConfig {
        &self.config
    }

    fn stage_conv(config: &ConvDenoiserConfig, s: usize) -> Conv2d {
        let c_in = if s == 0 { config.channels } else { config.width };
        let c_out = if s + 1 == config.depth { config.channels } else { config.width };
        if Self::residual(config, s) {
            Conv2d::dilated3x3(c_in, c_out, (1 << s).min(8))
        } else {
            Conv2d::same3x3(c_in, c_out)
        }
    }

    fn residual(config: &ConvDenoiserConfig, s: usize) -> bool {
        s > 0 && s + 1 < config.depth
    }

    fn conv_w(s: usize) -> usize {
        FIRST_STAGE + 4 * s
    }

    fn skip_w(&self) -> usize {
        Self::conv_w(self.config.depth - 1) + 2
    }

    fn class_row(&self, class: Option<usize>) -> Result<usize> {
        match class {
            None => Ok(self.config.num_classes),
            Some(c) if c < self.config.num_classes => Ok(c),
            Some(c) => Err(Error::Parameter(format!(
                "class {c} out of range for {} classes",
                self.config.num_classes
            ))),
        }
    }

    fn check_item(&self, shape: &[usize]) -> Result<(usize, usize)> {
        if shape.len() != 3 || shape[0] != self.config.channels {
            return Err(Error::Contract(format!(
                "expected [{}, h, w] items, got {:?}",
                self.config.channels, shape
            )));
        }
        if shape[1] < MIN_SPATIAL || shape[2] < MIN_SPATIAL {
            return Err(Error::Size(format!(
                "spatial size {}×{} below the minimum {MIN_SPATIAL}",
                shape[1], shape[2]
            )));
        }
        Ok((shape[1], shape[2]))
    }

    fn forward_item(&self, x: &[T], h: usize, w: usize, t: usize, class_row: usize) -> (Vec<T>, ItemCache<T>) {
        let p = &self.params;
        let te: Vec<T> = ops::timestep_embedding(t, self.config.time_dim);
        let h1 = ops::linear_forward(p.get(TIME_W1).data(), p.get(TIME_B1).data(), &te);
        let a1 = ops::silu_vec(&h1);
        let mut e0 = ops::linear_forward(p.get(TIME_W2).data(), p.get(TIME_B2).data(), &a1);
        let ed = self.config.emb_dim;
        let crow = &p.get(CLASS_EMB).data()[class_row * ed..(class_row + 1) * ed];
        for (v, &c) in e0.iter_mut().zip(crow) {
            *v += c;
        }
        let e = ops::silu_vec(&e0);

        let plane = h * w;
        let mut act = x.to_vec();
        let mut stages = Vec::with_capacity(self.config.depth - 1);
        for s in 0..self.config.depth - 1 {
            let conv = Self::stage_conv(&self.config, s);
            let wi = Self::conv_w(s);
            let (z, cols, _, _) = conv.forward(&act, h, w, p.get(wi).data(), p.get(wi + 1).data());
            let mut film = ops::linear_forward(p.get(wi + 2).data(), p.get(wi + 3).data(), &e);
            let shift = film.split_off(conv.c_out);
            let gamma = film;
            let mut pre = z.clone();
            for (c, chunk) in pre.chunks_mut(plane).enumerate() {
                let g = T::one() + gamma[c];
                for v in chunk {
                    *v = *v * g + shift[c];
                }
            }
            let out = ops::silu_vec(&pre);
            act = if Self::residual(&self.config, s) {
                act.iter().zip(&out).map(|(&a, &o)| a + o).collect()
            } else {
                out
            };
            stages.push(StageCache { cols, z, pre, gamma });
        }
        let last = self.config.depth - 1;
        let conv = Self::stage_conv(&self.config, last);
        let wi = Self::conv_w(last);
        let (mut out, last_cols, _, _) = conv.forward(&act, h, w, p.get(wi).data(), p.get(wi + 1).data());
        let si = self.skip_w();
        let gain = ops::linear_forward(p.get(si).data(), p.get(si + 1).data(), &e);
        for ((o, xc), &g) in out.chunks_mut(plane).zip(x.chunks(plane)).zip(&gain) {
            for (v, &xv) in o.iter_mut().zip(xc) {
                *v += g * xv;
            }
        }
        (
            out,
            ItemCache {
                x: x.to_vec(),
                te,
                h1,
                a1,
                e0,
                e,
                class_row,
                stages,
                last_cols,
            },
        )
    }

    fn backward_item(&self, grad_out: &[T], cache: &ItemCache<T>, h: usize, w: usize) -> ParamSet<T> {
        let p = &self.params;
        let mut g = p.zeros_like();
        let plane = h * w;
        let si = self.skip_w();
        let d_gain: Vec<T> = grad_out
            .chunks(plane)
            .zip(cache.x.chunks(plane))
            .map(|(g, x)| g.iter().zip(x).map(|(&a, &b)| a * b).sum())
            .collect();
        let mut d_e = {
            let (dw, db) = g.pair_mut(si, si + 1);
            ops::linear_backward(p.get(si).data(), &cache.e, &d_gain, dw, db)
        };

        let last = self.config.depth - 1;
        let wi = Self::conv_w(last);
        let conv = Self::stage_conv(&self.config, last);
        let mut d_act = {
            let (dw, db) = g.pair_mut(wi, wi + 1);
            conv.backward(grad_out, &cache.last_cols, h, w, p.get(wi).data(), dw, db, true)
                .expect("input grad requested")
        };
        for s in (0..last).rev() {
            let conv = Self::stage_conv(&self.config, s);
            let wi = Self::conv_w(s);
            let st = &cache.stages[s];
            let mut d_pre = ops::silu_backward(&d_act, &st.pre);
            let mut d_film = vec![T::zero(); 2 * conv.c_out];
            for c in 0..conv.c_out {
                let range = c * plane..(c + 1) * plane;
                let (mut dg, mut db) = (T::zero(), T::zero());
                for (d, &z) in d_pre[range.clone()].iter().zip(&st.z[range.clone()]) {
                    dg += *d * z;
                    db += *d;
                }
                d_film[c] = dg;
                d_film[conv.c_out + c] = db;
                let scale = T::one() + st.gamma[c];
                for d in &mut d_pre[range] {
                    *d *= scale;
                }
            }
            let de = {
                let (dw, db) = g.pair_mut(wi + 2, wi + 3);
                ops::linear_backward(p.get(wi + 2).data(), &cache.e, &d_film, dw, db)
            };
            for (a, b) in d_e.iter_mut().zip(&de) {
                *a += *b;
            }
            let (dw, db) = g.pair_mut(wi, wi + 1);
            let d_in = conv.backward(&d_pre, &st.cols, h, w, p.get(wi).data(), dw, db, s > 0);
            if let Some(d) = d_in {
                if Self::residual(&self.config, s) {
                    for (a, b) in d_act.iter_mut().zip(&d) {
                        *a += *b;
                    }
                } else {
                    d_act = d;
                }
            }
        }

        let d_e0 = ops::silu_backward(&d_e, &cache.e0);
        let ed = self.config.emb_dim;
        {
            let row = &mut g.get_mut(CLASS_EMB).data_mut()[cache.class_row * ed..(cache.class_row + 1) * ed];
            for (a, &b) in row.iter_mut().zip(&d_e0) {
                *a += b;
            }
        }
        let d_a1 = {
            let (dw, db) = g.pair_mut(TIME_W2, TIME_B2);
            ops::linear_backward(p.get(TIME_W2).data(), &cache.a1, &d_e0, dw, db)
        };
        let d_h1 = ops::silu_backward(&d_a1, &cache.h1);
        let (dw, db) = g.pair_mut(TIME_W1, TIME_B1);
        ops::linear_backward(p.get(TIME_W1).data(), &cache.te, &d_h1, dw, db);
        g
    }
}

impl<T: Scalar> Denoiser<T> for ConvDenoiser<T> {
    fn predict(&self, x_t: &Tensor<T>, t: usize, class: Option<usize>) -> Result<Tensor<T>> {
        if x_t.rank() != 4 {
            return Err(Error::Contract(format!(
                "expected a [n, c, h, w] batch, got {:?}",
                x_t.shape()
            )));
        }
        let (h, w) = self.check_item(x_t.item_shape())?;
        let row = self.class_row(class)?;
        let outs: Vec<Vec<T>> = (0..x_t.batch_len())
            .into_par_iter()
            .map(|i| self.forward_item(x_t.item(i), h, w, t, row).0)
            .collect();
        Tensor::new(x_t.shape().to_vec(), outs.concat())
    }

    fn item_shape(&self, spatial: &[usize]) -> Result<Vec<usize>> {
        if spatial.len() != 2 {
            return Err(Error::Parameter(format!(
                "convolutional denoiser needs 2 spatial extents, got {spatial:?}"
            )));
        }
        let shape = vec![self.config.channels, spatial[0], spatial[1]];
        self.check_item(&shape)?;
        Ok(shape)
    }

    fn size_agnostic(&self) -> bool {
        true
    }

    fn num_classes(&self) -> usize {
        self.config.num_classes
    }
}

impl<T: Scalar> TrainableDenoiser<T> for ConvDenoiser<T> {
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn item_mse_grad(
        &self,
        x_t: &Tensor<T>,
        t: usize,
        class: Option<usize>,
        target: &Tensor<T>,
    ) -> Result<(T, ParamSet<T>)> {
        let (h, w) = self.check_item(x_t.shape())?;
        x_t.check_same_shape(target, "denoiser target")?;
        let row = self.class_row(class)?;
        let (out, cache) = self.forward_item(x_t.data(), h, w, t, row);
        let n = T::of_usize(out.len());
        let two_over_n = T::of(2.0) / n;
        let mut loss = T::zero();
        let grad_out: Vec<T> = out
            .iter()
            .zip(target.data())
            .map(|(&o, &y)| {
                let d = o - y;
                loss += d * d;
                two_over_n * d
            })
            .collect();
        Ok((loss / n, self.backward_item(&grad_out, &cache, h, w)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ConvDenoiser {
        let cfg = ConvDenoiserConfig {
            channels: 2,
            num_classes: 3,
            width: 4,
            depth: 4,
            time_dim: 8,
            emb_dim: 6,
        };
        ConvDenoiser::new(cfg, &mut RngStream::new(1)).unwrap()
    }

    #[test]
    fn untrained_predicts_zero() {
        let net = small();
        let x: Tensor = RngStream::new(2).gaussian(&[2, 2, 8, 8]);
        let out = net.predict(&x, 10, Some(1)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn size_agnostic_shapes() {
        let mut net = small();
        // give the output layer weights so shapes are exercised on real values
        let mut rng = RngStream::new(3);
        let last = ConvDenoiser::<f64>::conv_w(3);
        let shape = net.params.get(last).shape().to_vec();
        *net.params.get_mut(last) = rng.gaussian(&shape);
        for size in [8, 12, 16, 32] {
            let x: Tensor = rng.gaussian(&[1, 2, size, size + 4]);
            let out = net.predict(&x, 5, None).unwrap();
            assert_eq!(out.shape(), x.shape());
            assert!(out.is_finite());
        }
        let tiny: Tensor = rng.gaussian(&[1, 2, 7, 8]);
        assert!(matches!(net.predict(&tiny, 5, None), Err(Error::Size(_))));
        assert!(matches!(net.predict(&Tensor::zeros(&[1, 2, 8, 8]), 5, Some(3)), Err(Error::Parameter(_))));
    }

    #[test]
    fn parameter_count_does_not_depend_on_size() {
        let net = small();
        let n = net.params().count();
        assert!(n > 0);
        let _ = net.predict(&Tensor::zeros(&[1, 2, 16, 16]), 1, None).unwrap();
        assert_eq!(net.params().count(), n);
    }

    #[test]
    fn rejects_bad_depth() {
        let mut cfg = ConvDenoiserConfig::new(3, 5);
        cfg.depth = 7;
        assert!(ConvDenoiser::<f64>::new(cfg, &mut RngStream::new(0)).is_err());
    }
}
