//! Small patch classifier: three conv/SiLU/avg-pool blocks, global average
//! pooling and a linear head. The pooled activations double as the
//! "classifier" feature space for FID and KID.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::FeatureExtractor;
use crate::nn::ops::{self, Conv2d};
use crate::nn::{fan_in_std, AdamConfig, AdamState, ParamSet};
use crate::numerics::{RngStream, Tensor};
use crate::scalar::Scalar;

const BLOCKS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    #[serde(default = "default_widths")]
    pub widths: [usize; BLOCKS],
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
}

fn default_widths() -> [usize; BLOCKS] {
    [8, 16, 32]
}
fn default_epochs() -> usize {
    15
}
fn default_batch() -> usize {
    16
}
fn default_lr() -> f64 {
    3e-3
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            widths: default_widths(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Classifier<T: Scalar = f64> {
    channels: usize,
    num_classes: usize,
    widths: [usize; BLOCKS],
    params: ParamSet<T>,
}

struct Cache<T> {
    inputs: Vec<(Vec<T>, usize, usize)>,
    cols: Vec<Vec<T>>,
    pre: Vec<Vec<T>>,
    features: Vec<T>,
    last_plane: usize,
}

impl<T: Scalar> Classifier<T> {
    pub fn new(channels: usize, num_classes: usize, widths: [usize; BLOCKS], rng: &mut RngStream) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Parameter("a classifier needs at least 2 classes".into()));
        }
        if channels == 0 || widths.contains(&0) {
            return Err(Error::Parameter("classifier widths must be positive".into()));
        }
        let mut params = ParamSet::new();
        let mut c_in = channels;
        for (b, &w) in widths.iter().enumerate() {
            let conv = Conv2d::same3x3(c_in, w);
            params.push_normal(format!("block{b}.w"), &conv.weight_shape(), fan_in_std(conv.fan_in()) * 1.4, rng);
            params.push_zeros(format!("block{b}.b"), &[w]);
            c_in = w;
        }
        params.push_normal("head.w", &[num_classes, c_in], fan_in_std(c_in), rng);
        params.push_zeros("head.b", &[num_classes]);
        Ok(Classifier {
            channels,
            num_classes,
            widths,
            params,
        })
    }

    pub fn from_params(channels: usize, num_classes: usize, widths: [usize; BLOCKS], params: &ParamSet<T>) -> Result<Self> {
        let mut c = Self::new(channels, num_classes, widths, &mut RngStream::new(0))?;
        c.params.load_from("", |n| params.index_of(n).map(|i| params.get(i)))?;
        Ok(c)
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn widths(&self) -> [usize; BLOCKS] {
        self.widths
    }

    pub fn feature_dim(&self) -> usize {
        self.widths[BLOCKS - 1]
    }

    fn check_item(&self, shape: &[usize]) -> Result<(usize, usize)> {
        if shape.len() != 3 || shape[0] != self.channels {
            return Err(Error::Contract(format!(
                "classifier expects [{}, h, w] images, got {shape:?}",
                self.channels
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        if h < 8 || w < 8 {
            return Err(Error::Size(format!("classifier needs at least 8×8 inputs, got {h}×{w}")));
        }
        Ok((h, w))
    }

    fn forward(&self, x: &[T], mut h: usize, mut w: usize) -> Cache<T> {
        let mut cache = Cache {
            inputs: Vec::new(),
            cols: Vec::new(),
            pre: Vec::new(),
            features: Vec::new(),
            last_plane: 0,
        };
        let mut act = x.to_vec();
        let mut c_in = self.channels;
        for b in 0..BLOCKS {
            let conv = Conv2d::same3x3(c_in, self.widths[b]);
            let (pre, cols, _, _) = conv.forward(&act, h, w, self.params.get(2 * b).data(), self.params.get(2 * b + 1).data());
            let s = ops::silu_vec(&pre);
            let (pooled, ho, wo) = ops::avgpool2_forward(&s, self.widths[b], h, w);
            cache.inputs.push((act, h, w));
            cache.cols.push(cols);
            cache.pre.push(pre);
            act = pooled;
            h = ho;
            w = wo;
            c_in = self.widths[b];
        }
        cache.last_plane = h * w;
        cache.features = ops::global_avg_pool(&act, c_in, h * w);
        cache
    }

    fn logits(&self, features: &[T]) -> Vec<T> {
        ops::linear_forward(
            self.params.get(2 * BLOCKS).data(),
            self.params.get(2 * BLOCKS + 1).data(),
            features,
        )
    }

    /// Pooled penultimate activations for one `[c, h, w]` image.
    pub fn features_item(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let (h, w) = self.check_item(x.shape())?;
        Ok(self.forward(x.data(), h, w).features)
    }

    pub fn predict_item(&self, x: &Tensor<T>) -> Result<usize> {
        let f = self.features_item(x)?;
        let logits = self.logits(&f);
        Ok(argmax(&logits))
    }

    /// Cross-entropy of one labelled image and its parameter gradient.
    pub fn item_loss_grad(&self, x: &Tensor<T>, label: usize) -> Result<(T, ParamSet<T>)> {
        if label >= self.num_classes {
            return Err(Error::Parameter(format!("label {label} out of range")));
        }
        let (h, w) = self.check_item(x.shape())?;
        let cache = self.forward(x.data(), h, w);
        let logits = self.logits(&cache.features);
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
        let z: T = exps.iter().copied().sum();
        let loss = z.ln() + max - logits[label];
        let mut g: Vec<T> = exps.iter().map(|&e| e / z).collect();
        g[label] -= T::one();

        let mut grads = self.params.zeros_like();
        let hw = self.params.get(2 * BLOCKS).data();
        let (dw, db) = grads.pair_mut(2 * BLOCKS, 2 * BLOCKS + 1);
        let d_feat = ops::linear_backward(hw, &cache.features, &g, dw, db);
        let mut d_act = ops::global_avg_pool_backward(&d_feat, cache.last_plane);
        for b in (0..BLOCKS).rev() {
            let (_, bh, bw) = cache.inputs[b];
            let c_in = if b == 0 { self.channels } else { self.widths[b - 1] };
            let conv = Conv2d::same3x3(c_in, self.widths[b]);
            let d_s = ops::avgpool2_backward(&d_act, self.widths[b], bh, bw);
            let d_pre = ops::silu_backward(&d_s, &cache.pre[b]);
            let wt = self.params.get(2 * b).data();
            let (dw, db) = grads.pair_mut(2 * b, 2 * b + 1);
            let dx = conv.backward(&d_pre, &cache.cols[b], bh, bw, wt, dw, db, b > 0);
            if let Some(dx) = dx {
                d_act = dx;
            }
        }
        Ok((loss, grads))
    }
}

fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl<T: Scalar> FeatureExtractor<T> for Classifier<T> {
    fn name(&self) -> &str {
        "classifier"
    }

    fn dim(&self) -> usize {
        self.feature_dim()
    }

    fn extract(&self, images: &Tensor<T>) -> Result<Tensor<f64>> {
        if images.rank() != 4 {
            return Err(Error::Contract(format!("expected [n, c, h, w], got {:?}", images.shape())));
        }
        let rows: Vec<Vec<f64>> = (0..images.batch_len())
            .into_par_iter()
            .map(|i| {
                let f = self.features_item(&images.item_tensor(i))?;
                Ok(f.into_iter().map(|v| v.as_f64()).collect())
            })
            .collect::<Result<_>>()?;
        Tensor::new(vec![images.batch_len(), self.feature_dim()], rows.concat())
    }
}

/// Trains a classifier with Adam and softmax cross-entropy.
pub fn train_classifier<T: Scalar>(
    data: &[(Tensor<T>, usize)],
    num_classes: usize,
    cfg: &ClassifierConfig,
    rng: &mut RngStream,
) -> Result<(Classifier<T>, Vec<f64>)> {
    let Some((first, _)) = data.first() else {
        return Err(Error::DegenerateData("classifier training set is empty".into()));
    };
    let mut present = vec![false; num_classes];
    for (_, k) in data {
        *present
            .get_mut(*k)
            .ok_or_else(|| Error::Parameter(format!("label {k} out of range")))? = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::DegenerateData("training data covers fewer than 2 classes".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Parameter("batch size must be positive".into()));
    }
    let mut init = rng.fork();
    let mut net = Classifier::new(first.shape()[0], num_classes, cfg.widths, &mut init)?;
    let mut opt = AdamState::new(
        &net.params,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let order = rng.permutation(data.len());
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let per: Vec<(T, ParamSet<T>)> = chunk
                .par_iter()
                .map(|&i| net.item_loss_grad(&data[i].0, data[i].1))
                .collect::<Result<_>>()?;
            let mut grads = net.params.zeros_like();
            let mut loss = T::zero();
            for (l, g) in &per {
                loss += *l;
                grads.axpy(T::one(), g);
            }
            grads.scale_inplace(T::one() / T::of_usize(chunk.len()));
            step += 1;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Divergence {
                    step,
                    loss: loss.as_f64(),
                });
            }
            opt.update(&mut net.params, &grads);
            total += loss.as_f64();
        }
        epoch_losses.push(total / data.len() as f64);
    }
    Ok((net, epoch_losses))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrainSource {
    Real,
    Generated,
    Combined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub source: TrainSource,
    pub train_size: usize,
    pub per_class_accuracy: Vec<f64>,
    pub overall_accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate<T: Scalar>(net: &Classifier<T>, test: &[(Tensor<T>, usize)], source: TrainSource, train_size: usize) -> Result<ClassifierReport> {
    let c = net.num_classes();
    let preds: Vec<usize> = test.par_iter().map(|(x, _)| net.predict_item(x)).collect::<Result<_>>()?;
    let mut confusion = vec![vec![0usize; c]; c];
    for ((_, k), p) in test.iter().zip(&preds) {
        if *k >= c {
            return Err(Error::Parameter(format!("label {k} out of range")));
        }
        confusion[*k][*p] += 1;
    }
    let total: usize = confusion.iter().flatten().sum();
    let correct: usize = (0..c).map(|k| confusion[k][k]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let n: usize = row.iter().sum();
            if n == 0 {
                f64::NAN
            } else {
                row[k] as f64 / n as f64
            }
        })
        .collect();
    Ok(ClassifierReport {
        source,
        train_size,
        per_class_accuracy,
        overall_accuracy: if total == 0 { f64::NAN } else { correct as f64 / total as f64 },
        confusion,
    })
}
