use serde::{Deserialize, Serialize};

use super::TrainableDenoiser;
use crate::diffusion::simple_loss;
use crate::error::{Error, Result};
use crate::nn::AdamState;
use crate::numerics::{RngStream, Tensor};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Probability of replacing a label by the NULL class.
    #[serde(default = "default_p_uncond")]
    pub p_uncond: f64,
    /// Stop after this many optimizer steps, whatever the epoch count.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

fn default_p_uncond() -> f64 {
    0.1
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            p_uncond: default_p_uncond(),
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

/// Trains a denoiser on labelled items with the simple loss and label
/// dropout for classifier-free guidance.
pub fn train<T, D>(
    net: &mut D,
    dataset: &[(Tensor<T>, usize)],
    s: &NoiseSchedule<T>,
    opt: &mut AdamState<T>,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<TrainReport>
where
    T: Scalar,
    D: TrainableDenoiser<T>,
{
    if dataset.is_empty() {
        return Err(Error::Parameter("training set is empty".into()));
    }
    if !(0.0..1.0).contains(&cfg.p_uncond) {
        return Err(Error::Parameter(format!("p_uncond must be in [0, 1), got {}", cfg.p_uncond)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Parameter("batch size must be positive".into()));
    }
    let mut report = TrainReport::default();
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        let order = rng.permutation(dataset.len());
        let mut epoch_sum = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let batch: Vec<(Tensor<T>, Option<usize>)> = chunk
                .iter()
                .map(|&i| {
                    let (x, c) = &dataset[i];
                    let drop = cfg.p_uncond > 0.0 && rng.uniform() < cfg.p_uncond;
                    (x.clone(), if drop { None } else { Some(*c) })
                })
                .collect();
            let (loss, grads) = simple_loss(&*net, &batch, s, rng)?;
            step += 1;
            let loss = loss.as_f64();
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            opt.update(net.params_mut(), &grads);
            report.step_losses.push(loss);
            epoch_sum += loss;
            epoch_batches += 1;
        }
        if epoch_batches > 0 {
            report.epoch_losses.push(epoch_sum / epoch_batches as f64);
        }
        if cfg.max_steps.is_some_and(|m| step >= m) {
            break;
        }
    }
    Ok(report)
}
