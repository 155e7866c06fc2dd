//! Forward noising process and the simple ε-prediction objective, shared
//! by pixel-space and latent-space models.

use rayon::prelude::*;

use crate::denoiser::TrainableDenoiser;
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::numerics::{RngStream, Tensor};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

/// A noised training example together with the noise that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySample<T: Scalar = f64> {
    pub x_t: Tensor<T>,
    pub t: usize,
    pub eps: Tensor<T>,
    pub class_label: Option<usize>,
}

/// Draws `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`. `t = 0` is accepted and returns
/// `x0` unchanged (with the drawn ε still reported).
pub fn forward_marginal<T: Scalar>(
    x0: &Tensor<T>,
    t: usize,
    s: &NoiseSchedule<T>,
    rng: &mut RngStream,
) -> Result<NoisySample<T>> {
    if t > s.steps() {
        return Err(Error::Parameter(format!("timestep {t} outside 0..={}", s.steps())));
    }
    let eps: Tensor<T> = rng.gaussian(x0.shape());
    let ab = s.alpha_bar(t);
    let x_t = if t == 0 {
        x0.clone()
    } else {
        let (a, b) = (ab.sqrt(), (T::one() - ab).sqrt());
        x0.zip_map(&eps, |x, e| a * x + b * e)
    };
    Ok(NoisySample {
        x_t,
        t,
        eps,
        class_label: None,
    })
}

/// One step of `q(x_t | x_{t−1}) = N(√(1−β_t)·x_{t−1}, β_t I)`.
pub fn forward_step<T: Scalar>(
    x_prev: &Tensor<T>,
    t: usize,
    s: &NoiseSchedule<T>,
    rng: &mut RngStream,
) -> Result<Tensor<T>> {
    s.check_timestep(t)?;
    let eps: Tensor<T> = rng.gaussian(x_prev.shape());
    let (a, b) = (s.alpha(t).sqrt(), s.beta(t).sqrt());
    Ok(x_prev.zip_map(&eps, |x, e| a * x + b * e))
}

/// `(1/√α_t)·(x_t − ((1−α_t)/√(1−ᾱ_t))·ε̂)`
pub fn posterior_mean<T: Scalar>(
    x_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    s: &NoiseSchedule<T>,
) -> Result<Tensor<T>> {
    s.check_timestep(t)?;
    x_t.check_same_shape(eps_hat, "posterior mean")?;
    let inv_sqrt_alpha = T::one() / s.alpha(t).sqrt();
    let coef = (T::one() - s.alpha(t)) / (T::one() - s.alpha_bar(t)).sqrt();
    Ok(x_t.zip_map(eps_hat, |x, e| inv_sqrt_alpha * (x - coef * e)))
}

/// Simple ε-prediction loss over a batch of `(x0, class)` items.
///
/// Each element `i` draws its timestep uniformly from `1..=T` and its noise
/// from child stream `i` of a stream forked from `rng`, so results do not
/// depend on how elements are scheduled across threads. Gradients are
/// reduced in element order and averaged over the batch.
pub fn simple_loss<T, D>(
    d: &D,
    batch: &[(Tensor<T>, Option<usize>)],
    s: &NoiseSchedule<T>,
    rng: &mut RngStream,
) -> Result<(T, ParamSet<T>)>
where
    T: Scalar,
    D: TrainableDenoiser<T>,
{
    if batch.is_empty() {
        return Err(Error::Parameter("loss needs a nonempty batch".into()));
    }
    let base = rng.fork();
    let per_item: Vec<(T, ParamSet<T>)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, (x0, class))| {
            let mut r = base.child(i as u64);
            let t = 1 + r.below(s.steps());
            let mut sample = forward_marginal(x0, t, s, &mut r)?;
            sample.class_label = *class;
            d.item_mse_grad(&sample.x_t, t, *class, &sample.eps)
        })
        .collect::<Result<_>>()?;

    let inv_b = T::one() / T::of_usize(batch.len());
    let mut grads = d.params().zeros_like();
    let mut loss = T::zero();
    for (l, g) in &per_item {
        loss += *l;
        grads.axpy(T::one(), g);
    }
    grads.scale_inplace(inv_b);
    Ok((loss * inv_b, grads))
}
