//! Noise-prediction functions `ε̂(x_t, t, c)`.

mod analytic;
mod conv;
mod train;

pub use analytic::{AnalyticGmmDenoiser, GaussianMixture};
pub use conv::{ConvDenoiser, ConvDenoiserConfig, MIN_SPATIAL};
pub use train::{train, TrainConfig, TrainReport};

use crate::error::Result;
use crate::nn::ParamSet;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// A noise predictor evaluated on batches `[n, ...item]` that share one
/// timestep and one class label (`None` is the unconditional/NULL class).
pub trait Denoiser<T: Scalar>: Sync {
    fn predict(&self, x_t: &Tensor<T>, t: usize, class: Option<usize>) -> Result<Tensor<T>>;

    /// Shape of a single item when sampling at the given spatial extents.
    fn item_shape(&self, spatial: &[usize]) -> Result<Vec<usize>>;

    /// Whether `predict` accepts spatial sizes other than the training size.
    fn size_agnostic(&self) -> bool {
        false
    }

    fn num_classes(&self) -> usize;
}

/// A denoiser with trainable weights and an analytic gradient.
pub trait TrainableDenoiser<T: Scalar>: Denoiser<T> {
    fn params(&self) -> &ParamSet<T>;

    fn params_mut(&mut self) -> &mut ParamSet<T>;

    /// Mean squared error between the prediction for one unbatched item and
    /// `target`, plus its gradient with respect to every parameter.
    fn item_mse_grad(
        &self,
        x_t: &Tensor<T>,
        t: usize,
        class: Option<usize>,
        target: &Tensor<T>,
    ) -> Result<(T, ParamSet<T>)>;
}

impl<T: Scalar, D: Denoiser<T> + ?Sized> Denoiser<T> for &D {
    fn predict(&self, x_t: &Tensor<T>, t: usize, class: Option<usize>) -> Result<Tensor<T>> {
        (**self).predict(x_t, t, class)
    }

    fn item_shape(&self, spatial: &[usize]) -> Result<Vec<usize>> {
        (**self).item_shape(spatial)
    }

    fn size_agnostic(&self) -> bool {
        (**self).size_agnostic()
    }

    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }
}
