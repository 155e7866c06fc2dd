use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;

use super::Denoiser;

/// Isotropic Gaussian mixture over flat `d`-vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture<T: Scalar = f64> {
    weights: Vec<T>,
    means: Tensor<T>,
    variances: Vec<T>,
}

impl<T: Scalar> GaussianMixture<T> {
    pub fn new(weights: Vec<T>, means: Tensor<T>, variances: Vec<T>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.rank() != 2 || means.rows() != k || variances.len() != k {
            return Err(Error::Contract(format!(
                "mixture needs k weights, k×d means and k variances (k = {k}, means {:?}, {} variances)",
                means.shape(),
                variances.len()
            )));
        }
        if weights.iter().any(|&w| !(w > T::zero())) {
            return Err(Error::Parameter("mixture weights must be positive".into()));
        }
        let total: T = weights.iter().copied().sum();
        if (total - T::one()).abs() > T::of(1e-9).max(T::epsilon() * T::of(16.0)) {
            return Err(Error::Parameter(format!("mixture weights sum to {total}, not 1")));
        }
        if variances.iter().any(|&v| !(v >= T::zero())) {
            return Err(Error::Parameter("mixture variances must be non-negative".into()));
        }
        Ok(GaussianMixture {
            weights,
            means,
            variances,
        })
    }

    /// Standard normal `N(0, I_d)` as a one-component mixture.
    pub fn standard_normal(dim: usize) -> Self {
        GaussianMixture {
            weights: vec![T::one()],
            means: Tensor::zeros(&[1, dim]),
            variances: vec![T::one()],
        }
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn mean(&self, k: usize) -> &[T] {
        self.means.row(k)
    }

    pub fn means(&self) -> &Tensor<T> {
        &self.means
    }

    pub fn variance(&self, k: usize) -> T {
        self.variances[k]
    }

    /// Shifts every component mean by `v`.
    pub fn translated(&self, v: &[T]) -> Self {
        let mut out = self.clone();
        for k in 0..self.components() {
            for (j, &vj) in v.iter().enumerate() {
                let m = out.means.at(k, j);
                out.means.set(k, j, m + vj);
            }
        }
        out
    }

    /// Draws `n` points `[n, d]` and their component labels.
    pub fn sample(&self, n: usize, rng: &mut RngStream) -> (Tensor<T>, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut k = self.components() - 1;
            for (i, w) in self.weights.iter().enumerate() {
                acc += w.as_f64();
                if u < acc {
                    k = i;
                    break;
                }
            }
            let z: Tensor<T> = rng.gaussian(&[d]);
            let sd = self.variances[k].sqrt();
            data.extend(self.mean(k).iter().zip(z.data()).map(|(&m, &zj)| m + sd * zj));
            labels.push(k);
        }
        (Tensor::new(vec![n, d], data).expect("n×d"), labels)
    }
}

/// Exact `E[ε | x_t]` for data drawn from a Gaussian mixture.
///
/// Under the forward marginal, component `k` becomes
/// `N(√ᾱ μ_k, (ᾱ v_k + 1 − ᾱ) I)`; the posterior mean of `x_0` is the
/// responsibility-weighted per-component Gaussian posterior mean.
#[derive(Debug, Clone)]
pub struct AnalyticGmmDenoiser<T: Scalar = f64> {
    mixture: GaussianMixture<T>,
    schedule: NoiseSchedule<T>,
}

impl<T: Scalar> AnalyticGmmDenoiser<T> {
    pub fn new(mixture: GaussianMixture<T>, schedule: NoiseSchedule<T>) -> Self {
        AnalyticGmmDenoiser { mixture, schedule }
    }

    pub fn mixture(&self) -> &GaussianMixture<T> {
        &self.mixture
    }

    pub fn schedule(&self) -> &NoiseSchedule<T> {
        &self.schedule
    }

    /// `E[x_0 | x_t]` for one flat point; `only` restricts to one component.
    pub fn posterior_x0(&self, x: &[T], t: usize, only: Option<usize>) -> Vec<T> {
        let ab = self.schedule.alpha_bar(t);
        let sab = ab.sqrt();
        let d = self.mixture.dim();
        let comps: Vec<usize> = match only {
            Some(k) => vec![k],
            None => (0..self.mixture.components()).collect(),
        };
        let half = T::of(0.5);
        let two_pi = T::PI() + T::PI();
        let mut logits = Vec::with_capacity(comps.len());
        for &k in &comps {
            let s = ab * self.mixture.variances[k] + (T::one() - ab);
            let mu = self.mixture.mean(k);
            let dist2: T = x.iter().zip(mu).map(|(&xi, &m)| (xi - sab * m).powi(2)).sum();
            logits.push(
                self.mixture.weights[k].ln() - half * T::of_usize(d) * (two_pi * s).ln() - half * dist2 / s,
            );
        }
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let unnorm: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
        let z: T = unnorm.iter().copied().sum();
        let mut out = vec![T::zero(); d];
        for (ci, &k) in comps.iter().enumerate() {
            let r = unnorm[ci] / z;
            let s = ab * self.mixture.variances[k] + (T::one() - ab);
            let gain = sab * self.mixture.variances[k] / s;
            let mu = self.mixture.mean(k);
            for j in 0..d {
                let post = mu[j] + gain * (x[j] - sab * mu[j]);
                out[j] += r * post;
            }
        }
        out
    }
}

impl<T: Scalar> Denoiser<T> for AnalyticGmmDenoiser<T> {
    fn predict(&self, x_t: &Tensor<T>, t: usize, class: Option<usize>) -> Result<Tensor<T>> {
        self.schedule.check_timestep(t)?;
        if x_t.rank() < 1 || x_t.item_len() != self.mixture.dim() {
            return Err(Error::Contract(format!(
                "expected items of {} values, got shape {:?}",
                self.mixture.dim(),
                x_t.shape()
            )));
        }
        if let Some(c) = class {
            if c >= self.mixture.components() {
                return Err(Error::Parameter(format!("class {c} out of range")));
            }
        }
        let ab = self.schedule.alpha_bar(t);
        let sab = ab.sqrt();
        let inv_s1 = T::one() / (T::one() - ab).sqrt();
        let mut out = Tensor::zeros(x_t.shape());
        for i in 0..x_t.batch_len() {
            let x = x_t.item(i);
            let x0 = self.posterior_x0(x, t, class);
            for ((o, &xj), &m) in out.item_mut(i).iter_mut().zip(x).zip(&x0) {
                *o = (xj - sab * m) * inv_s1;
            }
        }
        Ok(out)
    }

    fn item_shape(&self, _spatial: &[usize]) -> Result<Vec<usize>> {
        Ok(vec![self.mixture.dim()])
    }

    fn num_classes(&self) -> usize {
        self.mixture.components()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn standard_normal_closed_form() {
        let s = schedule();
        let d = AnalyticGmmDenoiser::new(GaussianMixture::standard_normal(3), s.clone());
        let x = Tensor::new(vec![2, 3], vec![0.3, -1.2, 2.0, 0.0, 0.5, -0.7]).unwrap();
        for t in [1, 10, 500, 1000] {
            let eps = d.predict(&x, t, None).unwrap();
            let expect = x.scale((1.0 - s.alpha_bar(t)).sqrt());
            assert!(eps.sub(&expect).max_abs() < 1e-12, "t = {t}");
        }
    }

    #[test]
    fn at_a_mean_with_no_noise_prediction_vanishes() {
        let s = NoiseSchedule::linear(10, 1e-9, 1e-9).unwrap();
        let mix = GaussianMixture::new(
            vec![0.5, 0.5],
            Tensor::from_rows(&[vec![2.0, 0.0], vec![-2.0, 0.0]]).unwrap(),
            vec![0.01, 0.01],
        )
        .unwrap();
        let d = AnalyticGmmDenoiser::new(mix, s);
        let x = Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap();
        let eps = d.predict(&x, 1, None).unwrap();
        assert!(eps.max_abs() < 1e-3, "{eps:?}");
    }

    #[test]
    fn rejects_bad_mixtures() {
        let means = Tensor::<f64>::zeros(&[2, 1]);
        assert!(GaussianMixture::new(vec![0.5, 0.6], means.clone(), vec![1.0, 1.0]).is_err());
        assert!(GaussianMixture::new(vec![1.0, 0.0], means.clone(), vec![1.0, 1.0]).is_err());
        assert!(GaussianMixture::new(vec![1.0], means, vec![1.0]).is_err());
    }
}
