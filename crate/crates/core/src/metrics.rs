//! Fréchet and kernel distances over pluggable feature extractors, and
//! distribution-level checks against analytic mixture targets.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::GaussianMixture;
use crate::error::{Error, Result};
use crate::numerics::{dot, psd_sqrt, RngStream, Tensor};
use crate::scalar::Scalar;

/// Ridge added to both covariances when the FID square root meets a
/// matrix that is not numerically PSD.
pub const FID_RIDGE: f64 = 1e-6;

/// Maps an image batch to an `n × d` feature matrix.
pub trait FeatureExtractor<T: Scalar>: Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn extract(&self, images: &Tensor<T>) -> Result<Tensor<f64>>;
}

/// Seeded random linear projection of flattened pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RandProj {
    pub seed: u64,
    pub dim: usize,
}

impl Default for RandProj {
    fn default() -> Self {
        RandProj { seed: 0x5eed, dim: 64 }
    }
}

impl RandProj {
    /// Projection matrix `[dim, d_in]`, entries `N(0, 1/d_in)`.
    pub fn matrix(&self, d_in: usize) -> Tensor<f64> {
        let mut rng = RngStream::new(self.seed).child(d_in as u64);
        let scale = 1.0 / (d_in as f64).sqrt();
        rng.gaussian::<f64>(&[self.dim, d_in]).scale(scale)
    }
}

impl<T: Scalar> FeatureExtractor<T> for RandProj {
    fn name(&self) -> &str {
        "randproj"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, images: &Tensor<T>) -> Result<Tensor<f64>> {
        if images.rank() < 2 {
            return Err(Error::Contract(format!("expected an image batch, got {:?}", images.shape())));
        }
        let n = images.batch_len();
        let d_in = images.item_len();
        let p = self.matrix(d_in);
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let x: Vec<f64> = images.item(i).iter().map(|v| v.as_f64()).collect();
                (0..self.dim).map(|r| dot(p.row(r), &x)).collect()
            })
            .collect();
        Tensor::new(vec![n, self.dim], rows.concat())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mu: Vec<f64>,
    pub sigma: Tensor<f64>,
    pub n: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

fn check_matrix(f: &Tensor<f64>, what: &str) -> Result<(usize, usize)> {
    if f.rank() != 2 {
        return Err(Error::Contract(format!("{what} must be n×d, got {:?}", f.shape())));
    }
    Ok((f.rows(), f.cols()))
}

/// Sample mean and unbiased (divisor `n − 1`) covariance.
pub fn fit_stats(features: &Tensor<f64>) -> Result<GaussianStats> {
    let (n, d) = check_matrix(features, "features")?;
    if n < 2 {
        return Err(Error::InsufficientData(format!("need at least 2 feature rows, got {n}")));
    }
    let mut mu = vec![0.0; d];
    for i in 0..n {
        for (m, &v) in mu.iter_mut().zip(features.row(i)) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = (0..n)
        .flat_map(|i| features.row(i).iter().zip(&mu).map(|(v, m)| v - m).collect::<Vec<_>>())
        .collect();
    let xc = Tensor::new(vec![n, d], centered)?;
    let sigma = xc.transpose().matmul(&xc)?.scale(1.0 / (n - 1) as f64);
    // exact symmetry regardless of summation order
    let sigma = sigma.add(&sigma.transpose()).scale(0.5);
    Ok(GaussianStats { mu, sigma, n })
}

/// Fréchet distance `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁^½ Σ₂ Σ₁^½)^½)`,
/// clamped at 0.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() || a.sigma.shape() != b.sigma.shape() {
        return Err(Error::Contract(format!(
            "feature dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let mean_term: f64 = a.mu.iter().zip(&b.mu).map(|(x, y)| (x - y).powi(2)).sum();
    let cross = match trace_sqrt_product(&a.sigma, &b.sigma) {
        Err(Error::NotPsd { .. }) => {
            let ridge = Tensor::eye(a.dim()).scale(FID_RIDGE);
            trace_sqrt_product(&a.sigma.add(&ridge), &b.sigma.add(&ridge))?
        }
        other => other?,
    };
    let value = mean_term + a.sigma.trace() + b.sigma.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

fn trace_sqrt_product(s1: &Tensor<f64>, s2: &Tensor<f64>) -> Result<f64> {
    let r = psd_sqrt(s1)?;
    let m = r.matmul(s2)?.matmul(&r)?;
    let m = m.add(&m.transpose()).scale(0.5);
    Ok(psd_sqrt(&m)?.trace())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KidConfig {
    #[serde(default = "default_degree")]
    pub degree: i32,
    /// Kernel scale; `None` means `1/d`.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default = "default_coef")]
    pub coef: f64,
    #[serde(default = "default_subset")]
    pub subset_size: usize,
    #[serde(default = "default_subsets")]
    pub n_subsets: usize,
}

fn default_degree() -> i32 {
    3
}
fn default_coef() -> f64 {
    1.0
}
fn default_subset() -> usize {
    100
}
fn default_subsets() -> usize {
    10
}

impl Default for KidConfig {
    fn default() -> Self {
        KidConfig {
            degree: default_degree(),
            gamma: None,
            coef: default_coef(),
            subset_size: default_subset(),
            n_subsets: default_subsets(),
        }
    }
}

impl KidConfig {
    pub fn kernel(&self, d: usize) -> PolyKernel {
        PolyKernel {
            gamma: self.gamma.unwrap_or(1.0 / d as f64),
            coef: self.coef,
            degree: self.degree,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolyKernel {
    pub gamma: f64,
    pub coef: f64,
    pub degree: i32,
}

impl PolyKernel {
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        (self.gamma * dot(x, y) + self.coef).powi(self.degree)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KidResult {
    pub mean: f64,
    /// Population standard deviation over subsets.
    pub std: f64,
}

/// Unbiased MMD² between the rows of `x` and `y`.
pub fn mmd2_unbiased(x: &Tensor<f64>, y: &Tensor<f64>, k: &PolyKernel) -> Result<f64> {
    let (n, d) = check_matrix(x, "x")?;
    let (m, dy) = check_matrix(y, "y")?;
    if d != dy {
        return Err(Error::Contract(format!("feature dimensions differ: {d} vs {dy}")));
    }
    if n < 2 || m < 2 {
        return Err(Error::InsufficientData("MMD needs at least 2 rows per set".into()));
    }
    let within = |a: &Tensor<f64>, len: usize| -> f64 {
        let rows: Vec<f64> = (0..len)
            .into_par_iter()
            .map(|i| ((i + 1)..len).map(|j| k.eval(a.row(i), a.row(j))).sum::<f64>())
            .collect();
        2.0 * rows.iter().sum::<f64>() / (len * (len - 1)) as f64
    };
    let cross_rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| (0..m).map(|j| k.eval(x.row(i), y.row(j))).sum::<f64>())
        .collect();
    let cross = cross_rows.iter().sum::<f64>() / (n * m) as f64;
    Ok(within(x, n) + within(y, m) - 2.0 * cross)
}

/// KID: unbiased MMD² averaged over random equal-size subsets.
pub fn kid(x: &Tensor<f64>, y: &Tensor<f64>, cfg: &KidConfig, rng: &mut RngStream) -> Result<KidResult> {
    let (n, d) = check_matrix(x, "x")?;
    let (m, _) = check_matrix(y, "y")?;
    if cfg.subset_size < 2 {
        return Err(Error::Parameter(format!("KID subset size must be ≥ 2, got {}", cfg.subset_size)));
    }
    if cfg.n_subsets == 0 {
        return Err(Error::Parameter("KID needs at least one subset".into()));
    }
    if cfg.subset_size > n.min(m) {
        return Err(Error::Parameter(format!(
            "KID subset size {} exceeds available rows ({n}, {m})",
            cfg.subset_size
        )));
    }
    let kernel = cfg.kernel(d);
    let pick = |t: &Tensor<f64>, idx: &[usize]| -> Tensor<f64> {
        let data = idx[..cfg.subset_size].iter().flat_map(|&i| t.row(i).to_vec()).collect();
        Tensor::new(vec![cfg.subset_size, d], data).expect("subset")
    };
    let mut values = Vec::with_capacity(cfg.n_subsets);
    for _ in 0..cfg.n_subsets {
        let xi = rng.permutation(n);
        let yi = rng.permutation(m);
        values.push(mmd2_unbiased(&pick(x, &xi), &pick(y, &yi), &kernel)?);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    Ok(KidResult { mean, std: var.sqrt() })
}

/// Number of random directions for the sliced Wasserstein distance.
pub const SLICED_PROJECTIONS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    /// Fraction of samples nearest to each component mean.
    pub weights: Vec<f64>,
    /// Euclidean distance between each component mean and the mean of the
    /// samples assigned to it (infinite if none were).
    pub mean_errors: Vec<f64>,
    /// Sliced 1-D Wasserstein-1 distance to a fresh draw from the target.
    pub sliced_w1: f64,
}

/// Compares `n × d` samples with a mixture target.
pub fn distribution_checks<T: Scalar>(
    samples: &Tensor<T>,
    target: &GaussianMixture<T>,
    rng: &mut RngStream,
) -> Result<DistributionReport> {
    let samples = samples.cast::<f64>();
    let (n, d) = check_matrix(&samples, "samples")?;
    if d != target.dim() {
        return Err(Error::Contract(format!(
            "samples have dimension {d}, target {}",
            target.dim()
        )));
    }
    if n == 0 {
        return Err(Error::InsufficientData("no samples".into()));
    }
    let k = target.components();
    let means = target.means().cast::<f64>();
    let mut counts = vec![0usize; k];
    let mut sums = vec![vec![0.0; d]; k];
    for i in 0..n {
        let x = samples.row(i);
        let mut best = (f64::INFINITY, 0);
        for c in 0..k {
            let dist: f64 = x.iter().zip(means.row(c)).map(|(a, b)| (a - b).powi(2)).sum();
            if dist < best.0 {
                best = (dist, c);
            }
        }
        counts[best.1] += 1;
        sums[best.1].iter_mut().zip(x).for_each(|(s, v)| *s += v);
    }
    let weights = counts.iter().map(|&c| c as f64 / n as f64).collect();
    let mean_errors = (0..k)
        .map(|c| {
            if counts[c] == 0 {
                return f64::INFINITY;
            }
            let inv = 1.0 / counts[c] as f64;
            sums[c]
                .iter()
                .zip(means.row(c))
                .map(|(s, m)| (s * inv - m).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();

    let (reference, _) = target.sample(n, rng);
    let reference = reference.cast::<f64>();
    let dirs: Tensor<f64> = rng.gaussian(&[SLICED_PROJECTIONS, d]);
    let mut total = 0.0;
    for p in 0..SLICED_PROJECTIONS {
        let dir = dirs.row(p);
        let norm = dot(dir, dir).sqrt();
        let project = |t: &Tensor<f64>| -> Vec<f64> {
            let mut v: Vec<f64> = (0..n).map(|i| dot(t.row(i), dir) / norm).collect();
            v.sort_by(f64::total_cmp);
            v
        };
        let a = project(&samples);
        let b = project(&reference);
        total += a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64;
    }
    Ok(DistributionReport {
        weights,
        mean_errors,
        sliced_w1: total / SLICED_PROJECTIONS as f64,
    })
}
