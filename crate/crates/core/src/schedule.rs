//! Variance schedules shared by the forward and reverse processes.
//!
//! Timesteps are 1-based: `t ∈ 1..=T`, with `alpha_bar(0) = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleConfig {
    Linear {
        steps: usize,
        beta_start: f64,
        beta_end: f64,
    },
    Cosine {
        steps: usize,
        #[serde(default = "default_cosine_offset")]
        offset: f64,
    },
}

fn default_cosine_offset() -> f64 {
    0.008
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig::Linear {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build<T: Scalar>(&self) -> Result<NoiseSchedule<T>> {
        match *self {
            ScheduleConfig::Linear {
                steps,
                beta_start,
                beta_end,
            } => NoiseSchedule::linear(steps, beta_start, beta_end),
            ScheduleConfig::Cosine { steps, offset } => NoiseSchedule::cosine(steps, offset),
        }
    }

    pub fn steps(&self) -> usize {
        match *self {
            ScheduleConfig::Linear { steps, .. } | ScheduleConfig::Cosine { steps, .. } => steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<T: Scalar = f64> {
    config: ScheduleConfig,
    // index 0 is a placeholder so that index t addresses timestep t
    beta: Vec<T>,
    alpha: Vec<T>,
    alpha_bar: Vec<T>,
    posterior_var: Vec<T>,
}

impl<T: Scalar> NoiseSchedule<T> {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Parameter("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Parameter(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let betas = (1..=steps).map(|t| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * (t - 1) as f64 / (steps - 1) as f64
            }
        });
        Ok(Self::from_betas(
            betas.collect(),
            ScheduleConfig::Linear {
                steps,
                beta_start,
                beta_end,
            },
        ))
    }

    /// Squared-cosine `alpha_bar` curve, betas capped at 0.999.
    pub fn cosine(steps: usize, offset: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Parameter("schedule needs at least one step".into()));
        }
        if !(offset > 0.0) {
            return Err(Error::Parameter(format!("cosine offset must be positive, got {offset}")));
        }
        let f = |t: usize| {
            let x = (t as f64 / steps as f64 + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let betas = (1..=steps)
            .map(|t| (1.0 - f(t) / f(t - 1)).clamp(1e-8, 0.999))
            .collect();
        Ok(Self::from_betas(betas, ScheduleConfig::Cosine { steps, offset }))
    }

    fn from_betas(betas: Vec<f64>, config: ScheduleConfig) -> Self {
        let n = betas.len();
        let mut beta = Vec::with_capacity(n + 1);
        let mut alpha = Vec::with_capacity(n + 1);
        let mut alpha_bar = Vec::with_capacity(n + 1);
        let mut posterior_var = Vec::with_capacity(n + 1);
        beta.push(T::zero());
        alpha.push(T::one());
        alpha_bar.push(T::one());
        posterior_var.push(T::zero());
        for b in betas {
            let b = T::of(b);
            let a = T::one() - b;
            let prev = *alpha_bar.last().expect("seeded");
            let ab = a * prev;
            beta.push(b);
            alpha.push(a);
            alpha_bar.push(ab);
            posterior_var.push((T::one() - prev) / (T::one() - ab) * b);
        }
        NoiseSchedule {
            config,
            beta,
            alpha,
            alpha_bar,
            posterior_var,
        }
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Parameter(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> T {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> T {
        self.alpha[t]
    }

    /// Cumulative product `∏_{s≤t} α_s`; defined as 1 at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> T {
        self.alpha_bar[t]
    }

    /// `β̃_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t`
    pub fn posterior_var(&self, t: usize) -> T {
        self.posterior_var[t]
    }

    /// Evenly spaced, strictly increasing timesteps ending at `T`:
    /// `round(i·T/n)` for `i = 1..=n`.
    pub fn subsequence(&self, n_steps: usize) -> Result<Vec<usize>> {
        let total = self.steps();
        if n_steps == 0 || n_steps > total {
            return Err(Error::Parameter(format!(
                "step count {n_steps} outside 1..={total}"
            )));
        }
        let ratio = total as f64 / n_steps as f64;
        Ok((1..=n_steps)
            .map(|i| ((i as f64 * ratio).round() as usize).clamp(1, total))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step() {
        let s = NoiseSchedule::<f64>::linear(1, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert_eq!(s.posterior_var(1), 0.0);
    }

    #[test]
    fn standard_first_step() {
        let s = NoiseSchedule::<f64>::linear(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.alpha_bar(1), 0.9999);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NoiseSchedule::<f64>::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::<f64>::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::<f64>::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::<f64>::linear(10, 0.01, 1.0).is_err());
    }

    #[test]
    fn invariants_hold() {
        for s in [
            NoiseSchedule::<f64>::linear(1000, 1e-4, 0.02).unwrap(),
            NoiseSchedule::<f64>::cosine(200, 0.008).unwrap(),
        ] {
            for t in 1..=s.steps() {
                assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                assert_eq!(s.alpha_bar(t), s.alpha(t) * s.alpha_bar(t - 1));
                assert!(s.posterior_var(t) <= s.beta(t));
            }
        }
    }

    #[test]
    fn subsequence_edges() {
        let s = NoiseSchedule::<f64>::linear(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.subsequence(1000).unwrap(), (1..=1000).collect::<Vec<_>>());
        assert_eq!(s.subsequence(1).unwrap(), vec![1000]);
        assert!(s.subsequence(0).is_err());
        assert!(s.subsequence(1001).is_err());
    }

    #[test]
    fn schedule_config_json() {
        let c: ScheduleConfig =
            serde_json::from_str(r#"{"kind":"linear","steps":10,"beta_start":0.001,"beta_end":0.02}"#)
                .unwrap();
        assert_eq!(c.steps(), 10);
        assert!(serde_json::from_str::<ScheduleConfig>(r#"{"kind":"linear","steps":10,"beta_start":0.001,"beta_end":0.02,"x":1}"#).is_err());
    }
}
