use num::{BigInt, BigRational, ToPrimitive};
use proptest::prelude::*;

use difpath::diffusion::{forward_marginal, forward_step};
use difpath::numerics::{RngStream, Tensor};
use difpath::schedule::{NoiseSchedule, ScheduleConfig};

fn ratio(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

/// `ᾱ_t` from the decimal endpoints in exact rational arithmetic.
fn exact_alpha_bar(steps: i64, t: i64) -> f64 {
    let start = ratio(1, 10_000);
    let end = ratio(2, 100);
    let one = ratio(1, 1);
    let mut prod = one.clone();
    for s in 1..=t {
        let beta = &start + (&end - &start) * ratio(s - 1, steps - 1);
        prod *= &one - beta;
    }
    prod.to_f64().unwrap()
}

#[test]
fn alpha_bar_matches_rational_product() {
    let s = NoiseSchedule::<f64>::linear(1000, 1e-4, 0.02).unwrap();
    for t in [1, 2, 250, 500, 999, 1000] {
        let exact = exact_alpha_bar(1000, t as i64);
        let rel = (s.alpha_bar(t) - exact).abs() / exact;
        assert!(rel < 1e-12, "t={t}: {} vs {exact}, rel {rel:e}", s.alpha_bar(t));
    }
}

#[test]
fn first_and_single_step_values() {
    let s = NoiseSchedule::<f64>::linear(1000, 1e-4, 0.02).unwrap();
    assert_eq!(s.alpha_bar(1), 0.9999);
    assert_eq!(s.alpha_bar(0), 1.0);
    assert_eq!(s.posterior_var(1), 0.0);
    let one = NoiseSchedule::<f64>::linear(1, 0.1, 0.1).unwrap();
    assert_eq!(one.alpha_bar(1), 0.9);
}

#[test]
fn subsequence_spacing() {
    let s = NoiseSchedule::<f64>::linear(10, 1e-4, 0.02).unwrap();
    let seq = s.subsequence(4).unwrap();
    // round(i·10/4) for i = 1..=4, with halves rounded away from zero
    assert_eq!(seq, vec![3, 5, 8, 10]);
    let big = NoiseSchedule::<f64>::linear(1000, 1e-4, 0.02).unwrap();
    assert_eq!(big.subsequence(1).unwrap(), vec![1000]);
    assert_eq!(big.subsequence(1000).unwrap(), (1..=1000).collect::<Vec<_>>());
    assert!(big.subsequence(0).is_err());
    assert!(big.subsequence(1001).is_err());
}

#[test]
fn compounded_steps_match_marginal_moments() {
    let s = NoiseSchedule::<f64>::linear(50, 1e-3, 0.05).unwrap();
    let x0 = Tensor::vector(vec![0.8; 4000]);
    let mut rng = RngStream::new(21);
    let mut x = x0.clone();
    for t in 1..=50 {
        x = forward_step(&x, t, &s, &mut rng).unwrap();
    }
    let n = x.len() as f64;
    let mean = x.mean();
    let var = x.map(|v| (v - mean).powi(2)).sum() / (n - 1.0);
    let (m_true, v_true) = (s.alpha_bar(50).sqrt() * 0.8, 1.0 - s.alpha_bar(50));
    assert!((mean - m_true).abs() < 4.0 * (v_true / n).sqrt(), "{mean} vs {m_true}");
    assert!((var - v_true).abs() < 4.0 * v_true * (2.0 / n).sqrt(), "{var} vs {v_true}");

    let direct = forward_marginal(&x0, 50, &s, &mut RngStream::new(22)).unwrap();
    let dm = direct.x_t.mean();
    assert!((dm - m_true).abs() < 4.0 * (v_true / n).sqrt());
}

#[test]
fn zero_timestep_is_identity() {
    let s = NoiseSchedule::<f64>::linear(10, 1e-4, 0.02).unwrap();
    let x0 = Tensor::vector(vec![0.3, -0.2]);
    let out = forward_marginal(&x0, 0, &s, &mut RngStream::new(1)).unwrap();
    assert_eq!(out.x_t, x0);
    assert!(forward_marginal(&x0, 11, &s, &mut RngStream::new(1)).is_err());
}

fn any_schedule() -> impl Strategy<Value = NoiseSchedule<f64>> {
    prop_oneof![
        (1usize..400, 1e-5f64..0.05, 0.0f64..0.5).prop_map(|(n, a, span)| {
            NoiseSchedule::linear(n, a, (a + span).min(0.99)).unwrap()
        }),
        (1usize..400, 1e-3f64..0.05).prop_map(|(n, off)| NoiseSchedule::cosine(n, off).unwrap()),
    ]
}

proptest! {
    #[test]
    fn schedule_invariants(s in any_schedule()) {
        prop_assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=s.steps() {
            prop_assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            prop_assert_eq!(s.alpha_bar(t), s.alpha(t) * s.alpha_bar(t - 1));
            prop_assert!(s.posterior_var(t) <= s.beta(t));
        }
        prop_assert_eq!(s.posterior_var(1), 0.0);
    }

    #[test]
    fn subsequence_is_increasing_and_ends_at_t(total in 1usize..2000, frac in 0.0f64..1.0) {
        let s = NoiseSchedule::<f64>::linear(total, 1e-4, 0.02).unwrap();
        let n = 1 + ((total - 1) as f64 * frac) as usize;
        let seq = s.subsequence(n).unwrap();
        prop_assert_eq!(seq.len(), n);
        prop_assert_eq!(*seq.last().unwrap(), total);
        prop_assert!(seq.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(seq[0] >= 1);
    }

    #[test]
    fn config_round_trips(s in any_schedule()) {
        let json = serde_json::to_string(s.config()).unwrap();
        let back: ScheduleConfig = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(back.build::<f64>().unwrap(), s);
    }
}
