use serde::{Deserialize, Serialize};

use super::classifier::{evaluate, train_classifier, ClassifierConfig, ClassifierReport, TrainSource};
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletReport {
    pub real: ClassifierReport,
    pub generated: ClassifierReport,
    pub combined: ClassifierReport,
    /// Observed accuracy ordering, e.g. `"COMBINED >= REAL > GENERATED"`.
    pub ordering: String,
}

fn class_set<T: Scalar>(data: &[(Tensor<T>, usize)]) -> Vec<usize> {
    let mut s: Vec<usize> = data.iter().map(|(_, k)| *k).collect();
    s.sort_unstable();
    s.dedup();
    s
}

/// Trains three classifiers from the same initialisation and shuffling
/// stream on real, generated, and combined data, and scores each on the
/// same held-out real test set.
pub fn run_triplet<T: Scalar>(
    real: &[(Tensor<T>, usize)],
    generated: &[(Tensor<T>, usize)],
    test: &[(Tensor<T>, usize)],
    num_classes: usize,
    cfg: &ClassifierConfig,
    rng: &RngStream,
) -> Result<TripletReport> {
    if class_set(real) != class_set(generated) {
        return Err(Error::Contract(format!(
            "real classes {:?} differ from generated classes {:?}",
            class_set(real),
            class_set(generated)
        )));
    }
    let combined: Vec<(Tensor<T>, usize)> = real.iter().chain(generated).cloned().collect();
    let run = |data: &[(Tensor<T>, usize)], source| -> Result<ClassifierReport> {
        let (net, _) = train_classifier(data, num_classes, cfg, &mut rng.clone())?;
        evaluate(&net, test, source, data.len())
    };
    let real_r = run(real, TrainSource::Real)?;
    let gen_r = run(generated, TrainSource::Generated)?;
    let comb_r = run(&combined, TrainSource::Combined)?;
    let ordering = describe_ordering(&[
        ("REAL", real_r.overall_accuracy),
        ("GENERATED", gen_r.overall_accuracy),
        ("COMBINED", comb_r.overall_accuracy),
    ]);
    Ok(TripletReport {
        real: real_r,
        generated: gen_r,
        combined: comb_r,
        ordering,
    })
}

fn describe_ordering(items: &[(&str, f64)]) -> String {
    let mut v = items.to_vec();
    v.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut s = v[0].0.to_string();
    for w in v.windows(2) {
        s.push_str(if w[0].1 == w[1].1 { " >= " } else { " > " });
        s.push_str(w[1].0);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordering_text() {
        let s = describe_ordering(&[("REAL", 0.9), ("GENERATED", 0.8), ("COMBINED", 0.9)]);
        assert_eq!(s, "REAL >= COMBINED > GENERATED");
    }

    #[test]
    fn class_mismatch_rejected() {
        let a = vec![(Tensor::<f64>::zeros(&[3, 8, 8]), 0), (Tensor::zeros(&[3, 8, 8]), 1)];
        let b = vec![(Tensor::<f64>::zeros(&[3, 8, 8]), 0), (Tensor::zeros(&[3, 8, 8]), 2)];
        let r = run_triplet(&a, &b, &a, 3, &ClassifierConfig::default(), &RngStream::new(0));
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
