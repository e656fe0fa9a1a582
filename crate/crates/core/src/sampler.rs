//! Class-imbalance-aware sampling: every sample is weighted by the inverse
//! frequency of its class, so expected draws per class are equal regardless
//! of how skewed the dataset is.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};

/// Per-sample draw weights, aligned with the label list they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerWeights {
    pub weights: Vec<f64>,
    pub class_counts: BTreeMap<String, usize>,
}

/// weight(sample) = 1 / count(class(sample)).
pub fn compute_sampler_weights<S: AsRef<str>>(labels: &[S]) -> Result<SamplerWeights> {
    if labels.is_empty() {
        return Err(Error::input("cannot weight an empty dataset"));
    }
    let mut class_counts: BTreeMap<String, usize> = BTreeMap::new();
    for l in labels {
        *class_counts.entry(l.as_ref().to_string()).or_insert(0) += 1;
    }
    let weights = labels
        .iter()
        .map(|l| 1.0 / class_counts[l.as_ref()] as f64)
        .collect();
    Ok(SamplerWeights {
        weights,
        class_counts,
    })
}

/// Draws indices proportionally to fixed positive weights
/// (with replacement) via inverse-CDF binary search.
pub struct WeightedSampler {
    cumulative: Vec<f64>,
    total: f64,
}

impl WeightedSampler {
    pub fn new(weights: &[f64]) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::input("sampler needs at least one weight"));
        }
        let mut cumulative = Vec::with_capacity(weights.len());
        let mut total = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::input(format!("weight {i} must be positive, got {w}")));
            }
            total += w;
            cumulative.push(total);
        }
        Ok(WeightedSampler { cumulative, total })
    }

    pub fn len(&self) -> usize {
        self.cumulative.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction rejects empty weight lists
    }

    pub fn draw(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random_range(0.0..self.total);
        // First index whose cumulative weight exceeds u.
        match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&u).expect("finite"))
        {
            Ok(i) => (i + 1).min(self.cumulative.len() - 1),
            Err(i) => i,
        }
    }
}

/// Pearson's chi-squared statistic for observed counts against expected
/// counts. Callers compare against the critical value for their degrees of
/// freedom (6.635 at p = 0.01 with 1 dof).
pub fn chi_squared(observed: &[u64], expected: &[f64]) -> Result<f64> {
    if observed.len() != expected.len() || observed.is_empty() {
        return Err(Error::input("chi-squared needs matching non-empty counts"));
    }
    let mut stat = 0.0;
    for (&o, &e) in observed.iter().zip(expected) {
        if !(e.is_finite() && e > 0.0) {
            return Err(Error::input("expected counts must be positive"));
        }
        let d = o as f64 - e;
        stat += d * d / e;
    }
    Ok(stat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn inverse_frequency_weights() {
        let w = compute_sampler_weights(&["a", "a", "a", "b"]).unwrap();
        assert_eq!(w.weights, vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 1.0]);
        assert_eq!(w.class_counts["a"], 3);
        assert_eq!(w.class_counts["b"], 1);
    }

    #[test]
    fn balanced_classes_weigh_equally() {
        let w = compute_sampler_weights(&["x", "y", "x", "y"]).unwrap();
        assert!(w.weights.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn single_class_is_uniform() {
        let w = compute_sampler_weights(&["only", "only"]).unwrap();
        assert!(w.weights.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn empty_dataset_is_an_input_error() {
        let err = compute_sampler_weights::<&str>(&[]).unwrap_err();
        assert_eq!(err.kind(), "input");
    }

    #[test]
    fn weighted_draws_equalize_class_frequencies() {
        // 3:1 imbalance; inverse-frequency weights must produce ~50/50 class
        // draws. Chi-squared with 1 dof, critical value 6.635 (p = 0.01).
        let labels = ["a", "a", "a", "b"];
        let w = compute_sampler_weights(&labels).unwrap();
        let sampler = WeightedSampler::new(&w.weights).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let mut class_counts = [0u64, 0u64];
        for _ in 0..n {
            let idx = sampler.draw(&mut rng);
            if labels[idx] == "a" {
                class_counts[0] += 1;
            } else {
                class_counts[1] += 1;
            }
        }
        let stat = chi_squared(&class_counts, &[n as f64 / 2.0, n as f64 / 2.0]).unwrap();
        assert!(
            stat < 6.635,
            "chi-squared {stat} rejects 50/50 at p=0.01 (counts {class_counts:?})"
        );
    }

    #[test]
    fn draws_cover_all_indices() {
        let sampler = WeightedSampler::new(&[1.0, 2.0, 3.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut seen = [false; 3];
        for _ in 0..200 {
            seen[sampler.draw(&mut rng)] = true;
        }
        assert_eq!(seen, [true, true, true]);
    }

    #[test]
    fn invalid_weights_are_rejected() {
        assert!(WeightedSampler::new(&[]).is_err());
        assert!(WeightedSampler::new(&[1.0, 0.0]).is_err());
        assert!(WeightedSampler::new(&[1.0, -1.0]).is_err());
        assert!(WeightedSampler::new(&[f64::NAN]).is_err());
    }

    #[test]
    fn chi_squared_hand_example() {
        // Observed (60, 40) vs expected (50, 50): 100/50 + 100/50 = 4.
        let stat = chi_squared(&[60, 40], &[50.0, 50.0]).unwrap();
        assert!((stat - 4.0).abs() < 1e-12);
    }
}
