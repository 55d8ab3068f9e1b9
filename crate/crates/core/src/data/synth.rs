//! Seeded synthetic classification data.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Dataset;
use crate::error::{Error, Result};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const SPARSE_BASE_RATE: f64 = 0.05;

/// Imbalanced binary data shaped like sparse medical records: two dense
/// features in `[0, 1]` followed by `n_features - 2` sparse binary
/// indicators.
///
/// Exactly `round(positive_rate * n_samples)` rows are positive. The dense
/// features are sigmoids of unit Gaussians centred at `±separation / 2`; each
/// sparse feature is either neutral or shifted up or down for positives by
/// `separation / 2` in log-odds around a 5% base rate. `separation = 0`
/// makes the classes identically distributed.
pub fn synth_imbalanced(
    n_samples: usize,
    n_features: usize,
    positive_rate: f64,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(positive_rate > 0.0 && positive_rate < 1.0) {
        return Err(Error::config(format!(
            "positive rate must be in (0, 1), got {positive_rate}"
        )));
    }
    if n_features < 2 {
        return Err(Error::config("need at least the two dense features"));
    }
    if n_samples == 0 {
        return Err(Error::config("need at least one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positives = (positive_rate * n_samples as f64).round() as usize;
    let mut labels: Vec<usize> = (0..n_samples).map(|i| (i < positives) as usize).collect();
    labels.shuffle(&mut rng);

    let base_logit = (SPARSE_BASE_RATE / (1.0 - SPARSE_BASE_RATE)).ln();
    let pattern: Vec<f64> = (2..n_features)
        .map(|_| [-1.0, 0.0, 1.0][rng.random_range(0..3)])
        .collect();

    let mut inputs = Vec::with_capacity(n_samples * n_features);
    for &y in &labels {
        let sign = if y == 1 { 1.0 } else { -1.0 };
        for _ in 0..2 {
            let z: f64 = StandardNormal.sample(&mut rng);
            inputs.push(sigmoid(z + sign * separation / 2.0));
        }
        for &p in &pattern {
            let prob = sigmoid(base_logit + sign * p * separation / 2.0);
            inputs.push(if rng.random::<f64>() < prob { 1.0 } else { 0.0 });
        }
    }
    Dataset::new("synthetic-imbalanced", n_features, 2, inputs, labels)
}

/// Balanced multi-class data: each class has a random ±1 centre in logit
/// space scaled by `separation`, features are sigmoids of centre plus unit
/// Gaussian noise.
pub fn synth_clusters(
    n_samples: usize,
    n_features: usize,
    num_classes: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 || n_features == 0 || n_samples == 0 {
        return Err(Error::config(
            "need two or more classes, one or more features and samples",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            (0..n_features)
                .map(|_| if rng.random::<bool>() { separation } else { -separation })
                .collect()
        })
        .collect();
    let mut labels: Vec<usize> = (0..n_samples).map(|i| i % num_classes).collect();
    labels.shuffle(&mut rng);
    let mut inputs = Vec::with_capacity(n_samples * n_features);
    for &y in &labels {
        for c in &centres[y] {
            let z: f64 = StandardNormal.sample(&mut rng);
            inputs.push(sigmoid(c + z));
        }
    }
    Dataset::new("synthetic-clusters", n_features, num_classes, inputs, labels)
}
