use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{PviError, Result};
use crate::models::Dataset;
use crate::seeds::mix;

/// Synthetic logistic-regression data with its generating weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthLogreg {
    pub data: Dataset,
    /// Ground-truth weights for `[x, 1]`.
    pub w_star: Vec<f64>,
}

/// Inputs `x ~ N(0, I_d)`, weights `w* ~ N(0, I_{d+1})` drawn from
/// `weight_seed`, labels `y ~ Bernoulli(sigma(x~.w* / noise))`. With
/// `noise = 0` the labels are the sign threshold `x~.w* > 0`.
pub fn synth_logreg(d: usize, n: usize, weight_seed: u64, noise: f64, seed: u64) -> Result<SynthLogreg> {
    if d == 0 || n == 0 {
        return Err(PviError::Config("synth_logreg needs d >= 1 and N >= 1".into()));
    }
    if !(noise >= 0.0) {
        return Err(PviError::Config("noise must be non-negative".into()));
    }
    let mut wr = ChaCha8Rng::seed_from_u64(weight_seed);
    let w_star: Vec<f64> = (0..=d).map(|_| StandardNormal.sample(&mut wr)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x5eed));
    let mut inputs = Vec::with_capacity(n * d);
    let mut targets = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let a: f64 = x.iter().zip(&w_star).map(|(x, w)| x * w).sum::<f64>() + w_star[d];
        let u: f64 = rng.random();
        let y = if noise == 0.0 {
            a > 0.0
        } else {
            u < 1.0 / (1.0 + (-a / noise).exp())
        };
        inputs.extend(x);
        targets.push(if y { 1.0 } else { 0.0 });
    }
    Ok(SynthLogreg {
        data: Dataset::from_flat(inputs, d, targets)?,
        w_star,
    })
}

/// Gaussian-blob surrogate for image classification: `n_classes` class
/// means drawn from `N(0, separation^2 I)`, points from `N(mean, I)`,
/// classes as balanced as `n` allows, rows ordered by a seeded shuffle.
pub fn synth_blobs(n_classes: usize, dim: usize, n: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if n_classes == 0 || dim == 0 || n < n_classes {
        return Err(PviError::Config(
            "synth_blobs needs classes >= 1, dim >= 1, N >= classes".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    separation * z
                })
                .collect()
        })
        .collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % n_classes).collect();
    labels.shuffle(&mut rng);
    let mut inputs = Vec::with_capacity(n * dim);
    for &c in &labels {
        for m in &means[c] {
            let z: f64 = StandardNormal.sample(&mut rng);
            inputs.push(m + z);
        }
    }
    Dataset::from_flat(inputs, dim, labels.into_iter().map(|c| c as f64).collect())
}
