use serde::{Deserialize, Serialize};

use crate::error::{PviError, Result};
use crate::expfam::{GaussianMeanField, NaturalParams};
use crate::models::{Dataset, ModelKind, ModelSpec};

/// Model hyperparameters optimized alongside `q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Variance of the isotropic zero-mean Gaussian prior.
    pub prior_variance: f64,
    /// Observation noise variance (linear regression).
    pub noise_variance: f64,
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.prior_variance > 0.0 && self.noise_variance > 0.0 {
            Ok(())
        } else {
            Err(PviError::Config("hyperparameters must be strictly positive".into()))
        }
    }
}

fn sorted_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.into_iter().sum()
}

/// Gradient of the global free energy with respect to
/// `[noise_variance, prior_variance]` at fixed `q`.
///
/// Each client contributes `E_q[d log p(y_m|theta) / d eps]` computed from
/// its own data; the server adds the prior term. Per-datapoint terms are
/// accumulated in sorted order so the result does not depend on how the
/// data are partitioned.
pub fn hyper_gradient(
    q: &GaussianMeanField,
    model: &ModelSpec,
    partition: &[Dataset],
    eps: &HyperParams,
) -> Result<Vec<f64>> {
    eps.validate()?;
    let (m, v) = q.mean_var()?;
    if q.dim() != model.param_dim() {
        return Err(PviError::DimensionMismatch {
            expected: model.param_dim(),
            found: q.dim(),
        });
    }
    let s2 = eps.noise_variance;
    let mut noise_terms = Vec::new();
    if model.kind == ModelKind::LinearRegression {
        for data in partition {
            for i in 0..data.len() {
                let x = model.augment(data.row(i));
                let mean: f64 = x.iter().zip(&m).map(|(a, b)| a * b).sum();
                let var: f64 = x.iter().zip(&v).map(|(a, b)| a * a * b).sum();
                let r = data.targets[i] - mean;
                noise_terms.push(-0.5 / s2 + (r * r + var) / (2.0 * s2 * s2));
            }
        }
    }
    let p2 = eps.prior_variance;
    let prior_terms: Vec<f64> = m
        .iter()
        .zip(&v)
        .map(|(m, v)| -0.5 / p2 + (m * m + v) / (2.0 * p2 * p2))
        .collect();
    Ok(vec![sorted_sum(noise_terms), sorted_sum(prior_terms)])
}
