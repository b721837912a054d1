use serde::{Deserialize, Serialize};

use crate::error::{PviError, Result};
use crate::expfam::GaussianMeanField;
use crate::localopt::{hyper_gradient, HyperParams, OptimizerConfig};
use crate::models::{Dataset, ModelKind, ModelSpec};
use crate::server::{self, NoMetrics, Schedule, ScheduleKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseFit {
    pub noise_variance: f64,
    pub steps: usize,
    pub converged: bool,
    pub q: GaussianMeanField,
}

/// Fit the observation noise variance of a linear-regression model by
/// alternating a full PVI pass with analytic client updates and a gradient
/// ascent step on `log noise_variance`. Each client contributes its own
/// term of the hyperparameter gradient.
pub fn fit_noise_variance(
    model: &ModelSpec,
    prior: &GaussianMeanField,
    partition: &[Dataset],
    init: f64,
    learning_rate: f64,
    max_steps: usize,
    tolerance: f64,
) -> Result<NoiseFit> {
    if model.kind != ModelKind::LinearRegression {
        return Err(PviError::Unsupported(
            "noise-variance fitting needs the linear model".into(),
        ));
    }
    if !(init > 0.0 && learning_rate > 0.0) {
        return Err(PviError::Config("init and learning rate must be positive".into()));
    }
    let n: usize = partition.iter().map(Dataset::len).sum();
    let prior_variance = 1.0 / (-2.0 * prior.eta2[0]);
    let mut model = model.clone();
    let mut log_s2 = init.ln();
    let schedule = Schedule::new(ScheduleKind::SequentialFixed, 1);
    let analytic = OptimizerConfig::analytic();
    let mut q = prior.clone();
    for step in 0..max_steps {
        model.noise_variance = log_s2.exp();
        let state = server::init(prior.clone(), partition.len())?;
        q = server::run(state, &schedule, &model, partition, &analytic, &mut NoMetrics)?
            .state
            .q;
        let eps = HyperParams {
            prior_variance,
            noise_variance: model.noise_variance,
        };
        let g = hyper_gradient(&q, &model, partition, &eps)?[0];
        let move_by = learning_rate * model.noise_variance * g / n.max(1) as f64;
        log_s2 += move_by;
        if move_by.abs() < tolerance {
            return Ok(NoiseFit {
                noise_variance: log_s2.exp(),
                steps: step + 1,
                converged: true,
                q,
            });
        }
    }
    Ok(NoiseFit {
        noise_variance: log_s2.exp(),
        steps: max_steps,
        converged: false,
        q,
    })
}
