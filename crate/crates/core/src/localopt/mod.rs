//! Client-side computations.
//!
//! A client holding data `y_k` and factor `t_k` receives the posterior
//! `q_prev`, forms the cavity `q_prev / t_k`, and maximizes the local free
//! energy
//!
//! `F_k(q) = E_q[log p(y_k|theta)] - KL(q || cavity) + A(cavity) - A(q_prev)`
//!
//! which equals `log Z_k - KL(q || tilted)` for the tilted distribution
//! `cavity * p(y_k|theta) / Z_k`.

mod hyper;
mod optimize;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PviError, Result};
use crate::expfam::{divide, ApproxFactor, GaussianMeanField, NaturalParams};
use crate::models::{Dataset, Estimator, ModelKind, ModelSpec};

pub use hyper::{hyper_gradient, HyperParams};
pub use optimize::{optimize_local, LocalOutcome, LocalTrace};

/// One client's view of a PVI iteration.
#[derive(Debug, Clone, Copy)]
pub struct LocalProblem<'a> {
    pub q_prev: &'a GaussianMeanField,
    pub t_prev: &'a ApproxFactor,
    pub data: &'a Dataset,
    pub model: &'a ModelSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalMethod {
    /// Closed-form conjugate update (linear regression only).
    Analytic,
    /// Adaptive-moment ascent on `(m, log v)`.
    #[default]
    Gradient,
    /// Damped fixed-point iteration in natural parameters.
    FixedPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    #[default]
    Quadrature,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStop {
    #[default]
    Off,
    ExpectedLoglik,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Start from the received posterior.
    #[default]
    Previous,
    /// Mean from the received posterior, variance 1e-2.
    Tight,
}

/// Settings for the local optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub method: LocalMethod,
    /// Adam learning rate; defaults to 1e-2 (logistic) or 1e-3 (network).
    pub learning_rate: Option<f64>,
    /// Damping of each fixed-point iteration, in (0, 1].
    pub step_size: f64,
    pub max_steps: usize,
    pub tolerance: f64,
    pub estimator: EstimatorKind,
    pub mc_samples: usize,
    pub early_stop: EarlyStop,
    pub early_stop_window: usize,
    pub early_stop_tolerance: f64,
    /// Mini-batch size; `None` uses the full local dataset.
    pub minibatch: Option<usize>,
    pub init: Init,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            method: LocalMethod::Gradient,
            learning_rate: None,
            step_size: 1.0,
            max_steps: 2000,
            tolerance: 1e-6,
            estimator: EstimatorKind::Quadrature,
            mc_samples: 10,
            early_stop: EarlyStop::Off,
            early_stop_window: 5,
            early_stop_tolerance: 1e-3,
            minibatch: None,
            init: Init::Previous,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn analytic() -> Self {
        Self {
            method: LocalMethod::Analytic,
            ..Self::default()
        }
    }

    pub fn fixed_point(step_size: f64) -> Self {
        Self {
            method: LocalMethod::FixedPoint,
            step_size,
            tolerance: 1e-10,
            max_steps: 5000,
            ..Self::default()
        }
    }

    pub fn gradient(learning_rate: f64) -> Self {
        Self {
            method: LocalMethod::Gradient,
            learning_rate: Some(learning_rate),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size <= 1.0) {
            return Err(PviError::Config(format!(
                "optimizer.step_size must lie in (0, 1], got {}",
                self.step_size
            )));
        }
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0) {
                return Err(PviError::Config("optimizer.learning_rate must be positive".into()));
            }
        }
        if !(self.tolerance > 0.0) {
            return Err(PviError::Config("optimizer.tolerance must be positive".into()));
        }
        if self.minibatch == Some(0) {
            return Err(PviError::Config("optimizer.minibatch must be positive".into()));
        }
        if self.estimator == EstimatorKind::MonteCarlo && self.mc_samples == 0 {
            return Err(PviError::Config("optimizer.mc_samples must be positive".into()));
        }
        Ok(())
    }

    pub fn learning_rate_for(&self, model: &ModelSpec) -> f64 {
        self.learning_rate.unwrap_or(match model.kind {
            ModelKind::BnnClassifier => 1e-3,
            _ => 1e-2,
        })
    }

    /// Estimator for optimization step `step`; Monte Carlo draws are fresh
    /// per step and reproducible.
    pub fn estimator_at(&self, step: u64) -> Estimator {
        match self.estimator {
            EstimatorKind::Quadrature => Estimator::Quadrature,
            EstimatorKind::MonteCarlo => Estimator::MonteCarlo {
                samples: self.mc_samples,
                seed: crate::seeds::mix(self.seed, step),
            },
        }
    }
}

/// `q_prev / t_prev`. May be unnormalizable; check before use.
pub fn cavity(problem: &LocalProblem) -> GaussianMeanField {
    divide(problem.q_prev, problem.t_prev).as_gaussian()
}

fn normalizable_cavity(problem: &LocalProblem) -> Result<GaussianMeanField> {
    let c = cavity(problem);
    let dims = c.unnormalizable_dims();
    if dims.is_empty() {
        Ok(c)
    } else {
        Err(PviError::CavityNotNormalizable { dims })
    }
}

/// `F_k(q)` for the problem's cavity.
pub fn local_free_energy(problem: &LocalProblem, q: &GaussianMeanField, estimator: Estimator) -> Result<f64> {
    let c = normalizable_cavity(problem)?;
    let e = problem.model.expected_log_lik(problem.data, q, estimator)?;
    Ok(e.value - q.kl(&c)? + c.log_partition()? - problem.q_prev.log_partition()?)
}

/// Global free energy `E_q[log p(y|theta)] - KL(q || prior)`.
pub fn global_free_energy(
    model: &ModelSpec,
    prior: &GaussianMeanField,
    data: &Dataset,
    q: &GaussianMeanField,
    estimator: Estimator,
) -> Result<f64> {
    Ok(model.expected_log_lik(data, q, estimator)?.value - q.kl(prior)?)
}

/// `E_q[log p(y_k|theta)]`.
pub fn expected_loglik(problem: &LocalProblem, q: &GaussianMeanField, estimator: Estimator) -> Result<f64> {
    Ok(problem.model.expected_log_lik(problem.data, q, estimator)?.value)
}

/// True when the expected log-likelihood moved by less than `tol` over the
/// last `window` entries (or over the whole history if shorter).
pub fn early_stop_check(history: &[f64], window: usize, tol: f64) -> bool {
    let n = history.len();
    if n < 2 || window == 0 {
        return false;
    }
    let k = window.min(n - 1);
    (history[n - 1] - history[n - 1 - k]).abs() < tol
}

/// `dE/dmu` of the expected log-likelihood of `data` at `q`.
pub fn mean_param_gradient(
    model: &ModelSpec,
    data: &Dataset,
    q: &GaussianMeanField,
    estimator: Estimator,
) -> Result<ApproxFactor> {
    let (m, v) = q.mean_var()?;
    let e = model.expected_log_lik_moments(data, &m, &v, estimator)?;
    Ok(e.mean_param_grad(&m))
}

/// Damped fixed-point update of the client factor:
/// `(1 - rho) * eta_old + rho * dE/dmu` at `q_cur`, where
/// `eta_old = q_cur / cavity`.
pub fn fixed_point_step(problem: &LocalProblem, q_cur: &GaussianMeanField, rho: f64) -> Result<ApproxFactor> {
    fixed_point_step_with(problem, q_cur, rho, Estimator::Quadrature)
}

pub fn fixed_point_step_with(
    problem: &LocalProblem,
    q_cur: &GaussianMeanField,
    rho: f64,
    estimator: Estimator,
) -> Result<ApproxFactor> {
    let old = divide(q_cur, &cavity(problem));
    let g = mean_param_gradient(problem.model, problem.data, q_cur, estimator)?;
    Ok(ApproxFactor {
        eta1: old
            .eta1
            .iter()
            .zip(&g.eta1)
            .map(|(o, g)| (1.0 - rho) * o + rho * g)
            .collect(),
        eta2: old
            .eta2
            .iter()
            .zip(&g.eta2)
            .map(|(o, g)| (1.0 - rho) * o + rho * g)
            .collect(),
        owner: problem.t_prev.owner,
    })
}

/// Apply the Fisher matrix of `q` (the covariance of `(theta, theta^2)`)
/// to a vector given in mean-parameter coordinates.
pub fn fisher_product(q: &GaussianMeanField, g1: &[f64], g2: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (m, v) = q.mean_var()?;
    let mut a = Vec::with_capacity(m.len());
    let mut b = Vec::with_capacity(m.len());
    for i in 0..m.len() {
        let c11 = v[i];
        let c12 = 2.0 * m[i] * v[i];
        let c22 = 2.0 * v[i] * v[i] + 4.0 * m[i] * m[i] * v[i];
        a.push(c11 * g1[i] + c12 * g2[i]);
        b.push(c12 * g1[i] + c22 * g2[i]);
    }
    Ok((a, b))
}

/// `dF_k/deta` at `q`: `C (dE/dmu + eta_cavity - eta_q)`.
pub fn natural_gradient(problem: &LocalProblem, q: &GaussianMeanField, estimator: Estimator) -> Result<ApproxFactor> {
    let c = cavity(problem);
    let g = mean_param_gradient(problem.model, problem.data, q, estimator)?;
    let r1: Vec<f64> = (0..q.dim()).map(|i| g.eta1[i] + c.eta1[i] - q.eta1[i]).collect();
    let r2: Vec<f64> = (0..q.dim()).map(|i| g.eta2[i] + c.eta2[i] - q.eta2[i]).collect();
    let (a, b) = fisher_product(q, &r1, &r2)?;
    Ok(ApproxFactor {
        eta1: a,
        eta2: b,
        owner: problem.t_prev.owner,
    })
}

/// One plain gradient-ascent step on `F_k` in natural parameters.
pub fn gradient_step(
    problem: &LocalProblem,
    q_cur: &GaussianMeanField,
    rho: f64,
    estimator: Estimator,
) -> Result<GaussianMeanField> {
    let g = natural_gradient(problem, q_cur, estimator)?;
    Ok(q_cur.add_scaled(&g, rho))
}

/// Stochastic natural-gradient step on the global free energy using one of
/// `l` equally sized batches:
/// `eta_q <- (1 - rho) eta_q + rho (eta_0 + l * dE_batch/dmu)`.
pub fn stochastic_global_step(
    model: &ModelSpec,
    q: &GaussianMeanField,
    prior: &GaussianMeanField,
    batch: &Dataset,
    l: f64,
    rho: f64,
    estimator: Estimator,
) -> Result<GaussianMeanField> {
    let g = mean_param_gradient(model, batch, q, estimator)?;
    let f = |q: &[f64], p: &[f64], g: &[f64]| -> Vec<f64> {
        (0..q.len())
            .map(|i| (1.0 - rho) * q[i] + rho * (p[i] + l * g[i]))
            .collect()
    };
    Ok(GaussianMeanField {
        eta1: f(&q.eta1, &prior.eta1, &g.eta1),
        eta2: f(&q.eta2, &prior.eta2, &g.eta2),
    })
}

/// The same update written as deletion then inclusion of an averaged
/// factor: `eta_q + rho' (g - (eta_q - eta_0) / l)` with `rho' = l * rho`.
pub fn stochastic_global_step_deletion_form(
    model: &ModelSpec,
    q: &GaussianMeanField,
    prior: &GaussianMeanField,
    batch: &Dataset,
    l: f64,
    rho: f64,
    estimator: Estimator,
) -> Result<GaussianMeanField> {
    let g = mean_param_gradient(model, batch, q, estimator)?;
    let rp = l * rho;
    let f = |q: &[f64], p: &[f64], g: &[f64]| -> Vec<f64> {
        (0..q.len()).map(|i| q[i] + rp * (g[i] - (q[i] - p[i]) / l)).collect()
    };
    Ok(GaussianMeanField {
        eta1: f(&q.eta1, &prior.eta1, &g.eta1),
        eta2: f(&q.eta2, &prior.eta2, &g.eta2),
    })
}

/// Stochastic update of one data group's factor:
/// `eta_l <- (1 - rho) eta_l + rho dE_l/dmu`, with `q` moved by the factor
/// change, `eta_q + rho (dE_l/dmu - eta_l)`.
pub fn stochastic_local_step(
    model: &ModelSpec,
    q: &GaussianMeanField,
    factor: &ApproxFactor,
    group: &Dataset,
    rho: f64,
    estimator: Estimator,
) -> Result<(GaussianMeanField, ApproxFactor)> {
    let g = mean_param_gradient(model, group, q, estimator)?;
    let step = |a: &[f64], g: &[f64]| -> Vec<f64> { (0..a.len()).map(|i| rho * (g[i] - a[i])).collect() };
    let d1 = step(&factor.eta1, &g.eta1);
    let d2 = step(&factor.eta2, &g.eta2);
    let add = |a: &[f64], d: &[f64]| -> Vec<f64> { a.iter().zip(d).map(|(a, d)| a + d).collect() };
    let new_factor = ApproxFactor {
        eta1: factor
            .eta1
            .iter()
            .zip(&g.eta1)
            .map(|(a, g)| (1.0 - rho) * a + rho * g)
            .collect(),
        eta2: factor
            .eta2
            .iter()
            .zip(&g.eta2)
            .map(|(a, g)| (1.0 - rho) * a + rho * g)
            .collect(),
        owner: factor.owner,
    };
    let q_new = GaussianMeanField {
        eta1: add(&q.eta1, &d1),
        eta2: add(&q.eta2, &d2),
    };
    Ok((q_new, new_factor))
}

/// Index batches for one epoch: a seeded permutation cut into chunks.
pub fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seeds::mix(seed, epoch));
    idx.shuffle(&mut rng);
    idx.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

#[cfg(test)]
mod tests;
