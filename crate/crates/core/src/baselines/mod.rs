//! Reference methods: global VI, Bayesian committee machines, variational
//! continual learning, streaming VB and a single power-EP step.

use serde::{Deserialize, Serialize};

use crate::error::{PviError, Result};
use crate::expfam::{divide, ApproxFactor, GaussianMeanField, NaturalParams};
use crate::localopt::{fisher_product, mean_param_gradient, optimize_local, LocalProblem, OptimizerConfig};
use crate::models::{Dataset, Estimator, ModelKind, ModelSpec};
use crate::seeds::mix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    GlobalVi,
    BcmSame,
    BcmSplit,
    Vcl,
    StreamingVb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BcmVariant {
    Same,
    Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSpec {
    pub kind: BaselineKind,
    /// Client visiting order for `vcl` and `streaming_vb`; defaults to
    /// `0..M`.
    #[serde(default)]
    pub order: Option<Vec<usize>>,
    /// Passes over the clients for `streaming_vb`.
    #[serde(default = "one")]
    pub rounds: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

fn one() -> usize {
    1
}

impl BaselineSpec {
    pub fn new(kind: BaselineKind) -> Self {
        Self {
            kind,
            order: None,
            rounds: 1,
            optimizer: OptimizerConfig::default(),
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if let Some(order) = &self.order {
            check_order(order, m)?;
        }
        if self.kind == BaselineKind::StreamingVb && self.rounds == 0 {
            return Err(PviError::Config("streaming_vb needs rounds >= 1".into()));
        }
        self.optimizer.validate()
    }

    fn order_for(&self, m: usize) -> Vec<usize> {
        self.order.clone().unwrap_or_else(|| (0..m).collect())
    }
}

fn check_order(order: &[usize], m: usize) -> Result<()> {
    let mut seen = vec![false; m];
    for &k in order {
        if k >= m || std::mem::replace(&mut seen[k], true) {
            return Err(PviError::Config(format!(
                "order must be a permutation of 0..{m}, got {order:?}"
            )));
        }
    }
    if order.len() != m {
        return Err(PviError::Config(format!(
            "order must be a permutation of 0..{m}, got {order:?}"
        )));
    }
    Ok(())
}

/// Maximize `E_q[log p(y|theta)] - KL(q || base)` over `q`.
fn vi_against(
    base: &GaussianMeanField,
    model: &ModelSpec,
    data: &Dataset,
    optimizer: &OptimizerConfig,
    visit: usize,
) -> Result<GaussianMeanField> {
    let unit = ApproxFactor::unit(base.dim(), 0);
    let problem = LocalProblem {
        q_prev: base,
        t_prev: &unit,
        data,
        model,
    };
    let mut cfg = optimizer.clone();
    cfg.seed = mix(optimizer.seed, visit as u64);
    Ok(optimize_local(&problem, &cfg)?.q_new)
}

/// Global VI on the pooled data.
pub fn global_vi(
    prior: &GaussianMeanField,
    model: &ModelSpec,
    data: &Dataset,
    optimizer: &OptimizerConfig,
) -> Result<GaussianMeanField> {
    vi_against(prior, model, data, optimizer, 0)
}

/// One natural-gradient step on the global free energy:
/// `eta_q + rho C (dE/dmu + eta_0 - eta_q)`.
pub fn global_gradient_step(
    model: &ModelSpec,
    prior: &GaussianMeanField,
    data: &Dataset,
    q: &GaussianMeanField,
    rho: f64,
    estimator: Estimator,
) -> Result<GaussianMeanField> {
    let g = mean_param_gradient(model, data, q, estimator)?;
    let d = q.dim();
    let r1: Vec<f64> = (0..d).map(|i| g.eta1[i] + prior.eta1[i] - q.eta1[i]).collect();
    let r2: Vec<f64> = (0..d).map(|i| g.eta2[i] + prior.eta2[i] - q.eta2[i]).collect();
    let (a, b) = fisher_product(q, &r1, &r2)?;
    Ok(GaussianMeanField {
        eta1: (0..d).map(|i| q.eta1[i] + rho * a[i]).collect(),
        eta2: (0..d).map(|i| q.eta2[i] + rho * b[i]).collect(),
    })
}

/// One damped fixed-point step of global VI:
/// `(1 - rho) eta_q + rho (eta_0 + dE/dmu)`.
pub fn global_fixed_point_step(
    model: &ModelSpec,
    prior: &GaussianMeanField,
    data: &Dataset,
    q: &GaussianMeanField,
    rho: f64,
    estimator: Estimator,
) -> Result<GaussianMeanField> {
    let g = mean_param_gradient(model, data, q, estimator)?;
    let d = q.dim();
    Ok(GaussianMeanField {
        eta1: (0..d)
            .map(|i| (1.0 - rho) * q.eta1[i] + rho * (prior.eta1[i] + g.eta1[i]))
            .collect(),
        eta2: (0..d)
            .map(|i| (1.0 - rho) * q.eta2[i] + rho * (prior.eta2[i] + g.eta2[i]))
            .collect(),
    })
}

fn aggregate_checked(q: GaussianMeanField) -> Result<GaussianMeanField> {
    let dims = q.unnormalizable_dims();
    if dims.is_empty() {
        Ok(q)
    } else {
        Err(PviError::AggregateNotNormalizable { dims })
    }
}

/// Bayesian committee machine over independently fitted client posteriors.
///
/// `Same` fits each client against the full prior and divides out `M - 1`
/// copies of it; `Split` gives client `m` the fractional prior
/// `p^(N_m / N)` and multiplies the results.
pub fn bcm(
    prior: &GaussianMeanField,
    model: &ModelSpec,
    partition: &[Dataset],
    variant: BcmVariant,
    optimizer: &OptimizerConfig,
) -> Result<GaussianMeanField> {
    if partition.is_empty() {
        return Err(PviError::Config("bcm needs at least one client".into()));
    }
    let n: usize = partition.iter().map(Dataset::len).sum();
    let m = partition.len();
    let mut eta1 = vec![0.0; prior.dim()];
    let mut eta2 = vec![0.0; prior.dim()];
    for (k, data) in partition.iter().enumerate() {
        let base = match variant {
            BcmVariant::Same => prior.clone(),
            BcmVariant::Split => {
                let share = if n == 0 {
                    1.0 / m as f64
                } else {
                    data.len() as f64 / n as f64
                };
                prior.powered(share)
            }
        };
        let qk = vi_against(&base, model, data, optimizer, k)?;
        for i in 0..prior.dim() {
            eta1[i] += qk.eta1[i];
            eta2[i] += qk.eta2[i];
        }
    }
    if variant == BcmVariant::Same {
        let c = (m - 1) as f64;
        for i in 0..prior.dim() {
            eta1[i] -= c * prior.eta1[i];
            eta2[i] -= c * prior.eta2[i];
        }
    }
    aggregate_checked(GaussianMeanField { eta1, eta2 })
}

/// Posterior after each visit of a variational continual learning pass.
pub fn vcl_trace(
    prior: &GaussianMeanField,
    model: &ModelSpec,
    partition: &[Dataset],
    order: &[usize],
    optimizer: &OptimizerConfig,
) -> Result<Vec<GaussianMeanField>> {
    check_order(order, partition.len())?;
    streaming_trace(prior, model, partition, order, 1, optimizer)
}

/// One pass in which each client's prior is the previous posterior.
pub fn vcl(
    prior: &GaussianMeanField,
    model: &ModelSpec,
    partition: &[Dataset],
    order: &[usize],
    optimizer: &OptimizerConfig,
) -> Result<GaussianMeanField> {
    Ok(last(vcl_trace(prior, model, partition, order, optimizer)?, prior))
}

fn last(trace: Vec<GaussianMeanField>, prior: &GaussianMeanField) -> GaussianMeanField {
    trace.into_iter().last().unwrap_or_else(|| prior.clone())
}

fn streaming_trace(
    prior: &GaussianMeanField,
    model: &ModelSpec,
    partition: &[Dataset],
    order: &[usize],
    rounds: usize,
    optimizer: &OptimizerConfig,
) -> Result<Vec<GaussianMeanField>> {
    let mut q = prior.clone();
    let mut trace = Vec::with_capacity(rounds * order.len());
    let mut visit = 0;
    for _ in 0..rounds {
        for &k in order {
            q = vi_against(&q, model, &partition[k], optimizer, visit)?;
            visit += 1;
            trace.push(q.clone());
        }
    }
    Ok(trace)
}

/// Sequential absorption with no deletion step; revisiting a client counts
/// its data again.
pub fn streaming_vb_trace(
    prior: &GaussianMeanField,
    model: &ModelSpec,
    partition: &[Dataset],
    order: &[usize],
    rounds: usize,
    optimizer: &OptimizerConfig,
) -> Result<Vec<GaussianMeanField>> {
    check_order(order, partition.len())?;
    if rounds == 0 {
        return Err(PviError::Config("streaming_vb needs rounds >= 1".into()));
    }
    streaming_trace(prior, model, partition, order, rounds, optimizer)
}

pub fn streaming_vb(
    prior: &GaussianMeanField,
    model: &ModelSpec,
    partition: &[Dataset],
    order: &[usize],
    rounds: usize,
    optimizer: &OptimizerConfig,
) -> Result<GaussianMeanField> {
    Ok(last(
        streaming_vb_trace(prior, model, partition, order, rounds, optimizer)?,
        prior,
    ))
}

/// Run a baseline by spec. Global VI pools the partition.
pub fn run_baseline(
    spec: &BaselineSpec,
    prior: &GaussianMeanField,
    model: &ModelSpec,
    partition: &[Dataset],
) -> Result<GaussianMeanField> {
    let m = partition.len();
    spec.validate(m)?;
    let opt = &spec.optimizer;
    match spec.kind {
        BaselineKind::GlobalVi => global_vi(prior, model, &Dataset::concat(partition)?, opt),
        BaselineKind::BcmSame => bcm(prior, model, partition, BcmVariant::Same, opt),
        BaselineKind::BcmSplit => bcm(prior, model, partition, BcmVariant::Split, opt),
        BaselineKind::Vcl => vcl(prior, model, partition, &spec.order_for(m), opt),
        BaselineKind::StreamingVb => streaming_vb(prior, model, partition, &spec.order_for(m), spec.rounds, opt),
    }
}

/// One power-EP step with damping equal to `alpha` on a conjugate model.
///
/// The tilted distribution `q_prev (p(y|theta) / t_prev)^alpha` is Gaussian
/// and its moments are exact, so `q_new` is the tilted distribution and
/// `t_new = t_prev q_new / q_prev`.
pub fn pep_step(
    model: &ModelSpec,
    q_prev: &GaussianMeanField,
    t_prev: &ApproxFactor,
    data: &Dataset,
    alpha: f64,
) -> Result<(GaussianMeanField, ApproxFactor)> {
    if model.kind != ModelKind::LinearRegression {
        return Err(PviError::Unsupported(
            "pep_step requires the conjugate linear model".into(),
        ));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(PviError::Config(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    let lik = model.likelihood_factor(data)?;
    let ratio = divide(&lik, t_prev);
    let q_new = q_prev.add_scaled(&ratio, alpha);
    let dims = q_new.unnormalizable_dims();
    if !dims.is_empty() {
        return Err(PviError::NotNormalizable { dims });
    }
    let t_new = t_prev.add_scaled(&divide(&q_new, q_prev), 1.0);
    Ok((q_new, t_new))
}
