use log::debug;

use super::{epoch_batches, normalizable_cavity, EarlyStop, Init, LocalMethod, LocalProblem, OptimizerConfig};
use crate::error::{PviError, Result};
use crate::expfam::{divide, ApproxFactor, GaussianMeanField, NaturalParams};
use crate::models::{Dataset, ExpectedLogLik, ModelSpec};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const STALL_EVALUATIONS: usize = 5;
const TIGHT_VARIANCE: f64 = 1e-2;

/// Per-iteration record of a local optimization.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LocalTrace {
    pub steps: usize,
    pub free_energy: Vec<f64>,
    pub expected_loglik: Vec<f64>,
    pub converged: bool,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub q_new: GaussianMeanField,
    pub t_new: ApproxFactor,
    pub delta: ApproxFactor,
    pub trace: LocalTrace,
}

/// Maximize the local free energy and derive the new client factor.
///
/// `t_new = t_prev * q_new / q_prev` and `delta = t_new / t_prev`.
pub fn optimize_local(problem: &LocalProblem, config: &OptimizerConfig) -> Result<LocalOutcome> {
    config.validate()?;
    let cav = normalizable_cavity(problem)?;
    let mut trace = LocalTrace::default();
    let q_new = if problem.data.is_empty() {
        cav.clone()
    } else {
        match config.method {
            LocalMethod::Analytic => {
                let lik = problem.model.likelihood_factor(problem.data)?;
                cav.add_scaled(&lik, 1.0)
            }
            LocalMethod::Gradient => adam(problem, config, &cav, &mut trace)?,
            LocalMethod::FixedPoint => fixed_point(problem, config, &cav, &mut trace)?,
        }
    };
    if !q_new.is_normalizable() || q_new.eta1.iter().chain(&q_new.eta2).any(|e| !e.is_finite()) {
        return Err(PviError::NonFiniteObjective(
            "local optimum is not a proper Gaussian".into(),
        ));
    }
    let t_new = problem.t_prev.add_scaled(&divide(&q_new, problem.q_prev), 1.0);
    let delta = divide(&t_new, problem.t_prev);
    Ok(LocalOutcome {
        q_new,
        t_new,
        delta,
        trace,
    })
}

fn initial_moments(problem: &LocalProblem, config: &OptimizerConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let (m, v) = problem.q_prev.mean_var()?;
    Ok(match config.init {
        Init::Previous => (m, v),
        Init::Tight => {
            let d = m.len();
            (m, vec![TIGHT_VARIANCE; d])
        }
    })
}

/// Draws the data used at one step: the full set, or a mini-batch and the
/// factor that rescales it to the full set.
struct BatchStream<'a> {
    data: &'a Dataset,
    size: Option<usize>,
    seed: u64,
    epoch: u64,
    queue: Vec<Vec<usize>>,
}

impl<'a> BatchStream<'a> {
    fn new(data: &'a Dataset, size: Option<usize>, seed: u64) -> Self {
        let size = size.filter(|&b| b < data.len());
        Self {
            data,
            size,
            seed,
            epoch: 0,
            queue: Vec::new(),
        }
    }

    fn next(&mut self) -> (Option<Dataset>, f64) {
        let Some(b) = self.size else {
            return (None, 1.0);
        };
        if self.queue.is_empty() {
            self.queue = epoch_batches(self.data.len(), b, self.seed, self.epoch);
            self.queue.reverse();
            self.epoch += 1;
        }
        let idx = self.queue.pop().unwrap_or_default();
        let scale = self.data.len() as f64 / idx.len().max(1) as f64;
        (Some(self.data.subset(&idx)), scale)
    }
}

#[allow(clippy::too_many_arguments)]
fn scaled_expectation(
    model: &ModelSpec,
    full: &Dataset,
    batch: Option<&Dataset>,
    scale: f64,
    m: &[f64],
    v: &[f64],
    config: &OptimizerConfig,
    step: usize,
) -> Result<ExpectedLogLik> {
    let mut e = model.expected_log_lik_moments(batch.unwrap_or(full), m, v, config.estimator_at(step as u64))?;
    if scale != 1.0 {
        e.value *= scale;
        e.grad_m.iter_mut().for_each(|g| *g *= scale);
        e.grad_v.iter_mut().for_each(|g| *g *= scale);
    }
    Ok(e)
}

fn kl_moments(m: &[f64], v: &[f64], mc: &[f64], vc: &[f64]) -> f64 {
    (0..m.len())
        .map(|i| {
            let r = v[i] / vc[i];
            let dm = m[i] - mc[i];
            0.5 * (r + dm * dm / vc[i] - 1.0 - r.ln())
        })
        .sum()
}

struct Progress {
    stalls: usize,
}

impl Progress {
    /// Record one evaluation; returns `(converged, stop_early)`.
    fn observe(
        &mut self,
        trace: &mut LocalTrace,
        config: &OptimizerConfig,
        free_energy: f64,
        expected: f64,
    ) -> (bool, bool) {
        if let Some(&prev) = trace.free_energy.last() {
            let rel = (free_energy - prev).abs() / prev.abs().max(free_energy.abs()).max(1e-12);
            if rel < config.tolerance {
                self.stalls += 1;
            } else {
                self.stalls = 0;
            }
        }
        trace.free_energy.push(free_energy);
        trace.expected_loglik.push(expected);
        trace.steps += 1;
        let early = config.early_stop == EarlyStop::ExpectedLoglik
            && super::early_stop_check(
                &trace.expected_loglik,
                config.early_stop_window,
                config.early_stop_tolerance,
            );
        (self.stalls >= STALL_EVALUATIONS, early)
    }
}

fn adam(
    problem: &LocalProblem,
    config: &OptimizerConfig,
    cav: &GaussianMeanField,
    trace: &mut LocalTrace,
) -> Result<GaussianMeanField> {
    let (mc, vc) = cav.mean_var()?;
    let a_corr = cav.log_partition()? - problem.q_prev.log_partition()?;
    let lr = config.learning_rate_for(problem.model);
    let (mut m, v0) = initial_moments(problem, config)?;
    let mut s: Vec<f64> = v0.iter().map(|v| v.ln()).collect();
    let d = m.len();
    let (mut m1, mut m2) = (vec![0.0; 2 * d], vec![0.0; 2 * d]);
    let mut batches = BatchStream::new(problem.data, config.minibatch, config.seed);
    let mut progress = Progress { stalls: 0 };
    for step in 0..config.max_steps {
        let v: Vec<f64> = s.iter().map(|s| s.exp()).collect();
        let (batch, scale) = batches.next();
        let e = scaled_expectation(problem.model, problem.data, batch.as_ref(), scale, &m, &v, config, step)?;
        let f = e.value - kl_moments(&m, &v, &mc, &vc) + a_corr;
        if !f.is_finite() {
            return Err(PviError::NonFiniteObjective(format!(
                "local free energy at step {step}"
            )));
        }
        let (converged, early) = progress.observe(trace, config, f, e.value);
        if converged || early {
            trace.converged = converged;
            trace.stopped_early = early && !converged;
            break;
        }
        let t = (step + 1) as i32;
        for i in 0..2 * d {
            let g = if i < d {
                e.grad_m[i] - (m[i] - mc[i]) / vc[i]
            } else {
                let j = i - d;
                v[j] * (e.grad_v[j] - 0.5 * (1.0 / vc[j] - 1.0 / v[j]))
            };
            m1[i] = ADAM_BETA1 * m1[i] + (1.0 - ADAM_BETA1) * g;
            m2[i] = ADAM_BETA2 * m2[i] + (1.0 - ADAM_BETA2) * g * g;
            let mhat = m1[i] / (1.0 - ADAM_BETA1.powi(t));
            let vhat = m2[i] / (1.0 - ADAM_BETA2.powi(t));
            let upd = lr * mhat / (vhat.sqrt() + ADAM_EPS);
            if i < d {
                m[i] += upd;
            } else {
                s[i - d] += upd;
            }
        }
    }
    debug!("adam finished after {} evaluations", trace.steps);
    let v: Vec<f64> = s.iter().map(|s| s.exp()).collect();
    GaussianMeanField::from_mean_var(&m, &v).map_err(|_| PviError::NonFiniteObjective("variance collapsed".into()))
}

fn fixed_point(
    problem: &LocalProblem,
    config: &OptimizerConfig,
    cav: &GaussianMeanField,
    trace: &mut LocalTrace,
) -> Result<GaussianMeanField> {
    let a_corr = cav.log_partition()? - problem.q_prev.log_partition()?;
    let mut q = match config.init {
        Init::Previous => problem.q_prev.clone(),
        Init::Tight => {
            let (m0, v0) = initial_moments(problem, config)?;
            GaussianMeanField::from_mean_var(&m0, &v0)?
        }
    };
    let mut rho = config.step_size;
    let mut batches = BatchStream::new(problem.data, config.minibatch, config.seed);
    let mut progress = Progress { stalls: 0 };
    let mut step = 0;
    while step < config.max_steps {
        let (m, v) = q.mean_var()?;
        let (batch, scale) = batches.next();
        let e = scaled_expectation(problem.model, problem.data, batch.as_ref(), scale, &m, &v, config, step)?;
        let f = e.value - q.kl(cav)? + a_corr;
        if !f.is_finite() {
            return Err(PviError::NonFiniteObjective(format!(
                "local free energy at step {step}"
            )));
        }
        let (_, early) = progress.observe(trace, config, f, e.value);
        let g = e.mean_param_grad(&m);
        let old = divide(&q, cav);
        let mix = |o: &[f64], g: &[f64], c: &[f64], rho: f64| -> Vec<f64> {
            (0..o.len()).map(|i| c[i] + (1.0 - rho) * o[i] + rho * g[i]).collect()
        };
        let next = loop {
            let cand = GaussianMeanField {
                eta1: mix(&old.eta1, &g.eta1, &cav.eta1, rho),
                eta2: mix(&old.eta2, &g.eta2, &cav.eta2, rho),
            };
            if cand.is_normalizable() {
                break cand;
            }
            rho *= 0.5;
            if rho < 1e-12 {
                return Err(PviError::NonFiniteObjective(
                    "fixed-point iteration cannot keep the posterior normalizable".into(),
                ));
            }
        };
        let change = next.max_abs_diff(&q);
        q = next;
        step += 1;
        if change < config.tolerance {
            trace.converged = true;
            break;
        }
        if early {
            trace.stopped_early = true;
            break;
        }
    }
    Ok(q)
}
