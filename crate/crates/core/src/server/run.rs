use std::thread;

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    apply_deltas, select, Delta, Evaluator, MetricsTrace, PendingUpdate, RejectPolicy, Schedule, ScheduleKind,
    ServerState, TraceRecord,
};
use crate::error::{PviError, Result};
use crate::expfam::{divide, GaussianMeanField, NaturalParams};
use crate::localopt::{fixed_point_step_with, natural_gradient, optimize_local, LocalProblem, OptimizerConfig};
use crate::models::{Dataset, Estimator, ModelSpec};
use crate::seeds::mix;

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub state: ServerState,
    pub trace: MetricsTrace,
    /// Whether the round-level convergence test fired.
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepForm {
    Gradient,
    FixedPoint,
}

fn check_partition(state: &ServerState, model: &ModelSpec, partition: &[Dataset]) -> Result<()> {
    if partition.len() != state.n_clients() {
        return Err(PviError::DimensionMismatch {
            expected: state.n_clients(),
            found: partition.len(),
        });
    }
    if state.q.dim() != model.param_dim() {
        return Err(PviError::DimensionMismatch {
            expected: model.param_dim(),
            found: state.q.dim(),
        });
    }
    Ok(())
}

/// Local optimization of client `k` against `q`; `None` when the cavity is
/// unnormalizable and the update is skipped.
fn client_update(
    q: &GaussianMeanField,
    state: &ServerState,
    k: usize,
    model: &ModelSpec,
    data: &Dataset,
    config: &OptimizerConfig,
    visit: usize,
) -> Result<Option<Delta>> {
    let problem = LocalProblem {
        q_prev: q,
        t_prev: &state.factors[k],
        data,
        model,
    };
    let mut cfg = config.clone();
    cfg.seed = mix(config.seed, visit as u64);
    match optimize_local(&problem, &cfg) {
        Ok(out) => Ok(Some(Delta {
            client: k,
            factor_change: out.delta.with_owner(k),
            staleness: 0,
        })),
        Err(PviError::CavityNotNormalizable { dims }) => {
            warn!("client {k} skipped: cavity unnormalizable in dims {dims:?}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Commit with the schedule's rejection policy. Returns the new state and
/// the damping actually used.
pub(super) fn commit(state: &mut ServerState, deltas: &[Delta], rho: f64, schedule: &Schedule) -> Result<f64> {
    let mut rho = rho;
    let mut retries = 0;
    loop {
        match apply_deltas(state, deltas, rho) {
            Ok(next) => {
                *state = next;
                return Ok(rho);
            }
            Err(PviError::RejectedUnnormalizable { dims }) => {
                state.rejections += 1;
                if schedule.reject_policy == RejectPolicy::Abort || retries >= schedule.max_retries {
                    return Err(PviError::RejectedUnnormalizable { dims });
                }
                retries += 1;
                rho *= 0.5;
                debug!("commit rejected in dims {dims:?}; retrying with rho = {rho}");
            }
            Err(e) => return Err(e),
        }
    }
}

fn record<E: Evaluator>(
    trace: &mut MetricsTrace,
    state: &ServerState,
    eval: &mut E,
    client: Option<usize>,
    end_of_round: bool,
    rho: Option<f64>,
    staleness: Option<usize>,
) -> Result<()> {
    let metrics = eval.evaluate(&state.q, end_of_round)?;
    let mut r = TraceRecord::new(trace.len(), state.logical_time, client, state.comms).with_metrics(metrics);
    r.rho_effective = rho;
    r.staleness = staleness;
    trace.records.push(r);
    Ok(())
}

/// Run a sequential or synchronous schedule.
///
/// The trace starts with an evaluation of the initial posterior and gains
/// one record per commit.
pub fn run<E: Evaluator>(
    state: ServerState,
    schedule: &Schedule,
    model: &ModelSpec,
    partition: &[Dataset],
    config: &OptimizerConfig,
    eval: &mut E,
) -> Result<RunResult> {
    if schedule.kind == ScheduleKind::Asynchronous {
        return run_async(state, schedule, model, partition, config, eval);
    }
    check_partition(&state, model, partition)?;
    let m = state.n_clients();
    schedule.validate(m)?;
    config.validate()?;
    let rho = schedule.damping_for(m);
    let mut state = state;
    let mut trace = MetricsTrace::default();
    record(&mut trace, &state, eval, None, true, None, None)?;
    let mut converged = false;
    for round in 0..schedule.rounds {
        let start = state.q.clone();
        match schedule.kind {
            ScheduleKind::Synchronous => {
                let deltas = synchronous_deltas(&state, model, partition, config, schedule.threads)?;
                state.iteration += m;
                state.comms += m;
                state.logical_time += 1.0;
                let used = commit(&mut state, &deltas, rho, schedule)?;
                record(&mut trace, &state, eval, None, true, Some(used), Some(0))?;
            }
            _ => {
                for _ in 0..m {
                    let k = select(&state, schedule)[0];
                    let visit = state.iteration;
                    let delta = client_update(&state.q.clone(), &state, k, model, &partition[k], config, visit)?;
                    state.iteration += 1;
                    state.comms += 1;
                    state.logical_time += 1.0;
                    if let Some(d) = delta {
                        let used = commit(&mut state, &[d], rho, schedule)?;
                        let end = state.iteration.is_multiple_of(m);
                        record(&mut trace, &state, eval, Some(k), end, Some(used), Some(0))?;
                    }
                }
            }
        }
        let change = state.q.max_abs_diff(&start);
        debug!("round {round}: max natural-parameter change {change:e}");
        if change < schedule.tolerance {
            converged = true;
            break;
        }
    }
    Ok(RunResult {
        state,
        trace,
        converged,
    })
}

fn synchronous_deltas(
    state: &ServerState,
    model: &ModelSpec,
    partition: &[Dataset],
    config: &OptimizerConfig,
    threads: usize,
) -> Result<Vec<Delta>> {
    let m = state.n_clients();
    let base = state.iteration;
    let one = |k: usize| client_update(&state.q, state, k, model, &partition[k], config, base + k);
    let results: Vec<Result<Option<Delta>>> = if threads <= 1 || m == 1 {
        (0..m).map(one).collect()
    } else {
        let chunk = m.div_ceil(threads.min(m));
        thread::scope(|s| {
            let handles: Vec<_> = (0..m)
                .collect::<Vec<_>>()
                .chunks(chunk)
                .map(|ks| {
                    let ks = ks.to_vec();
                    let one = &one;
                    s.spawn(move || ks.into_iter().map(one).collect::<Vec<_>>())
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("client worker panicked"))
                .collect()
        })
    };
    let mut deltas = Vec::with_capacity(m);
    for r in results {
        if let Some(d) = r? {
            deltas.push(d);
        }
    }
    Ok(deltas)
}

fn jitter_draw(seed: u64, client: usize, start: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(seed, client as u64), start as u64));
    rng.random::<f64>()
}

/// Discrete-event simulation of asynchronous PVI.
///
/// Every client starts from the prior at time zero. When a client finishes
/// it commits its damped delta, receives the current posterior and starts
/// again. Stops once every client's last commit moved `q` by less than the
/// tolerance, or after `rounds * M` commits.
pub fn run_async<E: Evaluator>(
    state: ServerState,
    schedule: &Schedule,
    model: &ModelSpec,
    partition: &[Dataset],
    config: &OptimizerConfig,
    eval: &mut E,
) -> Result<RunResult> {
    check_partition(&state, model, partition)?;
    let m = state.n_clients();
    schedule.validate(m)?;
    config.validate()?;
    let rho = schedule.damping_for(m);
    let mut schedule = schedule.clone();
    schedule.kind = ScheduleKind::Asynchronous;
    let mut state = state;
    let mut starts = vec![0usize; m];
    let seed = state.rng_seed;
    let dur = |k: usize, start: usize| {
        schedule
            .duration
            .duration(k, partition[k].len(), jitter_draw(seed, k, start))
    };
    state.pending = (0..m)
        .map(|k| {
            let t = state.logical_time + dur(k, 0);
            starts[k] = 1;
            PendingUpdate {
                time: t,
                client: k,
                snapshot: state.q.clone(),
                snapshot_commits: state.commits,
            }
        })
        .collect();
    let mut trace = MetricsTrace::default();
    record(&mut trace, &state, eval, None, true, None, None)?;
    let mut last_change = vec![f64::INFINITY; m];
    let limit = schedule.rounds * m;
    let mut converged = false;
    let mut done = 0;
    while done < limit {
        let Some(&k) = select(&state, &schedule).first() else {
            break;
        };
        let pos = state
            .pending
            .iter()
            .position(|p| p.client == k)
            .expect("selected client is pending");
        let event = state.pending.swap_remove(pos);
        state.logical_time = event.time;
        let visit = state.iteration;
        let delta = client_update(&event.snapshot, &state, k, model, &partition[k], config, visit)?;
        state.iteration += 1;
        done += 1;
        if let Some(mut d) = delta {
            d.staleness = state.commits - event.snapshot_commits;
            let before = state.q.clone();
            let used = commit(&mut state, &[d.clone()], rho, &schedule)?;
            state.comms += 1;
            last_change[k] = state.q.max_abs_diff(&before);
            let end = state.commits.is_multiple_of(m);
            record(&mut trace, &state, eval, Some(k), end, Some(used), Some(d.staleness))?;
        } else {
            last_change[k] = 0.0;
        }
        if last_change.iter().all(|c| *c < schedule.tolerance) {
            converged = true;
            break;
        }
        let t = state.logical_time + dur(k, starts[k]);
        starts[k] += 1;
        state.pending.push(PendingUpdate {
            time: t,
            client: k,
            snapshot: state.q.clone(),
            snapshot_commits: state.commits,
        });
    }
    Ok(RunResult {
        state,
        trace,
        converged,
    })
}

/// One synchronous round in which every client takes a single local step
/// from `q`.
///
/// The fixed-point form sets each factor to `(1 - rho) t_k + rho dE_k/dmu`;
/// the gradient form moves `q` by `rho` times the sum of local natural
/// gradients. Both reproduce the corresponding global single step.
pub fn single_step_mode(
    state: &ServerState,
    model: &ModelSpec,
    partition: &[Dataset],
    form: StepForm,
    rho: f64,
    estimator: Estimator,
) -> Result<ServerState> {
    check_partition(state, model, partition)?;
    let mut deltas = Vec::with_capacity(state.n_clients());
    for (k, data) in partition.iter().enumerate() {
        let problem = LocalProblem {
            q_prev: &state.q,
            t_prev: &state.factors[k],
            data,
            model,
        };
        let change = match form {
            StepForm::FixedPoint => {
                let t_new = fixed_point_step_with(&problem, &state.q, rho, estimator)?;
                divide(&t_new, &state.factors[k])
            }
            StepForm::Gradient => natural_gradient(&problem, &state.q, estimator)?.scaled(rho),
        };
        deltas.push(Delta {
            client: k,
            factor_change: change.with_owner(k),
            staleness: 0,
        });
    }
    let mut next = apply_deltas(state, &deltas, 1.0)?;
    next.iteration += state.n_clients();
    next.comms += state.n_clients();
    Ok(next)
}
