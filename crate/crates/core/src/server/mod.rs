//! The PVI coordinator.
//!
//! The server keeps the prior, one factor per client and the posterior
//! `q = prior * prod_m t_m`. Clients are selected by a schedule, return
//! natural-parameter deltas, and the server commits `t_k += rho * delta_k`
//! provided the resulting posterior stays normalizable.

mod run;
mod trace;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PviError, Result};
use crate::expfam::{combine, ApproxFactor, GaussianMeanField, NaturalParams};

pub use run::{run, run_async, single_step_mode, RunResult, StepForm};
pub use trace::{Evaluator, Metrics, MetricsTrace, NoMetrics, TraceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    SequentialFixed,
    SequentialRandom,
    Synchronous,
    Asynchronous,
}

impl ScheduleKind {
    pub fn is_sequential(self) -> bool {
        matches!(self, ScheduleKind::SequentialFixed | ScheduleKind::SequentialRandom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectPolicy {
    /// Halve the damping and retry the commit.
    #[default]
    HalveRho,
    Abort,
}

/// Simulated compute time of one client update:
/// `(base + per_point * N_k) * slowdown_k + jitter * U(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DurationModel {
    pub base: f64,
    pub per_point: f64,
    pub jitter: f64,
    /// Per-client multipliers; missing entries default to 1.
    pub slowdown: Vec<f64>,
}

impl Default for DurationModel {
    fn default() -> Self {
        Self {
            base: 1.0,
            per_point: 0.01,
            jitter: 0.1,
            slowdown: Vec::new(),
        }
    }
}

impl DurationModel {
    pub fn duration(&self, client: usize, n_points: usize, u: f64) -> f64 {
        let slow = self.slowdown.get(client).copied().unwrap_or(1.0);
        (self.base + self.per_point * n_points as f64) * slow + self.jitter * u
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub kind: ScheduleKind,
    /// Damping; defaults to 1 for sequential schedules and `1/M` otherwise.
    pub damping: Option<f64>,
    /// Rounds for sequential and synchronous schedules; the asynchronous
    /// schedule stops after `rounds * M` commits.
    pub rounds: usize,
    /// Stop when a full round moves no natural parameter by more than this.
    pub tolerance: f64,
    pub reject_policy: RejectPolicy,
    pub max_retries: usize,
    pub duration: DurationModel,
    /// Worker threads for synchronous rounds.
    pub threads: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::SequentialFixed,
            damping: None,
            rounds: 20,
            tolerance: 1e-6,
            reject_policy: RejectPolicy::HalveRho,
            max_retries: 5,
            duration: DurationModel::default(),
            threads: 1,
        }
    }
}

impl Schedule {
    pub fn new(kind: ScheduleKind, rounds: usize) -> Self {
        Self {
            kind,
            rounds,
            ..Self::default()
        }
    }

    pub fn with_damping(mut self, rho: f64) -> Self {
        self.damping = Some(rho);
        self
    }

    pub fn damping_for(&self, m: usize) -> f64 {
        self.damping.unwrap_or(if self.kind.is_sequential() {
            1.0
        } else {
            1.0 / m.max(1) as f64
        })
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        let rho = self.damping_for(m);
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(PviError::Config(format!(
                "schedule.damping must lie in (0, 1], got {rho}"
            )));
        }
        if !(self.tolerance >= 0.0) {
            return Err(PviError::Config("schedule.tolerance must be non-negative".into()));
        }
        if self.duration.base < 0.0
            || self.duration.per_point < 0.0
            || self.duration.jitter < 0.0
            || self.duration.slowdown.iter().any(|s| !(*s > 0.0))
        {
            return Err(PviError::Config(
                "schedule.duration entries must be non-negative".into(),
            ));
        }
        if !self.kind.is_sequential() && rho > 1.0 / m as f64 + 1e-12 {
            warn!("damping {rho} exceeds 1/M = {} for a parallel schedule", 1.0 / m as f64);
        }
        Ok(())
    }
}

/// A client's pending completion in the asynchronous simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingUpdate {
    pub time: f64,
    pub client: usize,
    /// Posterior the client is working against.
    pub snapshot: GaussianMeanField,
    /// Commit count when the snapshot was taken.
    pub snapshot_commits: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub prior: GaussianMeanField,
    pub q: GaussianMeanField,
    pub factors: Vec<ApproxFactor>,
    /// Client visits so far (schedule cursor).
    pub iteration: usize,
    /// Commits applied so far.
    pub commits: usize,
    pub comms: usize,
    pub rng_seed: u64,
    pub logical_time: f64,
    /// Commits rejected as unnormalizable.
    pub rejections: usize,
    pub pending: Vec<PendingUpdate>,
}

/// Natural-parameter change proposed by one client.
#[derive(Debug, Clone, PartialEq)]
pub struct Delta {
    pub client: usize,
    pub factor_change: ApproxFactor,
    pub staleness: usize,
}

/// Fresh state: unit factors and `q = prior`.
pub fn init(prior: GaussianMeanField, m: usize) -> Result<ServerState> {
    init_with_seed(prior, m, 0)
}

pub fn init_with_seed(prior: GaussianMeanField, m: usize, seed: u64) -> Result<ServerState> {
    let dims = prior.unnormalizable_dims();
    if !dims.is_empty() {
        return Err(PviError::NotNormalizable { dims });
    }
    if m == 0 {
        return Err(PviError::Config("at least one client is required".into()));
    }
    let d = prior.dim();
    Ok(ServerState {
        q: prior.clone(),
        prior,
        factors: (0..m).map(|k| ApproxFactor::unit(d, k)).collect(),
        iteration: 0,
        commits: 0,
        comms: 0,
        rng_seed: seed,
        logical_time: 0.0,
        rejections: 0,
        pending: Vec::new(),
    })
}

impl ServerState {
    pub fn n_clients(&self) -> usize {
        self.factors.len()
    }

    /// Largest deviation between `q` and `prior * prod factors`.
    pub fn factorization_error(&self) -> f64 {
        combine(&self.prior, &self.factors).max_abs_diff(&self.q)
    }
}

/// Client order for sequential round `round`.
pub fn round_order(kind: ScheduleKind, m: usize, seed: u64, round: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..m).collect();
    if kind == ScheduleKind::SequentialRandom {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::seeds::mix(seed, round as u64));
        order.shuffle(&mut rng);
    }
    order
}

/// The clients to contact next.
pub fn select(state: &ServerState, schedule: &Schedule) -> Vec<usize> {
    let m = state.n_clients();
    match schedule.kind {
        ScheduleKind::SequentialFixed | ScheduleKind::SequentialRandom => {
            let order = round_order(schedule.kind, m, state.rng_seed, state.iteration / m);
            vec![order[state.iteration % m]]
        }
        ScheduleKind::Synchronous => (0..m).collect(),
        ScheduleKind::Asynchronous => state
            .pending
            .iter()
            .min_by(|a, b| a.time.total_cmp(&b.time).then(a.client.cmp(&b.client)))
            .map(|p| vec![p.client])
            .unwrap_or_default(),
    }
}

/// Commit `t_k += rho * delta_k` for every delta and recompute `q`.
///
/// The input state is untouched; on an unnormalizable result the commit is
/// rejected with the offending dimensions.
pub fn apply_deltas(state: &ServerState, deltas: &[Delta], rho: f64) -> Result<ServerState> {
    let mut seen = vec![false; state.n_clients()];
    for d in deltas {
        if d.client >= seen.len() {
            return Err(PviError::Config(format!("unknown client {}", d.client)));
        }
        if std::mem::replace(&mut seen[d.client], true) {
            return Err(PviError::Config(format!(
                "client {} appears twice in one commit",
                d.client
            )));
        }
    }
    let mut next = state.clone();
    for d in deltas {
        let f = &mut next.factors[d.client];
        *f = f.add_scaled(&d.factor_change, rho);
    }
    next.q = combine(&next.prior, &next.factors);
    let dims = next.q.unnormalizable_dims();
    if !dims.is_empty() {
        return Err(PviError::RejectedUnnormalizable { dims });
    }
    next.commits += 1;
    Ok(next)
}

#[cfg(test)]
mod tests;
