//! The acceptance suite behind `pvi verify`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::baselines::{
    bcm, global_fixed_point_step, global_gradient_step, global_vi, pep_step, streaming_vb, vcl, BcmVariant,
};
use crate::data::SplitSpec;
use crate::error::Result;
use crate::expfam::{combine, divide, ApproxFactor, GaussianMeanField, NaturalParams};
use crate::localopt::{
    fixed_point_step, global_free_energy, hyper_gradient, local_free_energy, HyperParams, LocalProblem, OptimizerConfig,
};
use crate::models::{Dataset, Estimator, ModelKind, ModelSpec, ProbitScale};
use crate::oracle::{fd_gradient, grid_pep_tilted, grid_posterior, kl_to_grid};
use crate::seeds::mix;
use crate::server::{self, single_step_mode, Metrics, MetricsTrace, NoMetrics, Schedule, ScheduleKind, StepForm};

use super::config::{Cadence, DataConfig, EvalConfig, MethodConfig, MethodKind, ModelConfig, RunConfig};
use super::experiment::run_experiment;
use super::hyperopt::fit_noise_variance;
use super::metrics::{log_loss, predictive};
use super::plots::{summary_csv, tidy_csv, LabeledTrace, PlotAxes};

pub const CRITERIA: [u32; 14] = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14];

/// Size imbalance of the inhomogeneous split used by criteria 9 and 10.
pub const DESK_BETA: f64 = 0.7;
/// Label imbalance of the small clients in that split.
pub const DESK_KAPPA: f64 = 0.9;

/// Outcome of one acceptance criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionReport {
    pub id: u32,
    pub title: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
    pub budget_seconds: f64,
}

impl fmt::Display for CriterionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "criterion {:>2} {} [{:.2}s / {:.0}s] {}: {}",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.seconds,
            self.budget_seconds,
            self.title,
            self.detail
        )
    }
}

/// Trace files produced while verifying, keyed by file name.
pub type Artifacts = BTreeMap<String, String>;

fn report(id: u32, title: &str, budget: f64, start: Instant, outcome: Result<(bool, String)>) -> CriterionReport {
    let seconds = start.elapsed().as_secs_f64();
    let (ok, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    let in_time = seconds <= budget;
    let detail = if ok && !in_time {
        format!("{detail}; over time budget")
    } else {
        detail
    };
    CriterionReport {
        id,
        title: title.to_string(),
        passed: ok && in_time,
        detail,
        seconds,
        budget_seconds: budget,
    }
}

/// Run one criterion, collecting any trace files it emits.
pub fn run_criterion(id: u32, artifacts: &mut Artifacts) -> CriterionReport {
    let start = Instant::now();
    match id {
        1 => report(1, "conjugate exactness", 3.0, start, conjugate_exactness(artifacts)),
        2 => report(
            2,
            "local free energy identity",
            10.0,
            start,
            local_free_energy_identity(),
        ),
        3 => report(3, "free energy decomposition", 10.0, start, free_energy_decomposition()),
        4 => report(
            4,
            "cross-method agreement",
            60.0,
            start,
            cross_method_agreement(artifacts),
        ),
        5 => report(5, "single-step equivalences", 30.0, start, single_step_equivalence()),
        6 => report(6, "power EP limit", 5.0, start, pep_limit()),
        7 => report(7, "baseline identities", 20.0, start, baseline_identities()),
        8 => report(8, "streaming VB over-counting", 5.0, start, streaming_overcount()),
        9 => report(9, "desk-scale method ordering", 300.0, start, desk_ordering(artifacts)),
        10 => report(
            10,
            "synchronous normalizability guard",
            300.0,
            start,
            normalizability_guard(),
        ),
        11 => report(11, "gradient hygiene", 30.0, start, gradient_hygiene()),
        12 => report(12, "noise variance optimization", 10.0, start, hyper_optimization()),
        13 => report(13, "asynchronous simulation", 10.0, start, async_sanity(artifacts)),
        14 => report(14, "determinism", 120.0, start, determinism()),
        _ => report(
            id,
            "unknown criterion",
            0.0,
            start,
            Ok((false, "no such criterion".into())),
        ),
    }
}

/// Run the listed criteria in order; trace files go to `out_dir` if given.
pub fn verify(ids: &[u32], out_dir: Option<&Path>) -> Result<Vec<CriterionReport>> {
    let mut artifacts = Artifacts::new();
    let reports = ids.iter().map(|&id| run_criterion(id, &mut artifacts)).collect();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        for (name, text) in &artifacts {
            fs::write(dir.join(name), text)?;
        }
    }
    Ok(reports)
}

fn verdict(ok: bool, detail: String) -> Result<(bool, String)> {
    Ok((ok, detail))
}

fn conj_partition() -> (ModelSpec, Vec<Dataset>) {
    (
        ModelSpec::linear_regression(1, 1.0),
        vec![
            Dataset::new(vec![vec![1.0]], vec![1.0]).expect("valid"),
            Dataset::new(vec![vec![1.0]], vec![-1.0]).expect("valid"),
        ],
    )
}

fn free_energy_eval<'a>(
    model: &'a ModelSpec,
    prior: &'a GaussianMeanField,
    data: &'a Dataset,
) -> impl FnMut(&GaussianMeanField, bool) -> Result<Option<Metrics>> + 'a {
    move |q, _| {
        Ok(Some(Metrics {
            free_energy: Some(global_free_energy(model, prior, data, q, Estimator::Quadrature)?),
            ..Metrics::default()
        }))
    }
}

fn conjugate_exactness(artifacts: &mut Artifacts) -> Result<(bool, String)> {
    let (model, parts) = conj_partition();
    let prior = GaussianMeanField::standard_normal(1);
    let pooled = Dataset::concat(&parts)?;
    let exact = GaussianMeanField::from_mean_var(&[0.0], &[1.0 / 3.0])?;
    let runs = [
        ("sequential", Schedule::new(ScheduleKind::SequentialFixed, 5)),
        (
            "synchronous",
            Schedule::new(ScheduleKind::Synchronous, 200).with_damping(0.5),
        ),
        ("asynchronous", {
            let mut s = Schedule::new(ScheduleKind::Asynchronous, 200);
            s.tolerance = 1e-12;
            s
        }),
    ];
    let mut ok = true;
    let mut parts_out = Vec::new();
    for (name, mut sched) in runs {
        if sched.kind != ScheduleKind::Asynchronous {
            sched.tolerance = 1e-12;
        }
        let t = Instant::now();
        let state = server::init(prior.clone(), 2)?;
        let mut eval = free_energy_eval(&model, &prior, &pooled);
        let out = server::run(state, &sched, &model, &parts, &OptimizerConfig::analytic(), &mut eval)?;
        let secs = t.elapsed().as_secs_f64();
        let kl = out.state.q.kl(&exact)?;
        ok &= kl <= 1e-6 && secs < 1.0;
        parts_out.push(format!("{name} KL {kl:.1e} in {secs:.3}s"));
        artifacts.insert(format!("criterion_01_{name}.jsonl"), out.trace.to_jsonl());
    }
    verdict(ok, parts_out.join(", "))
}

fn random_logistic_1d(rng: &mut ChaCha8Rng, n: usize) -> Dataset {
    let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-2.0..2.0)]).collect();
    let ys = rows
        .iter()
        .map(|r| {
            if rng.random::<f64>() < 1.0 / (1.0 + (-1.3 * r[0]).exp()) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Dataset::new(rows, ys).expect("valid")
}

fn random_gaussian_1d(rng: &mut ChaCha8Rng) -> GaussianMeanField {
    let m = rng.random_range(-1.0..1.0);
    let v = rng.random_range(0.05..1.0);
    GaussianMeanField::from_mean_var(&[m], &[v]).expect("positive variance")
}

fn random_factor_1d(rng: &mut ChaCha8Rng, owner: usize) -> ApproxFactor {
    ApproxFactor::new(
        vec![rng.random_range(-0.5..0.5)],
        vec![rng.random_range(-0.2..0.0)],
        owner,
    )
    .expect("valid factor")
}

fn local_free_energy_identity() -> Result<(bool, String)> {
    let model = ModelSpec::logistic_regression(1, false);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let n = rng.random_range(1..8);
        let data = random_logistic_1d(&mut rng, n);
        let q_prev = random_gaussian_1d(&mut rng);
        let t_prev = random_factor_1d(&mut rng, 0);
        let q = random_gaussian_1d(&mut rng);
        let problem = LocalProblem {
            q_prev: &q_prev,
            t_prev: &t_prev,
            data: &data,
            model: &model,
        };
        let f = local_free_energy(&problem, &q, Estimator::Quadrature)?;
        let cav = divide(&q_prev, &t_prev).as_gaussian();
        let (cm, cv) = cav.mean_var()?;
        let (qm, qv) = q.mean_var()?;
        let (cs, qs) = (cv[0].sqrt(), qv[0].sqrt());
        let bounds = vec![(
            (cm[0] - 10.0 * cs).min(qm[0] - 10.0 * qs),
            (cm[0] + 10.0 * cs).max(qm[0] + 10.0 * qs),
        )];
        let tilted = grid_posterior(&model, &cav, &data, Some(bounds), Some(20001))?;
        let log_z = tilted.log_z + cav.log_partition()? - q_prev.log_partition()?;
        worst = worst.max((f - (log_z - kl_to_grid(&q, &tilted)?)).abs());
    }
    verdict(
        worst <= 1e-4,
        format!("max |F_k - (log Z_k - KL)| = {worst:.2e} over 10 configs"),
    )
}

fn free_energy_decomposition() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for c in 0..20 {
        let model = if c % 2 == 0 {
            ModelSpec::linear_regression(1, rng.random_range(0.3..2.0))
        } else {
            ModelSpec::logistic_regression(1, false)
        };
        let m = rng.random_range(1..5);
        let parts: Vec<Dataset> = (0..m)
            .map(|_| {
                let n = rng.random_range(1..6);
                let mut d = random_logistic_1d(&mut rng, n);
                if model.kind == ModelKind::LinearRegression {
                    d.targets = d.targets.iter().map(|_| rng.random_range(-2.0..2.0)).collect();
                }
                d
            })
            .collect();
        let prior = GaussianMeanField::isotropic(1, rng.random_range(0.5..2.0));
        let factors: Vec<ApproxFactor> = (0..m).map(|k| random_factor_1d(&mut rng, k)).collect();
        let q = combine(&prior, &factors);
        let mut sum = q.log_partition()? - prior.log_partition()?;
        for (k, data) in parts.iter().enumerate() {
            let problem = LocalProblem {
                q_prev: &q,
                t_prev: &factors[k],
                data,
                model: &model,
            };
            sum += local_free_energy(&problem, &q, Estimator::Quadrature)?;
        }
        let global = global_free_energy(&model, &prior, &Dataset::concat(&parts)?, &q, Estimator::Quadrature)?;
        worst = worst.max((sum - global).abs());
    }
    verdict(
        worst <= 1e-6,
        format!("max |sum F_m + log Z_q - F| = {worst:.2e} over 20 configs"),
    )
}

fn logistic_2d(seed: u64, n: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![StandardNormal.sample(&mut rng)]).collect();
    let ys = rows
        .iter()
        .map(|r| {
            let p = 1.0 / (1.0 + (-(1.5 * r[0] - 0.5)).exp());
            if rng.random::<f64>() < p {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Dataset::new(rows, ys).expect("valid")
}

fn probit_nll(model: &ModelSpec, q: &GaussianMeanField, test: &Dataset) -> Result<f64> {
    let preds = predictive(model, q, test, ProbitScale::Pi, 1, 0)?;
    Ok(log_loss(&preds, &test.targets)?.0)
}

fn cross_method_agreement(artifacts: &mut Artifacts) -> Result<(bool, String)> {
    let model = ModelSpec::logistic_regression(1, true);
    let train = logistic_2d(40, 40);
    let test = logistic_2d(41, 400);
    let parts: Vec<Dataset> = (0..4)
        .map(|k| train.subset(&(k * 10..k * 10 + 10).collect::<Vec<_>>()))
        .collect();
    let prior = GaussianMeanField::standard_normal(2);
    let opt = OptimizerConfig {
        tolerance: 1e-12,
        ..OptimizerConfig::fixed_point(0.5)
    };
    let g = global_vi(&prior, &model, &train, &opt)?;
    let mut results = vec![("global_vi", g)];
    for (name, sched) in [
        ("sequential", Schedule::new(ScheduleKind::SequentialFixed, 300)),
        ("synchronous", Schedule::new(ScheduleKind::Synchronous, 2000)),
    ] {
        let sched = Schedule {
            tolerance: 1e-11,
            ..sched
        };
        let mut eval = free_energy_eval(&model, &prior, &train);
        let out = server::run(server::init(prior.clone(), 4)?, &sched, &model, &parts, &opt, &mut eval)?;
        artifacts.insert(format!("criterion_04_{name}.jsonl"), out.trace.to_jsonl());
        results.push((name, out.state.q));
    }
    let mut ok = true;
    let mut detail = Vec::new();
    for i in 0..3 {
        for j in i + 1..3 {
            let dn = results[i].1.max_abs_diff(&results[j].1);
            let dl = (probit_nll(&model, &results[i].1, &test)? - probit_nll(&model, &results[j].1, &test)?).abs();
            ok &= dn <= 1e-3 && dl <= 1e-4;
            detail.push(format!("{}/{}: eta {dn:.1e}, nll {dl:.1e}", results[i].0, results[j].0));
        }
    }
    verdict(ok, detail.join("; "))
}

fn logistic_clients(seed: u64, sizes: &[usize]) -> (ModelSpec, Vec<Dataset>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
    let parts = sizes
        .iter()
        .map(|&n| {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
                .collect();
            let ys = rows
                .iter()
                .map(|r| {
                    let p = 1.0 / (1.0 + (-(w[0] * r[0] + w[1] * r[1])).exp());
                    if rng.random::<f64>() < p {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            Dataset::new(rows, ys).expect("valid")
        })
        .collect();
    (ModelSpec::logistic_regression(2, true), parts)
}

fn single_step_equivalence() -> Result<(bool, String)> {
    let (model, parts) = logistic_clients(5, &[30, 18]);
    let full = Dataset::concat(&parts)?;
    let prior = GaussianMeanField::standard_normal(3);
    let mut worst = [0.0f64; 2];
    for (f, form) in [StepForm::Gradient, StepForm::FixedPoint].into_iter().enumerate() {
        for estimator_kind in 0..2 {
            let rho = if form == StepForm::Gradient { 0.05 } else { 0.3 };
            let mut s = server::init(prior.clone(), 2)?;
            let mut g = prior.clone();
            for step in 0..20u64 {
                let est = if estimator_kind == 0 {
                    Estimator::Quadrature
                } else {
                    Estimator::MonteCarlo {
                        samples: 16,
                        seed: mix(7, step),
                    }
                };
                s = single_step_mode(&s, &model, &parts, form, rho, est)?;
                g = match form {
                    StepForm::Gradient => global_gradient_step(&model, &prior, &full, &g, rho, est)?,
                    StepForm::FixedPoint => global_fixed_point_step(&model, &prior, &full, &g, rho, est)?,
                };
                worst[f] = worst[f].max(s.q.max_abs_diff(&g));
            }
        }
    }
    verdict(
        worst.iter().all(|w| *w <= 1e-12),
        format!(
            "max per-step deviation: gradient {:.1e}, fixed point {:.1e} (quadrature and shared-seed Monte Carlo)",
            worst[0], worst[1]
        ),
    )
}

fn sci(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.1e}")).collect::<Vec<_>>().join(", ")
}

fn fixed(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(", ")
}

fn ratios(errs: &[f64]) -> Vec<f64> {
    errs.windows(2).map(|w| w[0] / w[1]).collect()
}

fn pep_limit() -> Result<(bool, String)> {
    let model = ModelSpec::linear_regression(1, 1.0);
    let data = Dataset::new(vec![vec![1.0]], vec![1.0])?;
    let t_prev = ApproxFactor::new(vec![0.4], vec![-0.2], 0)?;
    let q_prev = GaussianMeanField::standard_normal(1).add_scaled(&t_prev, 1.0);
    let problem = LocalProblem {
        q_prev: &q_prev,
        t_prev: &t_prev,
        data: &data,
        model: &model,
    };
    let mut errs = Vec::new();
    for alpha in [1e-2, 1e-3, 1e-4] {
        let (_, t_pep) = pep_step(&model, &q_prev, &t_prev, &data, alpha)?;
        let t_fp = fixed_point_step(&problem, &q_prev, alpha)?;
        errs.push(t_pep.max_abs_diff(&t_fp));
    }
    let r = ratios(&errs);
    let ok = r.iter().all(|r| (8.0..=12.0).contains(r));

    let lmodel = ModelSpec::logistic_regression(1, false);
    let ldata = Dataset::new(vec![vec![1.5], vec![-0.5], vec![0.8]], vec![1.0, 1.0, 0.0])?;
    let lt = ApproxFactor::new(vec![0.3], vec![-0.1], 0)?;
    let lq = GaussianMeanField::standard_normal(1).add_scaled(&lt, 1.0);
    let lp = LocalProblem {
        q_prev: &lq,
        t_prev: &lt,
        data: &ldata,
        model: &lmodel,
    };
    let dir = divide(&fixed_point_step(&lp, &lq, 1.0)?, &lt);
    let mut lerrs = Vec::new();
    for alpha in [1e-1, 1e-2] {
        let q_new = grid_pep_tilted(&lmodel, &lq, &lt, &ldata, alpha, 20001)?;
        lerrs.push(divide(&q_new, &lq).scaled(1.0 / alpha).max_abs_diff(&dir));
    }
    verdict(
        ok,
        format!(
            "conjugate errors [{}], ratios [{}]; logistic grid errors [{}], ratio {:.2}",
            sci(&errs),
            fixed(&r),
            sci(&lerrs),
            lerrs[0] / lerrs[1]
        ),
    )
}

fn baseline_identities() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = [0.0f64; 3];
    for c in 0..5u64 {
        let m = 2 + (c as usize % 3);
        let sizes: Vec<usize> = (0..m).map(|_| rng.random_range(5..25)).collect();
        let (model, parts) = logistic_clients(100 + c, &sizes);
        let prior = GaussianMeanField::isotropic(3, rng.random_range(0.5..2.0));
        let opt = OptimizerConfig::fixed_point(0.5);
        let order: Vec<usize> = (0..m).collect();

        let b = bcm(&prior, &model, &parts, BcmVariant::Same, &opt)?;
        let sync = Schedule::new(ScheduleKind::Synchronous, 1).with_damping(1.0);
        let s = server::run(
            server::init(prior.clone(), m)?,
            &sync,
            &model,
            &parts,
            &opt,
            &mut NoMetrics,
        )?;
        worst[0] = worst[0].max(b.max_abs_diff(&s.state.q));

        let v = vcl(&prior, &model, &parts, &order, &opt)?;
        let seq = Schedule::new(ScheduleKind::SequentialFixed, 1);
        let s = server::run(
            server::init(prior.clone(), m)?,
            &seq,
            &model,
            &parts,
            &opt,
            &mut NoMetrics,
        )?;
        worst[1] = worst[1].max(v.max_abs_diff(&s.state.q));

        let st = streaming_vb(&prior, &model, &parts, &order, 1, &opt)?;
        worst[2] = worst[2].max(st.max_abs_diff(&v));
    }
    verdict(
        worst.iter().all(|w| *w <= 1e-9),
        format!(
            "bcm vs synchronous {:.1e}, vcl vs sequential {:.1e}, streaming vs vcl {:.1e}",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn streaming_overcount() -> Result<(bool, String)> {
    let model = ModelSpec::linear_regression(1, 1.0);
    let parts = vec![Dataset::new(vec![vec![1.0]], vec![1.0])?];
    let prior = GaussianMeanField::standard_normal(1);
    let opt = OptimizerConfig::analytic();
    let st = streaming_vb(&prior, &model, &parts, &[0], 2, &opt)?;
    let sched = Schedule::new(ScheduleKind::SequentialFixed, 2);
    let pvi = server::run(server::init(prior, 1)?, &sched, &model, &parts, &opt, &mut NoMetrics)?
        .state
        .q;
    let (ps, pp) = (-2.0 * st.eta2[0], -2.0 * pvi.eta2[0]);
    verdict(
        ps == 3.0 && pp == 2.0,
        format!("streaming precision {ps}, PVI precision {pp}"),
    )
}

/// Run configuration of the desk-scale logistic experiment.
pub fn desk_config(seed: u64, method: MethodKind, damping: f64) -> RunConfig {
    RunConfig {
        seed,
        output: None,
        data: DataConfig::SynthLogreg {
            dim: 20,
            n: 5000,
            noise: 1.0,
            weight_seed: 0,
        },
        model: ModelConfig {
            kind: ModelKind::LogisticRegression,
            ..ModelConfig::default()
        },
        split: SplitSpec::beta_kappa(10, DESK_BETA, DESK_KAPPA, 0),
        method: MethodConfig {
            kind: method,
            ..MethodConfig::default()
        },
        optimizer: OptimizerConfig {
            tolerance: 1e-8,
            max_steps: 500,
            ..OptimizerConfig::fixed_point(0.5)
        },
        schedule: Schedule {
            tolerance: 1e-5,
            ..Schedule::new(ScheduleKind::Synchronous, 150).with_damping(damping)
        },
        eval: EvalConfig {
            test_fraction: 0.2,
            cadence: Cadence::EveryRound,
            free_energy: false,
            train_nll: false,
            ..EvalConfig::default()
        },
    }
}

fn final_nll(trace: &MetricsTrace) -> f64 {
    trace.records.iter().rev().find_map(|r| r.test_nll).unwrap_or(f64::NAN)
}

fn desk_ordering(artifacts: &mut Artifacts) -> Result<(bool, String)> {
    let methods = [
        MethodKind::Pvi,
        MethodKind::GlobalVi,
        MethodKind::BcmSame,
        MethodKind::BcmSplit,
        MethodKind::Vcl,
    ];
    let mut totals = [0.0f64; 5];
    let mut labeled = Vec::new();
    for seed in 0..5u64 {
        for (i, &method) in methods.iter().enumerate() {
            let out = run_experiment(&desk_config(seed, method, 0.2))?;
            totals[i] += final_nll(&out.trace) / 5.0;
            artifacts.insert(
                format!("criterion_09_{}_seed{seed}.jsonl", method.name()),
                out.trace.to_jsonl(),
            );
            labeled.push(LabeledTrace {
                method: method.name().to_string(),
                seed,
                trace: out.trace,
            });
        }
    }
    let axes = PlotAxes {
        log_scale: true,
        ..PlotAxes::default()
    };
    artifacts.insert("criterion_09_tidy.csv".into(), tidy_csv(&labeled, &axes)?);
    artifacts.insert("criterion_09_summary.csv".into(), summary_csv(&labeled, &axes)?);
    let gap = |i: usize| totals[i] - totals[1];
    let ok = gap(0) <= 0.01 && (2..5).all(|i| gap(i) > 0.02);
    verdict(
        ok,
        format!(
            "mean test NLL: global {:.4}; gaps pvi {:+.4}, bcm_same {:+.4}, bcm_split {:+.4}, vcl {:+.4}",
            totals[1],
            gap(0),
            gap(2),
            gap(3),
            gap(4)
        ),
    )
}

fn normalizability_guard() -> Result<(bool, String)> {
    let mut cfg = desk_config(0, MethodKind::Pvi, 1.0);
    cfg.schedule.rounds = 20;
    cfg.schedule.max_retries = 10;
    let undamped = run_experiment(&cfg)?;
    let r1 = undamped.manifest.rejections;
    let mut damped = Vec::new();
    for seed in 0..5 {
        let mut cfg = desk_config(seed, MethodKind::Pvi, 0.1);
        cfg.schedule.rounds = 20;
        damped.push(run_experiment(&cfg)?.manifest.rejections);
    }
    verdict(
        r1 >= 1 && damped.iter().all(|r| *r == 0),
        format!("rho = 1: {r1} rejected commits, run completed; rho = 0.1: rejections per seed {damped:?}"),
    )
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-8)
}

fn random_data(rng: &mut ChaCha8Rng, model: &ModelSpec, n: usize) -> Dataset {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..model.input_dim).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let ys = (0..n)
        .map(|_| match model.kind {
            ModelKind::LinearRegression => rng.random_range(-3.0..3.0),
            ModelKind::LogisticRegression => f64::from(rng.random::<bool>()),
            ModelKind::BnnClassifier => rng.random_range(0..model.n_classes) as f64,
        })
        .collect();
    Dataset::new(rows, ys).expect("valid")
}

fn gradient_hygiene() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let models = [
        ModelSpec {
            bias: true,
            ..ModelSpec::linear_regression(3, 0.7)
        },
        ModelSpec::logistic_regression(3, true),
        ModelSpec::bnn_classifier(2, vec![4], 3),
    ];
    let mut detail = Vec::new();
    let mut ok = true;
    for model in &models {
        let (mut wl, mut wh) = (0.0f64, 0.0f64);
        for _ in 0..50 {
            let data = random_data(&mut rng, model, 6);
            let d = model.param_dim();
            let theta: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = model.grad_log_lik(&data, &theta)?;
            let fd = fd_gradient(|t| model.log_lik(&data, t).unwrap_or(f64::NAN), &theta, 1e-5)?;
            wl = wl.max(rel_err(&g, &fd));

            let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let var: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..1.0)).collect();
            let q = GaussianMeanField::from_mean_var(&mean, &var)?;
            let eps = HyperParams {
                prior_variance: rng.random_range(0.5..2.0),
                noise_variance: rng.random_range(0.3..2.0),
            };
            let est = match model.kind {
                ModelKind::BnnClassifier => Estimator::MonteCarlo { samples: 8, seed: 3 },
                _ => Estimator::Quadrature,
            };
            let parts = [data.clone()];
            let hg = hyper_gradient(&q, model, &parts, &eps)?;
            let f = |h: &[f64]| {
                let mut mdl = model.clone();
                mdl.noise_variance = h[0];
                global_free_energy(&mdl, &GaussianMeanField::isotropic(d, h[1]), &data, &q, est).unwrap_or(f64::NAN)
            };
            let fd = fd_gradient(f, &[eps.noise_variance, eps.prior_variance], 1e-6)?;
            wh = wh.max(rel_err(&hg, &fd));
        }
        ok &= wl <= 1e-4 && wh <= 1e-4;
        detail.push(format!(
            "{:?}: grad_log_lik {wl:.1e}, hyper_gradient {wh:.1e}",
            model.kind
        ));
    }
    verdict(ok, detail.join("; "))
}

/// Maximum-marginal-likelihood noise variance of 1D linear regression by
/// golden-section search of the closed-form marginal likelihood.
pub fn ml2_noise_variance(x: &[f64], y: &[f64], prior_variance: f64) -> f64 {
    let n = x.len() as f64;
    let xx: f64 = x.iter().map(|v| v * v).sum();
    let xy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let yy: f64 = y.iter().map(|v| v * v).sum();
    let log_marg = |s2: f64| {
        let c = s2 + prior_variance * xx;
        let logdet = (n - 1.0) * s2.ln() + c.ln();
        let quad = (yy - prior_variance * xy * xy / c) / s2;
        -0.5 * (logdet + quad)
    };
    let (mut lo, mut hi) = (-6.0f64, 4.0f64);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let a = hi - g * (hi - lo);
        let b = lo + g * (hi - lo);
        if log_marg(a.exp()) > log_marg(b.exp()) {
            hi = b;
        } else {
            lo = a;
        }
    }
    (0.5 * (lo + hi)).exp()
}

fn hyper_optimization() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 200;
    let theta: f64 = StandardNormal.sample(&mut rng);
    let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|xi| {
            let e: f64 = StandardNormal.sample(&mut rng);
            theta * xi + 0.5f64.sqrt() * e
        })
        .collect();
    let model = ModelSpec::linear_regression(1, 1.0);
    let parts: Vec<Dataset> = (0..4)
        .map(|k| {
            let idx = k * 50..(k + 1) * 50;
            Dataset::new(idx.clone().map(|i| vec![x[i]]).collect(), y[idx].to_vec()).expect("valid")
        })
        .collect();
    let prior = GaussianMeanField::standard_normal(1);
    let fit = fit_noise_variance(&model, &prior, &parts, 2.0, 1.0, 2000, 1e-10)?;
    let ml2 = ml2_noise_variance(&x, &y, 1.0);
    let rel = (fit.noise_variance - 0.5).abs() / 0.5;
    let rel_ml2 = (fit.noise_variance - ml2).abs() / ml2;
    verdict(
        rel <= 0.1 && rel_ml2 <= 1e-3 && fit.converged,
        format!(
            "fitted {:.4} after {} steps (true 0.5, rel {rel:.3}); marginal-likelihood optimum {ml2:.4} (rel {rel_ml2:.1e})",
            fit.noise_variance, fit.steps
        ),
    )
}

fn async_sanity(artifacts: &mut Artifacts) -> Result<(bool, String)> {
    let (model, parts) = conj_partition();
    let prior = GaussianMeanField::standard_normal(1);
    let mut sched = Schedule::new(ScheduleKind::Asynchronous, 110);
    sched.duration.slowdown = vec![1.0, 10.0];
    sched.tolerance = 0.0;
    let opt = OptimizerConfig::analytic();
    let pooled = Dataset::concat(&parts)?;
    let mut eval = free_energy_eval(&model, &prior, &pooled);
    let out = server::run(server::init(prior.clone(), 2)?, &sched, &model, &parts, &opt, &mut eval)?;
    artifacts.insert("criterion_13_async.jsonl".into(), out.trace.to_jsonl());
    let count = |k| out.trace.records.iter().filter(|r| r.client == Some(k)).count();
    let (fast, slow) = (count(0), count(1));
    let sync = Schedule {
        tolerance: 1e-14,
        ..Schedule::new(ScheduleKind::Synchronous, 500).with_damping(0.5)
    };
    let s = server::run(
        server::init(prior.clone(), 2)?,
        &sync,
        &model,
        &parts,
        &opt,
        &mut NoMetrics,
    )?;
    let diff = out.state.q.max_abs_diff(&s.state.q);
    verdict(
        fast as f64 >= 8.0 * slow as f64 && diff <= 1e-4,
        format!("fast client {fast} commits, slow client {slow}; max natural-parameter gap to synchronous {diff:.1e}"),
    )
}

/// Trace and plot files of a small fixed set of runs.
pub fn determinism_artifacts() -> Result<Artifacts> {
    let mut a = Artifacts::new();
    conjugate_exactness(&mut a)?;
    cross_method_agreement(&mut a)?;
    async_sanity(&mut a)?;
    let mut labeled = Vec::new();
    for seed in 0..2 {
        for method in [MethodKind::Pvi, MethodKind::Vcl] {
            let mut cfg = desk_config(seed, method, 0.2);
            cfg.data = DataConfig::SynthLogreg {
                dim: 5,
                n: 500,
                noise: 1.0,
                weight_seed: 0,
            };
            cfg.split = SplitSpec::homogeneous(4, 0);
            cfg.schedule.rounds = 10;
            cfg.eval.cadence = Cadence::EveryCommit;
            cfg.eval.free_energy = true;
            cfg.eval.train_nll = true;
            let out = run_experiment(&cfg)?;
            a.insert(
                format!("smoke_{}_seed{seed}.jsonl", method.name()),
                out.trace.to_jsonl(),
            );
            labeled.push(LabeledTrace {
                method: method.name().into(),
                seed,
                trace: out.trace,
            });
        }
    }
    a.insert("smoke_tidy.csv".into(), tidy_csv(&labeled, &PlotAxes::default())?);
    a.insert("smoke_summary.csv".into(), summary_csv(&labeled, &PlotAxes::default())?);
    Ok(a)
}

fn determinism() -> Result<(bool, String)> {
    let first = determinism_artifacts()?;
    let second = determinism_artifacts()?;
    let differing: Vec<&String> = first
        .iter()
        .filter(|(k, v)| second.get(*k) != Some(v))
        .map(|(k, _)| k)
        .collect();
    verdict(
        differing.is_empty() && first.len() == second.len(),
        format!(
            "{} files compared byte for byte, {} differ",
            first.len(),
            differing.len()
        ),
    )
}
