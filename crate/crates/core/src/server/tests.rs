use super::*;
use crate::localopt::{fisher_product, mean_param_gradient, LocalMethod, OptimizerConfig};
use crate::models::{Dataset, Estimator, ModelSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn q1(e1: f64, e2: f64) -> GaussianMeanField {
    GaussianMeanField::new(vec![e1], vec![e2]).unwrap()
}

fn conj_partition() -> (ModelSpec, Vec<Dataset>) {
    (
        ModelSpec::linear_regression(1, 1.0),
        vec![
            Dataset::new(vec![vec![1.0]], vec![1.0]).unwrap(),
            Dataset::new(vec![vec![1.0]], vec![-1.0]).unwrap(),
        ],
    )
}

fn logistic_partition(seed: u64, sizes: &[usize]) -> (ModelSpec, Vec<Dataset>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parts = sizes
        .iter()
        .map(|&n| {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
                .collect();
            let ys = rows
                .iter()
                .map(|r| {
                    let p = 1.0 / (1.0 + (-(1.5 * r[0] - 0.7 * r[1])).exp());
                    if rng.random::<f64>() < p {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            Dataset::new(rows, ys).unwrap()
        })
        .collect();
    (ModelSpec::logistic_regression(2, false), parts)
}

fn delta(client: usize, e1: f64, e2: f64) -> Delta {
    Delta {
        client,
        factor_change: ApproxFactor::new(vec![e1], vec![e2], client).unwrap(),
        staleness: 0,
    }
}

#[test]
fn init_examples() {
    let s = init(GaussianMeanField::standard_normal(3), 10).unwrap();
    assert_eq!(s.factors.len(), 10);
    assert!(s.factors.iter().all(|f| f.is_unit()));
    assert_eq!(s.q, GaussianMeanField::standard_normal(3));
    assert_eq!(s.comms, 0);
    assert_eq!(init(GaussianMeanField::standard_normal(1), 1).unwrap().n_clients(), 1);
    assert!(matches!(init(q1(0.0, 0.0), 2), Err(PviError::NotNormalizable { dims }) if dims == vec![0]));
    assert!(matches!(
        init(GaussianMeanField::standard_normal(1), 0),
        Err(PviError::Config(_))
    ));
}

#[test]
fn select_examples() {
    let mut s = init(GaussianMeanField::standard_normal(1), 3).unwrap();
    let seq = Schedule::new(ScheduleKind::SequentialFixed, 1);
    let order: Vec<usize> = (0..6)
        .map(|i| {
            s.iteration = i;
            select(&s, &seq)[0]
        })
        .collect();
    assert_eq!(order, vec![0, 1, 2, 0, 1, 2]);
    s.iteration = 4;
    assert_eq!(select(&s, &seq), vec![1]);

    let s10 = init(GaussianMeanField::standard_normal(1), 10).unwrap();
    let sync = Schedule::new(ScheduleKind::Synchronous, 1);
    assert_eq!(select(&s10, &sync), (0..10).collect::<Vec<_>>());

    let rnd = Schedule::new(ScheduleKind::SequentialRandom, 1);
    let mut a = init_with_seed(GaussianMeanField::standard_normal(1), 10, 7).unwrap();
    let mut b = a.clone();
    let mut pa = Vec::new();
    let mut pb = Vec::new();
    for i in 0..20 {
        a.iteration = i;
        b.iteration = i;
        pa.extend(select(&a, &rnd));
        pb.extend(select(&b, &rnd));
    }
    assert_eq!(pa, pb);
    let mut first: Vec<usize> = pa[..10].to_vec();
    first.sort();
    assert_eq!(first, (0..10).collect::<Vec<_>>());
}

#[test]
fn apply_deltas_examples() {
    let s = init(q1(0.0, -0.5), 2).unwrap();
    let one = apply_deltas(&s, &[delta(0, 1.0, -0.1)], 1.0).unwrap();
    assert!((one.q.eta1[0] - 1.0).abs() < 1e-15 && (one.q.eta2[0] + 0.6).abs() < 1e-15);
    let half = apply_deltas(&s, &[delta(0, 1.0, -0.1)], 0.5).unwrap();
    assert!((half.q.eta1[0] - 0.5).abs() < 1e-15 && (half.q.eta2[0] + 0.55).abs() < 1e-15);
    let bad = apply_deltas(&s, &[delta(0, 0.0, 0.3), delta(1, 0.0, 0.3)], 1.0);
    assert!(matches!(bad, Err(PviError::RejectedUnnormalizable { dims }) if dims == vec![0]));
    assert_eq!(s.factors[0].eta1, vec![0.0]);
    let dup = apply_deltas(&s, &[delta(0, 1.0, -0.1), delta(0, 1.0, -0.1)], 1.0);
    assert!(dup.is_err());
}

#[test]
fn sequential_conjugate_reaches_exact_posterior_after_one_pass() {
    let (model, parts) = conj_partition();
    let s = init(GaussianMeanField::standard_normal(1), 2).unwrap();
    let sched = Schedule::new(ScheduleKind::SequentialFixed, 1);
    let out = run(s, &sched, &model, &parts, &OptimizerConfig::analytic(), &mut NoMetrics).unwrap();
    assert_eq!(out.state.comms, 2);
    let (m, v) = out.state.q.mean_var().unwrap();
    assert!(m[0].abs() < 1e-12);
    assert!((v[0] - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(out.trace.len(), 3);
    assert!(out.state.factorization_error() < 1e-9);
}

#[test]
fn synchronous_damped_converges_to_exact_posterior() {
    let (model, parts) = conj_partition();
    let s = init(GaussianMeanField::standard_normal(1), 2).unwrap();
    let sched = Schedule::new(ScheduleKind::Synchronous, 30).with_damping(0.5);
    let out = run(s, &sched, &model, &parts, &OptimizerConfig::analytic(), &mut NoMetrics).unwrap();
    let (m, v) = out.state.q.mean_var().unwrap();
    assert!(m[0].abs() < 1e-6);
    assert!((v[0] - 1.0 / 3.0).abs() < 1e-6);
    assert!(out.trace.len() - 1 <= 30);
    assert_eq!(out.state.comms, 2 * (out.trace.len() - 1));
}

#[test]
fn zero_rounds_records_only_prior() {
    let (model, parts) = conj_partition();
    let s = init(GaussianMeanField::standard_normal(1), 2).unwrap();
    for kind in [
        ScheduleKind::SequentialFixed,
        ScheduleKind::Synchronous,
        ScheduleKind::Asynchronous,
    ] {
        let out = run(
            s.clone(),
            &Schedule::new(kind, 0),
            &model,
            &parts,
            &OptimizerConfig::analytic(),
            &mut NoMetrics,
        )
        .unwrap();
        assert_eq!(out.trace.len(), 1);
        assert_eq!(out.trace.records[0].comms, 0);
        assert_eq!(out.state.q, s.q);
    }
}

#[test]
fn async_equal_durations_alternate_and_match_synchronous() {
    let (model, parts) = conj_partition();
    let s = init(GaussianMeanField::standard_normal(1), 2).unwrap();
    let mut sched = Schedule::new(ScheduleKind::Asynchronous, 200);
    sched.duration.jitter = 0.0;
    sched.tolerance = 1e-10;
    let out = run_async(
        s.clone(),
        &sched,
        &model,
        &parts,
        &OptimizerConfig::analytic(),
        &mut NoMetrics,
    )
    .unwrap();
    let clients: Vec<usize> = out.trace.records.iter().filter_map(|r| r.client).collect();
    for (i, c) in clients.iter().enumerate() {
        assert_eq!(*c, i % 2);
    }
    assert_eq!(out.state.comms, out.state.commits);
    let sync = run(
        s,
        &Schedule::new(ScheduleKind::Synchronous, 200).with_damping(0.5),
        &model,
        &parts,
        &OptimizerConfig::analytic(),
        &mut NoMetrics,
    )
    .unwrap();
    assert!(out.state.q.max_abs_diff(&sync.state.q) < 1e-5);
}

#[test]
fn async_slow_client_commits_less_often() {
    let (model, parts) = conj_partition();
    let s = init(GaussianMeanField::standard_normal(1), 2).unwrap();
    let mut sched = Schedule::new(ScheduleKind::Asynchronous, 55);
    sched.duration.slowdown = vec![1.0, 10.0];
    sched.tolerance = 0.0;
    let out = run_async(s, &sched, &model, &parts, &OptimizerConfig::analytic(), &mut NoMetrics).unwrap();
    let fast = out.trace.records.iter().filter(|r| r.client == Some(0)).count();
    let slow = out.trace.records.iter().filter(|r| r.client == Some(1)).count();
    assert_eq!(fast + slow, 110);
    let ratio = fast as f64 / slow as f64;
    assert!((9.0..=11.0).contains(&ratio), "ratio {ratio}");
    assert!(out.trace.records.iter().any(|r| r.staleness.unwrap_or(0) > 0));
    let times: Vec<f64> = out.trace.records.iter().map(|r| r.logical_time).collect();
    assert!(times.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn async_single_client_is_sequential() {
    let (model, parts) = logistic_partition(3, &[40]);
    let s = init(GaussianMeanField::standard_normal(2), 1).unwrap();
    let cfg = OptimizerConfig::fixed_point(1.0);
    let seq = run(
        s.clone(),
        &Schedule::new(ScheduleKind::SequentialFixed, 4),
        &model,
        &parts,
        &cfg,
        &mut NoMetrics,
    )
    .unwrap();
    let mut sched = Schedule::new(ScheduleKind::Asynchronous, 4);
    sched.tolerance = 1e-6;
    let asy = run_async(s, &sched, &model, &parts, &cfg, &mut NoMetrics).unwrap();
    assert_eq!(seq.state.q, asy.state.q);
    assert_eq!(seq.state.factors, asy.state.factors);
}

fn global_gradient_step(
    model: &ModelSpec,
    prior: &GaussianMeanField,
    data: &Dataset,
    q: &GaussianMeanField,
    rho: f64,
) -> GaussianMeanField {
    let g = mean_param_gradient(model, data, q, Estimator::Quadrature).unwrap();
    let r1: Vec<f64> = (0..q.dim()).map(|i| g.eta1[i] + prior.eta1[i] - q.eta1[i]).collect();
    let r2: Vec<f64> = (0..q.dim()).map(|i| g.eta2[i] + prior.eta2[i] - q.eta2[i]).collect();
    let (a, b) = fisher_product(q, &r1, &r2).unwrap();
    GaussianMeanField {
        eta1: (0..q.dim()).map(|i| q.eta1[i] + rho * a[i]).collect(),
        eta2: (0..q.dim()).map(|i| q.eta2[i] + rho * b[i]).collect(),
    }
}

#[test]
fn gradient_single_steps_match_global_vi() {
    let (model, parts) = logistic_partition(11, &[25, 15]);
    let full = Dataset::concat(&parts).unwrap();
    let prior = GaussianMeanField::standard_normal(2);
    let mut s = init(prior.clone(), 2).unwrap();
    let mut g = prior.clone();
    for _ in 0..20 {
        s = single_step_mode(&s, &model, &parts, StepForm::Gradient, 0.05, Estimator::Quadrature).unwrap();
        g = global_gradient_step(&model, &prior, &full, &g, 0.05);
        assert!(s.q.max_abs_diff(&g) < 1e-12, "{}", s.q.max_abs_diff(&g));
    }
    assert!(s.factorization_error() < 1e-9);
}

#[test]
fn fixed_point_single_steps_match_global_vi() {
    let (model, parts) = logistic_partition(12, &[10, 20, 5]);
    let full = Dataset::concat(&parts).unwrap();
    let prior = GaussianMeanField::standard_normal(2);
    let rho = 0.3;
    let mut s = init(prior.clone(), 3).unwrap();
    let mut g = prior.clone();
    for _ in 0..10 {
        s = single_step_mode(&s, &model, &parts, StepForm::FixedPoint, rho, Estimator::Quadrature).unwrap();
        let grad = mean_param_gradient(&model, &full, &g, Estimator::Quadrature).unwrap();
        g = GaussianMeanField {
            eta1: (0..2)
                .map(|i| (1.0 - rho) * g.eta1[i] + rho * (prior.eta1[i] + grad.eta1[i]))
                .collect(),
            eta2: (0..2)
                .map(|i| (1.0 - rho) * g.eta2[i] + rho * (prior.eta2[i] + grad.eta2[i]))
                .collect(),
        };
        assert!(s.q.max_abs_diff(&g) < 1e-12, "{}", s.q.max_abs_diff(&g));
    }
}

#[test]
fn single_client_single_step_is_global_vi() {
    let (model, parts) = logistic_partition(13, &[30]);
    let prior = GaussianMeanField::standard_normal(2);
    let s = init(prior.clone(), 1).unwrap();
    let next = single_step_mode(&s, &model, &parts, StepForm::Gradient, 0.1, Estimator::Quadrature).unwrap();
    let g = global_gradient_step(&model, &prior, &parts[0], &prior, 0.1);
    assert!(next.q.max_abs_diff(&g) < 1e-14);
}

#[test]
fn partition_invariance_of_conjugate_fixed_point() {
    let model = ModelSpec::linear_regression(1, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let rows: Vec<Vec<f64>> = (0..10).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
    let ys: Vec<f64> = rows.iter().map(|r| 0.8 * r[0] + rng.random_range(-0.5..0.5)).collect();
    let full = Dataset::new(rows, ys).unwrap();
    let prior = GaussianMeanField::standard_normal(1);
    let exact = crate::models::exact_posterior(&model, &prior, &full).unwrap();
    for m in [1usize, 2, 5] {
        let parts: Vec<Dataset> = (0..m)
            .map(|k| full.subset(&(0..10).filter(|i| i % m == k).collect::<Vec<_>>()))
            .collect();
        for kind in [
            ScheduleKind::SequentialFixed,
            ScheduleKind::Synchronous,
            ScheduleKind::Asynchronous,
        ] {
            let mut sched = Schedule::new(kind, 400);
            sched.tolerance = 1e-12;
            sched.duration.jitter = 0.0;
            let out = run(
                init(prior.clone(), m).unwrap(),
                &sched,
                &model,
                &parts,
                &OptimizerConfig::analytic(),
                &mut NoMetrics,
            )
            .unwrap();
            assert!(
                out.state.q.max_abs_diff(&exact) < 1e-8,
                "{m} {kind:?}: {}",
                out.state.q.max_abs_diff(&exact)
            );
        }
    }
}

#[test]
fn halve_rho_policy_recovers_and_abort_policy_fails() {
    let s = init(q1(0.0, -0.5), 2).unwrap();
    let sched = Schedule::default();
    let mut st = s.clone();
    let used = run::commit(&mut st, &[delta(0, 0.0, 0.3), delta(1, 0.0, 0.3)], 1.0, &sched).unwrap();
    assert_eq!(used, 0.5);
    assert_eq!(st.rejections, 1);
    let mut abort = sched.clone();
    abort.reject_policy = RejectPolicy::Abort;
    let mut st = s.clone();
    assert!(run::commit(&mut st, &[delta(0, 0.0, 0.3), delta(1, 0.0, 0.3)], 1.0, &abort).is_err());
    let mut st = s;
    let r = run::commit(&mut st, &[delta(0, 0.0, 30.0)], 1.0, &sched);
    assert!(matches!(r, Err(PviError::RejectedUnnormalizable { .. })));
    assert_eq!(st.rejections, 6);
}

#[test]
fn runs_are_deterministic_and_account_comms() {
    let (model, parts) = logistic_partition(31, &[15, 15, 15]);
    let mut cfg = OptimizerConfig::gradient(0.05);
    cfg.estimator = crate::localopt::EstimatorKind::MonteCarlo;
    cfg.max_steps = 50;
    cfg.seed = 9;
    for kind in [
        ScheduleKind::SequentialRandom,
        ScheduleKind::Synchronous,
        ScheduleKind::Asynchronous,
    ] {
        let mut sched = Schedule::new(kind, 2);
        sched.threads = 3;
        let s = init_with_seed(GaussianMeanField::standard_normal(2), 3, 4).unwrap();
        let a = run(s.clone(), &sched, &model, &parts, &cfg, &mut NoMetrics).unwrap();
        sched.threads = 1;
        let b = run(s, &sched, &model, &parts, &cfg, &mut NoMetrics).unwrap();
        assert_eq!(a.trace.to_jsonl(), b.trace.to_jsonl());
        assert_eq!(a.state, b.state);
        assert_eq!(a.state.comms, 6);
        assert!(a.state.factorization_error() < 1e-9);
    }
}

#[test]
fn trace_jsonl_round_trip() {
    let (model, parts) = conj_partition();
    let s = init(GaussianMeanField::standard_normal(1), 2).unwrap();
    let mut eval = |q: &GaussianMeanField, _: bool| -> Result<Option<Metrics>> {
        Ok(Some(Metrics {
            free_energy: Some(-q.eta2[0]),
            ..Metrics::default()
        }))
    };
    let out = run(
        s,
        &Schedule::new(ScheduleKind::SequentialFixed, 2),
        &model,
        &parts,
        &OptimizerConfig::analytic(),
        &mut eval,
    )
    .unwrap();
    out.trace.validate().unwrap();
    let text = out.trace.to_jsonl();
    let back = MetricsTrace::read_jsonl(text.as_bytes()).unwrap();
    assert_eq!(back, out.trace);
    assert!(MetricsTrace::read_jsonl("{\"i\":0,\"bogus\":1}".as_bytes()).is_err());
    assert!(LocalMethod::Analytic == OptimizerConfig::analytic().method);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sequential_unit_damping_never_rejects(seed in 0u64..1000, m in 1usize..5) {
        let sizes: Vec<usize> = (0..m).map(|k| 3 + (seed as usize + k) % 7).collect();
        let (model, parts) = logistic_partition(seed, &sizes);
        let s = init(GaussianMeanField::isotropic(2, 2.0), m).unwrap();
        let out = run(s, &Schedule::new(ScheduleKind::SequentialFixed, 3), &model, &parts, &OptimizerConfig::fixed_point(1.0), &mut NoMetrics)
            .unwrap();
        prop_assert_eq!(out.state.rejections, 0);
        prop_assert!(out.state.factorization_error() < 1e-9);
        prop_assert!(out.trace.records.iter().all(|r| r.rho_effective.is_none_or(|x| x == 1.0)));
    }
}
