use super::*;
use crate::expfam::combine;
use crate::oracle::{fd_gradient, grid_posterior, kl_to_grid};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

fn q1(e1: f64, e2: f64) -> GaussianMeanField {
    GaussianMeanField::new(vec![e1], vec![e2]).unwrap()
}

fn f1(e1: f64, e2: f64) -> ApproxFactor {
    ApproxFactor::new(vec![e1], vec![e2], 0).unwrap()
}

fn conj() -> (ModelSpec, Dataset) {
    (
        ModelSpec::linear_regression(1, 1.0),
        Dataset::new(vec![vec![1.0]], vec![2.0]).unwrap(),
    )
}

fn logistic_1d(seed: u64, n: usize) -> (ModelSpec, Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(-2.0..2.0)]).collect();
    let ys: Vec<f64> = rows
        .iter()
        .map(|r| {
            if rng.random::<f64>() < 1.0 / (1.0 + (-1.3 * r[0]).exp()) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    (
        ModelSpec::logistic_regression(1, false),
        Dataset::new(rows, ys).unwrap(),
    )
}

#[test]
fn cavity_examples() {
    let (model, data) = conj();
    let q = q1(0.0, -0.5);
    let unit = ApproxFactor::unit(1, 0);
    let p = LocalProblem {
        q_prev: &q,
        t_prev: &unit,
        data: &data,
        model: &model,
    };
    assert_eq!(cavity(&p), q);

    let q = q1(2.0, -1.0);
    let t = f1(2.0, -0.5);
    let p = LocalProblem {
        q_prev: &q,
        t_prev: &t,
        data: &data,
        model: &model,
    };
    assert_eq!(cavity(&p), q1(0.0, -0.5));

    let t = f1(0.0, -2.0);
    let p = LocalProblem {
        q_prev: &q,
        t_prev: &t,
        data: &data,
        model: &model,
    };
    assert!(!cavity(&p).is_normalizable());
    assert!(matches!(
        optimize_local(&p, &OptimizerConfig::analytic()),
        Err(PviError::CavityNotNormalizable { .. })
    ));
}

#[test]
fn local_free_energy_examples() {
    let (model, data) = conj();
    let prior = q1(0.0, -0.5);
    let unit = ApproxFactor::unit(1, 0);
    let p = LocalProblem {
        q_prev: &prior,
        t_prev: &unit,
        data: &data,
        model: &model,
    };
    let post = q1(2.0, -1.0);
    let f = local_free_energy(&p, &post, Estimator::Quadrature).unwrap();
    let log_z = -0.5 * (2.0 * std::f64::consts::PI * 2.0).ln() - 1.0;
    assert!((f - log_z).abs() < 1e-12);

    let empty = Dataset::empty(1);
    let p = LocalProblem {
        q_prev: &prior,
        t_prev: &unit,
        data: &empty,
        model: &model,
    };
    assert_eq!(local_free_energy(&p, &prior, Estimator::Quadrature).unwrap(), 0.0);
}

#[test]
fn property_one_on_randomized_logistic_problems() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..10 {
        let (model, data) = logistic_1d(100 + trial, 6);
        let q_prev =
            GaussianMeanField::from_mean_var(&[rng.random_range(-1.0..1.0)], &[rng.random_range(0.2..1.0)]).unwrap();
        let t_prev = f1(rng.random_range(-0.5..0.5), -rng.random_range(0.0..0.4));
        let p = LocalProblem {
            q_prev: &q_prev,
            t_prev: &t_prev,
            data: &data,
            model: &model,
        };
        let c = cavity(&p);
        let gp = grid_posterior(&model, &c, &data, None, None).unwrap();
        // Tilted normalizer relative to q_prev / t_prev rather than the
        // normalized cavity.
        let log_zhat = gp.log_z + c.log_partition().unwrap() - q_prev.log_partition().unwrap();
        let q =
            GaussianMeanField::from_mean_var(&[rng.random_range(-1.0..1.0)], &[rng.random_range(0.1..0.8)]).unwrap();
        let f = local_free_energy(&p, &q, Estimator::Quadrature).unwrap();
        let kl = kl_to_grid(&q, &gp).unwrap();
        assert!(
            (f - (log_zhat - kl)).abs() < 1e-4,
            "trial {trial}: {}",
            f - (log_zhat - kl)
        );
    }
}

#[test]
fn property_two_sum_of_local_free_energies() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..20 {
        let (model, data) = if trial % 2 == 0 {
            let rows: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.random_range(-2.0..2.0)]).collect();
            let ys: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            (ModelSpec::linear_regression(1, 0.8), Dataset::new(rows, ys).unwrap())
        } else {
            logistic_1d(trial, 6)
        };
        let prior = GaussianMeanField::standard_normal(1);
        let parts = [data.subset(&[0, 1]), data.subset(&[2, 3, 4]), data.subset(&[5])];
        let factors: Vec<ApproxFactor> = (0..3)
            .map(|k| {
                ApproxFactor::new(vec![rng.random_range(-1.0..1.0)], vec![-rng.random_range(0.0..0.5)], k).unwrap()
            })
            .collect();
        let q = combine(&prior, &factors);
        let sum_local: f64 = parts
            .iter()
            .zip(&factors)
            .map(|(d, t)| {
                let p = LocalProblem {
                    q_prev: &q,
                    t_prev: t,
                    data: d,
                    model: &model,
                };
                local_free_energy(&p, &q, Estimator::Quadrature).unwrap()
            })
            .sum();
        let log_zq = q.log_partition().unwrap() - prior.log_partition().unwrap();
        let global = global_free_energy(&model, &prior, &data, &q, Estimator::Quadrature).unwrap();
        assert!((sum_local + log_zq - global).abs() < 1e-6, "trial {trial}");
    }
}

#[test]
fn optimize_local_examples() {
    let (model, data) = conj();
    let prior = q1(0.0, -0.5);
    let unit = ApproxFactor::unit(1, 0);
    let p = LocalProblem {
        q_prev: &prior,
        t_prev: &unit,
        data: &data,
        model: &model,
    };
    let out = optimize_local(&p, &OptimizerConfig::analytic()).unwrap();
    assert_eq!(out.q_new, q1(2.0, -1.0));
    assert_eq!((out.t_new.eta1[0], out.t_new.eta2[0]), (2.0, -0.5));
    assert_eq!((out.delta.eta1[0], out.delta.eta2[0]), (2.0, -0.5));

    let empty = Dataset::empty(1);
    for cfg in [
        OptimizerConfig::analytic(),
        OptimizerConfig::default(),
        OptimizerConfig::fixed_point(1.0),
    ] {
        let p = LocalProblem {
            q_prev: &prior,
            t_prev: &unit,
            data: &empty,
            model: &model,
        };
        let out = optimize_local(&p, &cfg).unwrap();
        assert_eq!(out.q_new, prior);
        assert!(out.delta.is_unit());
    }

    // Revisit after convergence: the factor is already optimal.
    let (lmodel, ldata) = logistic_1d(3, 8);
    let cfg = OptimizerConfig::fixed_point(1.0);
    let p = LocalProblem {
        q_prev: &prior,
        t_prev: &unit,
        data: &ldata,
        model: &lmodel,
    };
    let first = optimize_local(&p, &cfg).unwrap();
    let p2 = LocalProblem {
        q_prev: &first.q_new,
        t_prev: &first.t_new,
        data: &ldata,
        model: &lmodel,
    };
    let second = optimize_local(&p2, &cfg).unwrap();
    let mag = second
        .delta
        .eta1
        .iter()
        .chain(&second.delta.eta2)
        .fold(0.0f64, |a, b| a.max(b.abs()));
    assert!(mag < 1e-8, "{mag}");
}

#[test]
fn fixed_point_step_examples() {
    let (model, data) = conj();
    let prior = q1(0.0, -0.5);
    let unit = ApproxFactor::unit(1, 0);
    let p = LocalProblem {
        q_prev: &prior,
        t_prev: &unit,
        data: &data,
        model: &model,
    };
    let t = fixed_point_step(&p, &prior, 1.0).unwrap();
    assert!((t.eta1[0] - 2.0).abs() < 1e-14 && (t.eta2[0] + 0.5).abs() < 1e-14);
    let t = fixed_point_step(&p, &prior, 0.5).unwrap();
    assert!((t.eta1[0] - 1.0).abs() < 1e-14 && (t.eta2[0] + 0.25).abs() < 1e-14);
}

#[test]
fn fixed_point_and_gradient_methods_agree_on_logistic() {
    let (model, data) = logistic_1d(9, 10);
    let prior = GaussianMeanField::standard_normal(1);
    let unit = ApproxFactor::unit(1, 0);
    let p = LocalProblem {
        q_prev: &prior,
        t_prev: &unit,
        data: &data,
        model: &model,
    };
    let fp = optimize_local(&p, &OptimizerConfig::fixed_point(1.0)).unwrap();
    let mut gcfg = OptimizerConfig::gradient(1e-2);
    gcfg.max_steps = 20_000;
    gcfg.tolerance = 1e-13;
    let gr = optimize_local(&p, &gcfg).unwrap();
    let diff = fp.q_new.max_abs_diff(&gr.q_new);
    assert!(diff < 1e-4, "{diff}");
    assert!(fp.trace.converged);
}

#[test]
fn stochastic_global_examples() {
    let (model, data) = conj();
    let prior = q1(0.0, -0.5);
    let q = stochastic_global_step(&model, &prior, &prior, &data, 1.0, 1.0, Estimator::Quadrature).unwrap();
    assert!(q.max_abs_diff(&q1(2.0, -1.0)) < 1e-14);
    let start = q1(0.3, -0.7);
    let same = stochastic_global_step(&model, &start, &prior, &data, 3.0, 0.0, Estimator::Quadrature).unwrap();
    assert_eq!(same, start);
}

#[test]
fn stochastic_global_forms_agree_bitwise_on_dyadic_inputs() {
    let model = ModelSpec::linear_regression(1, 1.0);
    let batch = Dataset::new(vec![vec![1.0]], vec![2.0]).unwrap();
    let prior = q1(0.0, -0.5);
    let q = q1(1.0, -1.0);
    let a = stochastic_global_step(&model, &q, &prior, &batch, 2.0, 0.25, Estimator::Quadrature).unwrap();
    let b = stochastic_global_step_deletion_form(&model, &q, &prior, &batch, 2.0, 0.25, Estimator::Quadrature).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn stochastic_global_forms_agree(m in -2.0..2.0f64, v in 0.1..2.0f64, l in 1.0..8.0f64, rho in 0.0..0.1f64) {
        let (model, data) = logistic_1d(1, 5);
        let prior = GaussianMeanField::standard_normal(1);
        let q = GaussianMeanField::from_mean_var(&[m], &[v]).unwrap();
        let a = stochastic_global_step(&model, &q, &prior, &data, l, rho, Estimator::Quadrature).unwrap();
        let b = stochastic_global_step_deletion_form(&model, &q, &prior, &data, l, rho, Estimator::Quadrature).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-12 * (1.0 + l * 10.0));
    }
}

#[test]
fn stochastic_local_examples() {
    let (model, data) = logistic_1d(2, 8);
    let prior = GaussianMeanField::standard_normal(1);
    let factor = f1(0.4, -0.2);
    let q = combine(&prior, [&factor]);
    let (ql, _) = stochastic_local_step(&model, &q, &factor, &data, 1.0, Estimator::Quadrature).unwrap();
    let qg = stochastic_global_step(&model, &q, &prior, &data, 1.0, 1.0, Estimator::Quadrature).unwrap();
    assert!(ql.max_abs_diff(&qg) < 1e-12);

    // Conjugate groups, one sweep with rho = 1.
    let lin = ModelSpec::linear_regression(1, 0.5);
    let groups = [
        Dataset::new(vec![vec![1.0], vec![0.5]], vec![2.0, -1.0]).unwrap(),
        Dataset::new(vec![vec![-1.5]], vec![0.3]).unwrap(),
    ];
    let all = Dataset::concat(&groups).unwrap();
    let exact = crate::models::exact_posterior(&lin, &prior, &all).unwrap();
    let mut q = prior.clone();
    let mut factors = [ApproxFactor::unit(1, 0), ApproxFactor::unit(1, 1)];
    for (k, g) in groups.iter().enumerate() {
        let (qn, fn_) = stochastic_local_step(&lin, &q, &factors[k], g, 1.0, Estimator::Quadrature).unwrap();
        q = qn;
        factors[k] = fn_;
    }
    assert!(q.max_abs_diff(&exact) < 1e-12);
}

#[test]
fn stochastic_local_fixed_point_matches_global_vi() {
    let (model, data) = logistic_1d(4, 12);
    let prior = GaussianMeanField::standard_normal(1);
    let groups: Vec<Dataset> = (0..3)
        .map(|g| data.subset(&[4 * g, 4 * g + 1, 4 * g + 2, 4 * g + 3]))
        .collect();
    let mut q = prior.clone();
    let mut factors: Vec<ApproxFactor> = (0..3).map(|k| ApproxFactor::unit(1, k)).collect();
    for _ in 0..400 {
        for k in 0..3 {
            let (qn, f) =
                stochastic_local_step(&model, &q, &factors[k], &groups[k], 0.5, Estimator::Quadrature).unwrap();
            q = qn;
            factors[k] = f;
        }
    }
    let unit = ApproxFactor::unit(1, 0);
    let p = LocalProblem {
        q_prev: &prior,
        t_prev: &unit,
        data: &data,
        model: &model,
    };
    let global = optimize_local(&p, &OptimizerConfig::fixed_point(1.0)).unwrap().q_new;
    assert!(q.max_abs_diff(&global) < 1e-4);
}

#[test]
fn expected_loglik_and_early_stop_examples() {
    let (model, data) = conj();
    let prior = q1(0.0, -0.5);
    let unit = ApproxFactor::unit(1, 0);
    let p = LocalProblem {
        q_prev: &prior,
        t_prev: &unit,
        data: &data,
        model: &model,
    };
    let e = expected_loglik(&p, &q1(2.0, -1.0), Estimator::Quadrature).unwrap();
    let want = -0.5 * ((2.0f64 - 1.0).powi(2) + 0.5) - 0.5 * LN_2PI;
    assert!((e - want).abs() < 1e-12);
    assert!((e + 1.6689).abs() < 1e-4);

    assert!(early_stop_check(&[1.0, 1.0], 5, 1e-3));
    let improving: Vec<f64> = (0..100).map(|i| i as f64 * 0.01).collect();
    for n in 2..=improving.len() {
        assert!(!early_stop_check(&improving[..n], 5, 1e-3));
    }
}

#[test]
fn hyper_gradient_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rows: Vec<Vec<f64>> = (0..30).map(|_| vec![rng.random_range(-2.0..2.0)]).collect();
    let ys: Vec<f64> = rows.iter().map(|r| 0.7 * r[0] + rng.random_range(-1.0..1.0)).collect();
    let data = Dataset::new(rows, ys).unwrap();
    let q = GaussianMeanField::from_mean_var(&[0.6], &[0.05]).unwrap();
    let eps = HyperParams {
        prior_variance: 1.5,
        noise_variance: 0.4,
    };
    let g = hyper_gradient(
        &q,
        &ModelSpec::linear_regression(1, 0.4),
        std::slice::from_ref(&data),
        &eps,
    )
    .unwrap();
    let f = |x: &[f64]| {
        let model = ModelSpec::linear_regression(1, x[0]);
        let prior = GaussianMeanField::isotropic(1, x[1]);
        global_free_energy(&model, &prior, &data, &q, Estimator::Quadrature).unwrap()
    };
    let fd = fd_gradient(f, &[0.4, 1.5], 1e-6).unwrap();
    for j in 0..2 {
        assert!((g[j] - fd[j]).abs() <= 1e-4 * fd[j].abs().max(1e-3), "{g:?} {fd:?}");
    }

    let prior = GaussianMeanField::isotropic(2, 2.0);
    let g = hyper_gradient(
        &prior,
        &ModelSpec::logistic_regression(1, true),
        &[],
        &HyperParams {
            prior_variance: 2.0,
            noise_variance: 1.0,
        },
    )
    .unwrap();
    assert_eq!(g[1], 0.0);

    let whole = hyper_gradient(
        &q,
        &ModelSpec::linear_regression(1, 0.4),
        std::slice::from_ref(&data),
        &eps,
    )
    .unwrap();
    let idx: Vec<usize> = (0..30).collect();
    let parts = vec![
        data.subset(&idx[..7]),
        data.subset(&idx[7..19]),
        data.subset(&idx[19..]),
    ];
    let split = hyper_gradient(&q, &ModelSpec::linear_regression(1, 0.4), &parts, &eps).unwrap();
    assert_eq!(whole, split);
}

#[test]
fn fixed_points_are_global_optima() {
    let (model, data) = logistic_1d(21, 12);
    let prior = GaussianMeanField::standard_normal(1);
    let parts: Vec<Dataset> = (0..3)
        .map(|g| data.subset(&(4 * g..4 * g + 4).collect::<Vec<_>>()))
        .collect();
    let mut factors: Vec<ApproxFactor> = (0..3).map(|k| ApproxFactor::unit(1, k)).collect();
    let mut q = prior.clone();
    for _ in 0..300 {
        for k in 0..3 {
            let p = LocalProblem {
                q_prev: &q,
                t_prev: &factors[k],
                data: &parts[k],
                model: &model,
            };
            let t = fixed_point_step(&p, &q, 1.0).unwrap();
            factors[k] = t;
            q = combine(&prior, &factors);
        }
    }
    for k in 0..3 {
        let p = LocalProblem {
            q_prev: &q,
            t_prev: &factors[k],
            data: &parts[k],
            model: &model,
        };
        let t = fixed_point_step(&p, &q, 1.0).unwrap();
        assert!(t.max_abs_diff(&factors[k]) < 1e-8);
    }
    let unit = ApproxFactor::unit(1, 0);
    let global = LocalProblem {
        q_prev: &prior,
        t_prev: &unit,
        data: &data,
        model: &model,
    };
    let g = natural_gradient(&global, &q, Estimator::Quadrature).unwrap();
    let norm = g.eta1.iter().chain(&g.eta2).map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm < 1e-5, "{norm}");
}

#[test]
fn monte_carlo_error_shrinks_like_inverse_root() {
    let (model, data) = logistic_1d(6, 10);
    let q = GaussianMeanField::from_mean_var(&[0.4], &[0.3]).unwrap();
    let exact = model.expected_log_lik(&data, &q, Estimator::Quadrature).unwrap().value;
    let rmse = |s: usize| -> f64 {
        let reps = 40;
        let se: f64 = (0..reps)
            .map(|r| {
                let v = model
                    .expected_log_lik(
                        &data,
                        &q,
                        Estimator::MonteCarlo {
                            samples: s,
                            seed: 1000 + r,
                        },
                    )
                    .unwrap()
                    .value;
                (v - exact).powi(2)
            })
            .sum();
        (se / reps as f64).sqrt()
    };
    let e = [rmse(100), rmse(1000), rmse(10_000)];
    let slope = (e[2].ln() - e[0].ln()) / (10_000f64.ln() - 100f64.ln());
    assert!((slope + 0.5).abs() < 0.15, "{e:?} slope {slope}");
}
