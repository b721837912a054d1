use super::*;
use proptest::prelude::*;

fn one_point(x: Vec<f64>, y: f64) -> Dataset {
    Dataset::new(vec![x], vec![y]).unwrap()
}

fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[i] += h;
            b[i] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

fn rel_close(a: &[f64], b: &[f64], tol: f64) -> bool {
    let scale = b.iter().fold(1e-3f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * scale)
}

#[test]
fn log_lik_examples() {
    let logit = ModelSpec::logistic_regression(1, false);
    let ll = logit.log_lik(&one_point(vec![0.0], 1.0), &[3.0]).unwrap();
    assert!((ll - 0.5f64.ln()).abs() < 1e-15);

    let lin = ModelSpec::linear_regression(1, 1.0);
    let ll = lin.log_lik(&one_point(vec![2.0], 3.0), &[1.5]).unwrap();
    assert!((ll + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);

    let net = ModelSpec::bnn_classifier(4, vec![5], 10);
    let theta = vec![0.0; net.param_dim()];
    let ll = net.log_lik(&one_point(vec![1.0, -2.0, 0.5, 3.0], 7.0), &theta).unwrap();
    assert!((ll + 10f64.ln()).abs() < 1e-14);

    assert!(matches!(
        logit.log_lik(&one_point(vec![0.0], 1.0), &[1.0, 2.0]),
        Err(PviError::DimensionMismatch { .. })
    ));
}

#[test]
fn grad_log_lik_examples() {
    let logit = ModelSpec::logistic_regression(2, false);
    let x = vec![1.0, -2.0];
    let g = logit.grad_log_lik(&one_point(x.clone(), 1.0), &[2.0, 1.0]).unwrap();
    assert_eq!(g, vec![0.5, -1.0]);

    let lin = ModelSpec::linear_regression(1, 1.0);
    let g = lin.grad_log_lik(&one_point(vec![2.0], 3.0), &[1.5]).unwrap();
    assert_eq!(g, vec![0.0]);
}

#[test]
fn bnn_gradient_matches_finite_differences() {
    let net = ModelSpec::bnn_classifier(2, vec![3], 3);
    let data = Dataset::new(
        vec![vec![0.3, -1.2], vec![1.1, 0.4], vec![-0.7, 0.9]],
        vec![0.0, 2.0, 1.0],
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let theta: Vec<f64> = (0..net.param_dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let g = net.grad_log_lik(&data, &theta).unwrap();
        let fd = central_diff(|t| net.log_lik(&data, t).unwrap(), &theta, 1e-5);
        assert!(rel_close(&g, &fd, 1e-5), "{g:?} vs {fd:?}");
    }
}

#[test]
fn predict_logistic_examples() {
    let q = GaussianMeanField::from_mean_var(&[0.0, 0.0], &[4.0, 9.0]).unwrap();
    let p = predict_logistic(&q, &[1.0, 2.0], ProbitScale::Pi).unwrap();
    assert!((p - 0.5).abs() < 1e-15);

    let q = GaussianMeanField::from_mean_var(&[1.0], &[1.0]).unwrap();
    let p = predict_logistic(&q, &[1.0], ProbitScale::Pi).unwrap();
    let want = 1.0 / (1.0 + (-1.0 / (1.0 + std::f64::consts::PI).sqrt()).exp());
    assert!((p - want).abs() < 1e-15);
    assert!((p - 0.6204).abs() < 1e-4);
    let p8 = predict_logistic(&q, &[1.0], ProbitScale::PiOver8).unwrap();
    assert!(p8 > p);

    let p0 = probit_moments(&[0.7], &[0.0], &[2.0], ProbitScale::Pi);
    assert!((p0 - sigmoid(1.4)).abs() < 1e-15);
    assert!(predict_logistic(&q, &[1.0, 2.0], ProbitScale::Pi).is_err());
}

#[test]
fn predict_mc_examples() {
    let logit = ModelSpec::logistic_regression(1, true);
    let q = GaussianMeanField::from_mean_var(&[0.8, -0.3], &[0.5, 0.2]).unwrap();
    let single = logit.predict_mc(&q, &[1.3], 1, 9).unwrap();
    let theta = q.sample(1, 9).unwrap().remove(0);
    let direct = logit.forward_proba(&theta, &[1.3]);
    assert!((single[0] - direct[0]).abs() < 1e-15);

    let net = ModelSpec::bnn_classifier(2, vec![4], 3);
    let mean: Vec<f64> = (0..net.param_dim()).map(|i| (i as f64 * 0.37).sin()).collect();
    let zero = vec![0.0; mean.len()];
    let a = net.predict_mc_moments(&mean, &zero, &[0.5, -1.0], 1, 0).unwrap();
    let b = net.predict_mc_moments(&mean, &zero, &[0.5, -1.0], 50, 123).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-15);
    }
    assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    // Activation integral by dense trapezoid quadrature.
    let x = [1.3];
    let (m, v) = q.mean_var().unwrap();
    let am = m[0] * x[0] + m[1];
    let av = v[0] * x[0] * x[0] + v[1];
    let n = 20001;
    let (lo, hi) = (am - 12.0 * av.sqrt(), am + 12.0 * av.sqrt());
    let h = (hi - lo) / (n - 1) as f64;
    let mut grid = 0.0;
    for i in 0..n {
        let a = lo + h * i as f64;
        let dens = (-(a - am).powi(2) / (2.0 * av)).exp() / (2.0 * std::f64::consts::PI * av).sqrt();
        let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        grid += w * h * dens / (1.0 + (-a).exp());
    }
    let mc = logit.predict_mc(&q, &x, 100_000, 4).unwrap();
    assert!((mc[1] - grid).abs() < 0.005);
}

#[test]
fn exact_posterior_examples() {
    let lin = ModelSpec::linear_regression(1, 1.0);
    let prior = GaussianMeanField::standard_normal(1);
    let q = exact_posterior(&lin, &prior, &one_point(vec![1.0], 2.0)).unwrap();
    assert_eq!(q, GaussianMeanField::new(vec![2.0], vec![-1.0]).unwrap());
    assert_eq!(exact_posterior(&lin, &prior, &Dataset::empty(1)).unwrap(), prior);

    let lin2 = ModelSpec::linear_regression(2, 1.0);
    let data = Dataset::new(vec![vec![1.0, 1.0], vec![1.0, 0.5]], vec![0.0, 1.0]).unwrap();
    assert!(matches!(
        exact_posterior(&lin2, &GaussianMeanField::standard_normal(2), &data),
        Err(PviError::NotDiagonal { .. })
    ));
}

#[test]
fn linear_expectation_matches_moment_identity() {
    let lin = ModelSpec::linear_regression(1, 1.0);
    let q = GaussianMeanField::from_mean_var(&[1.0], &[0.5]).unwrap();
    let e = lin
        .expected_log_lik(&one_point(vec![1.0], 2.0), &q, Estimator::Quadrature)
        .unwrap();
    let want = -0.5 * ((2.0f64 - 1.0).powi(2) + 0.5) - 0.5 * (2.0 * std::f64::consts::PI).ln();
    assert!((e.value - want).abs() < 1e-14);
    let g = e.mean_param_grad(&[1.0]);
    // E = -(y - mu1)^2/2 - (mu2 - mu1^2)/2 + c, so dE/dmu1 = y, dE/dmu2 = -1/2.
    assert!((g.eta1[0] - 2.0).abs() < 1e-14 && (g.eta2[0] + 0.5).abs() < 1e-14);
}

#[test]
fn logistic_expectation_gradients_match_finite_differences() {
    let logit = ModelSpec::logistic_regression(2, true);
    let data = Dataset::new(
        vec![vec![0.5, -1.0], vec![-1.5, 0.3], vec![0.2, 2.0]],
        vec![1.0, 0.0, 1.0],
    )
    .unwrap();
    let m = [0.3, -0.4, 0.1];
    let v = [0.5, 0.2, 1.1];
    let e = logit
        .expected_log_lik_moments(&data, &m, &v, Estimator::Quadrature)
        .unwrap();
    let fm = central_diff(
        |mm| {
            logit
                .expected_log_lik_moments(&data, mm, &v, Estimator::Quadrature)
                .unwrap()
                .value
        },
        &m,
        1e-5,
    );
    let fv = central_diff(
        |vv| {
            logit
                .expected_log_lik_moments(&data, &m, vv, Estimator::Quadrature)
                .unwrap()
                .value
        },
        &v,
        1e-5,
    );
    assert!(rel_close(&e.grad_m, &fm, 1e-6));
    assert!(rel_close(&e.grad_v, &fv, 1e-6), "{:?} {:?}", e.grad_v, fv);
}

#[test]
fn monte_carlo_agrees_with_quadrature() {
    let logit = ModelSpec::logistic_regression(2, true);
    let data = Dataset::new(vec![vec![0.5, -1.0], vec![-1.5, 0.3]], vec![1.0, 0.0]).unwrap();
    let m = [0.3, -0.4, 0.1];
    let v = [0.5, 0.2, 1.1];
    let quad = logit
        .expected_log_lik_moments(&data, &m, &v, Estimator::Quadrature)
        .unwrap();
    let mc = logit
        .expected_log_lik_moments(
            &data,
            &m,
            &v,
            Estimator::MonteCarlo {
                samples: 20_000,
                seed: 3,
            },
        )
        .unwrap();
    assert!((quad.value - mc.value).abs() < 0.02);
    assert!(rel_close(&mc.grad_m, &quad.grad_m, 0.05));
    assert!(
        logit
            .expected_log_lik_moments(&data, &m, &v, Estimator::Quadrature)
            .unwrap()
            == quad
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn closed_form_gradients_match_finite_differences(
        theta in proptest::collection::vec(-2.0..2.0f64, 4),
        xs in proptest::collection::vec(-2.0..2.0f64, 9),
        labels in proptest::collection::vec(0u8..2, 3),
    ) {
        let rows: Vec<Vec<f64>> = xs.chunks(3).map(|c| c.to_vec()).collect();
        let ys: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        let data = Dataset::new(rows, ys.clone()).unwrap();
        for spec in [ModelSpec::logistic_regression(3, true), {
            let mut s = ModelSpec::linear_regression(3, 0.7);
            s.bias = true;
            s
        }] {
            let g = spec.grad_log_lik(&data, &theta).unwrap();
            let fd = central_diff(|t| spec.log_lik(&data, t).unwrap(), &theta, 1e-5);
            prop_assert!(rel_close(&g, &fd, 1e-4));
        }
    }

    #[test]
    fn log_lik_is_additive_over_partitions(cut in 0usize..6, theta in proptest::collection::vec(-1.0..1.0f64, 2)) {
        let spec = ModelSpec::logistic_regression(1, true);
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 0.4 - 1.0]).collect();
        let data = Dataset::new(rows, vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let idx: Vec<usize> = (0..6).collect();
        let (a, b) = idx.split_at(cut);
        let whole = spec.log_lik(&data, &theta).unwrap();
        let parts = spec.log_lik(&data.subset(a), &theta).unwrap() + spec.log_lik(&data.subset(b), &theta).unwrap();
        prop_assert!((whole - parts).abs() <= 1e-12 * whole.abs().max(1.0));
    }
}
