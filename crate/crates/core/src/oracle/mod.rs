//! Brute-force reference computations for one- and two-parameter models.
//!
//! Densities are tabulated on a regular grid and integrated with the
//! trapezoid rule. These routines are slow and exist to check the fast
//! paths.

use crate::error::{PviError, Result};
use crate::expfam::{GaussianMeanField, NaturalParams};
use crate::models::{Dataset, ModelSpec};

/// Points per dimension when none is given.
pub const DEFAULT_RESOLUTION_1D: usize = 4001;
pub const DEFAULT_RESOLUTION_2D: usize = 401;

/// Normalized posterior tabulated on a grid.
#[derive(Debug, Clone)]
pub struct GridPosterior {
    pub bounds: Vec<(f64, f64)>,
    pub resolution: usize,
    /// Normalized log density at each grid node, row-major in 2D.
    pub log_density: Vec<f64>,
    /// Log normalizer of `base(theta) * p(y|theta)`.
    pub log_z: f64,
    pub mean: Vec<f64>,
    pub second_moment: Vec<f64>,
}

fn trapezoid_weights(n: usize, h: f64) -> Vec<f64> {
    (0..n).map(|i| if i == 0 || i + 1 == n { 0.5 * h } else { h }).collect()
}

fn log_sum_weighted(logs: &[f64], weights: &[f64]) -> f64 {
    let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logs.iter().zip(weights).map(|(l, w)| w * (l - mx).exp()).sum();
    mx + s.ln()
}

/// Log density of a (normalizable) diagonal Gaussian.
pub fn gaussian_log_density(q: &GaussianMeanField, theta: &[f64]) -> Result<f64> {
    let a = q.log_partition()?;
    Ok(q.eta1
        .iter()
        .zip(&q.eta2)
        .zip(theta)
        .map(|((e1, e2), t)| e1 * t + e2 * t * t)
        .sum::<f64>()
        - a)
}

impl GridPosterior {
    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    fn axes(&self) -> Vec<Vec<f64>> {
        self.bounds
            .iter()
            .map(|&(lo, hi)| {
                let h = (hi - lo) / (self.resolution - 1) as f64;
                (0..self.resolution).map(|i| lo + h * i as f64).collect()
            })
            .collect()
    }

    fn weights(&self) -> Vec<f64> {
        let ws: Vec<Vec<f64>> = self
            .bounds
            .iter()
            .map(|&(lo, hi)| trapezoid_weights(self.resolution, (hi - lo) / (self.resolution - 1) as f64))
            .collect();
        if ws.len() == 1 {
            ws[0].clone()
        } else {
            ws[0].iter().flat_map(|a| ws[1].iter().map(move |b| a * b)).collect()
        }
    }

    fn nodes(&self) -> Vec<Vec<f64>> {
        let axes = self.axes();
        if axes.len() == 1 {
            axes[0].iter().map(|t| vec![*t]).collect()
        } else {
            axes[0]
                .iter()
                .flat_map(|a| axes[1].iter().map(move |b| vec![*a, *b]))
                .collect()
        }
    }

    /// Posterior variances.
    pub fn variance(&self) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.second_moment)
            .map(|(m, s)| s - m * m)
            .collect()
    }

    /// Trapezoid-rule `E[f(theta)]` under the grid density.
    pub fn expectation<F: Fn(&[f64]) -> f64>(&self, f: F) -> f64 {
        self.nodes()
            .iter()
            .zip(self.weights())
            .zip(&self.log_density)
            .map(|((t, w), l)| w * l.exp() * f(t))
            .sum()
    }
}

fn default_bounds(base: &GaussianMeanField) -> Result<Vec<(f64, f64)>> {
    let (m, v) = base.mean_var()?;
    Ok(m.iter()
        .zip(&v)
        .map(|(m, v)| (m - 10.0 * v.sqrt(), m + 10.0 * v.sqrt()))
        .collect())
}

/// Tabulate `base(theta) * p(y|theta)` and normalize it.
///
/// `base` is usually the prior, or a cavity when the target is a tilted
/// distribution. `bounds` defaults to the base mean plus or minus ten
/// standard deviations.
pub fn grid_posterior(
    model: &ModelSpec,
    base: &GaussianMeanField,
    data: &Dataset,
    bounds: Option<Vec<(f64, f64)>>,
    resolution: Option<usize>,
) -> Result<GridPosterior> {
    let d = base.dim();
    if d > 2 {
        return Err(PviError::DimensionTooHigh(d));
    }
    if d != model.param_dim() {
        return Err(PviError::DimensionMismatch {
            expected: model.param_dim(),
            found: d,
        });
    }
    let bounds = match bounds {
        Some(b) => b,
        None => default_bounds(base)?,
    };
    let resolution = resolution.unwrap_or(if d == 1 {
        DEFAULT_RESOLUTION_1D
    } else {
        DEFAULT_RESOLUTION_2D
    });
    let mut gp = GridPosterior {
        bounds,
        resolution,
        log_density: Vec::new(),
        log_z: 0.0,
        mean: vec![0.0; d],
        second_moment: vec![0.0; d],
    };
    let nodes = gp.nodes();
    let weights = gp.weights();
    let mut logs = Vec::with_capacity(nodes.len());
    for t in &nodes {
        logs.push(gaussian_log_density(base, t)? + model.log_lik(data, t)?);
    }
    let log_z = log_sum_weighted(&logs, &weights);
    for l in &mut logs {
        *l -= log_z;
    }
    for ((t, w), l) in nodes.iter().zip(&weights).zip(&logs) {
        let p = w * l.exp();
        for ((m, s), &x) in gp.mean.iter_mut().zip(&mut gp.second_moment).zip(t) {
            *m += p * x;
            *s += p * x * x;
        }
    }
    gp.log_density = logs;
    gp.log_z = log_z;
    Ok(gp)
}

/// `KL(q || grid density)` by the trapezoid rule.
pub fn kl_to_grid(q: &GaussianMeanField, gp: &GridPosterior) -> Result<f64> {
    if q.dim() > 2 {
        return Err(PviError::DimensionTooHigh(q.dim()));
    }
    if q.dim() != gp.dim() {
        return Err(PviError::DimensionMismatch {
            expected: gp.dim(),
            found: q.dim(),
        });
    }
    let mut kl = 0.0;
    for ((t, w), lp) in gp.nodes().iter().zip(gp.weights()).zip(&gp.log_density) {
        let lq = gaussian_log_density(q, t)?;
        let qv = lq.exp();
        if qv > 0.0 {
            kl += w * qv * (lq - lp);
        }
    }
    Ok(kl.max(0.0))
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn fd_gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(x.len());
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let a = f(&xp);
        xp[i] = x[i] - h;
        let b = f(&xp);
        xp[i] = x[i];
        if !a.is_finite() || !b.is_finite() {
            return Err(PviError::NonFiniteEvaluation(i));
        }
        out.push((a - b) / (2.0 * h));
    }
    Ok(out)
}

/// Log normalizer, mean and variance of a univariate unnormalized log
/// density on `[lo, hi]`.
pub fn grid_moments_1d<F: FnMut(f64) -> f64>(mut log_f: F, lo: f64, hi: f64, n: usize) -> (f64, f64, f64) {
    let h = (hi - lo) / (n - 1) as f64;
    let xs: Vec<f64> = (0..n).map(|i| lo + h * i as f64).collect();
    let logs: Vec<f64> = xs.iter().map(|&x| log_f(x)).collect();
    let w = trapezoid_weights(n, h);
    let log_z = log_sum_weighted(&logs, &w);
    let (mut m1, mut m2) = (0.0, 0.0);
    for ((x, l), w) in xs.iter().zip(&logs).zip(&w) {
        let p = w * (l - log_z).exp();
        m1 += p * x;
        m2 += p * x * x;
    }
    (log_z, m1, m2 - m1 * m1)
}

/// One power-EP step for a single-parameter model by brute force:
/// moment-match `q_prev * (p(y|theta) / t_prev)^alpha` and return the
/// resulting Gaussian.
pub fn grid_pep_tilted(
    model: &ModelSpec,
    q_prev: &GaussianMeanField,
    t_prev: &crate::expfam::ApproxFactor,
    data: &Dataset,
    alpha: f64,
    resolution: usize,
) -> Result<GaussianMeanField> {
    if q_prev.dim() != 1 {
        return Err(PviError::DimensionTooHigh(q_prev.dim()));
    }
    let (m, v) = q_prev.mean_var()?;
    let (lo, hi) = (m[0] - 12.0 * v[0].sqrt(), m[0] + 12.0 * v[0].sqrt());
    let mut err = None;
    let (_, mean, var) = grid_moments_1d(
        |t| {
            let ll = model.log_lik(data, &[t]).unwrap_or_else(|e| {
                err.get_or_insert(e);
                0.0
            });
            let lt = t_prev.eta1[0] * t + t_prev.eta2[0] * t * t;
            q_prev.eta1[0] * t + q_prev.eta2[0] * t * t + alpha * (ll - lt)
        },
        lo,
        hi,
        resolution,
    );
    if let Some(e) = err {
        return Err(e);
    }
    GaussianMeanField::from_mean_var(&[mean], &[var])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Estimator;

    fn conjugate() -> (ModelSpec, GaussianMeanField, Dataset) {
        (
            ModelSpec::linear_regression(1, 1.0),
            GaussianMeanField::standard_normal(1),
            Dataset::new(vec![vec![1.0]], vec![2.0]).unwrap(),
        )
    }

    #[test]
    fn conjugate_grid_matches_closed_form() {
        let (model, prior, data) = conjugate();
        let gp = grid_posterior(&model, &prior, &data, None, None).unwrap();
        assert!((gp.mean[0] - 1.0).abs() < 1e-6);
        assert!((gp.variance()[0] - 0.5).abs() < 1e-6);
        // log N(2; 0, 2)
        let want = -0.5 * (2.0 * std::f64::consts::PI * 2.0).ln() - 1.0;
        assert!((gp.log_z - want).abs() < 1e-6);
        assert!((want + 2.2655).abs() < 1e-4);
        let total = gp.expectation(|_| 1.0);
        assert!((total - 1.0).abs() < 1e-8);
        let exact = GaussianMeanField::from_mean_var(&[1.0], &[0.5]).unwrap();
        assert!(kl_to_grid(&exact, &gp).unwrap() <= 1e-6);
    }

    #[test]
    fn no_data_recovers_prior() {
        let (model, _, _) = conjugate();
        let prior = GaussianMeanField::from_mean_var(&[0.5], &[2.0]).unwrap();
        let gp = grid_posterior(&model, &prior, &Dataset::empty(1), None, None).unwrap();
        assert!((gp.mean[0] - 0.5).abs() < 1e-8);
        assert!((gp.variance()[0] - 2.0).abs() < 1e-8);
        assert!(gp.log_z.abs() < 1e-8);
    }

    #[test]
    fn logistic_grid_sign_and_refinement() {
        let model = ModelSpec::logistic_regression(1, false);
        let prior = GaussianMeanField::standard_normal(1);
        let pos = Dataset::new(vec![vec![1.5]], vec![1.0]).unwrap();
        let neg = Dataset::new(vec![vec![1.5]], vec![0.0]).unwrap();
        let gp = grid_posterior(&model, &prior, &pos, None, Some(401)).unwrap();
        let fine = grid_posterior(&model, &prior, &pos, None, Some(4001)).unwrap();
        assert!(gp.mean[0] > 0.0);
        assert!((gp.mean[0] - fine.mean[0]).abs() < 1e-5);
        assert!((gp.log_z - fine.log_z).abs() < 1e-5);
        let gn = grid_posterior(&model, &prior, &neg, None, Some(401)).unwrap();
        assert!(gn.mean[0] < 0.0);
    }

    #[test]
    fn resolution_doubling_is_stable_in_2d() {
        let model = ModelSpec::logistic_regression(1, true);
        let prior = GaussianMeanField::standard_normal(2);
        let data = Dataset::new(vec![vec![0.5], vec![-1.0], vec![2.0]], vec![1.0, 0.0, 1.0]).unwrap();
        let a = grid_posterior(&model, &prior, &data, None, Some(201)).unwrap();
        let b = grid_posterior(&model, &prior, &data, None, Some(401)).unwrap();
        for j in 0..2 {
            assert!((a.mean[j] - b.mean[j]).abs() < 1e-6);
            assert!((a.second_moment[j] - b.second_moment[j]).abs() < 1e-6);
        }
        assert!((a.log_z - b.log_z).abs() < 1e-6);
        assert!(matches!(
            grid_posterior(
                &ModelSpec::logistic_regression(2, true),
                &GaussianMeanField::standard_normal(3),
                &Dataset::empty(2),
                None,
                None
            ),
            Err(PviError::DimensionTooHigh(3))
        ));
    }

    #[test]
    fn fd_gradient_examples() {
        let g = fd_gradient(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        assert_eq!(fd_gradient(|_| 4.0, &[1.0, 2.0], 1e-5).unwrap(), vec![0.0, 0.0]);
        assert_eq!(
            fd_gradient(|x| if x[1] > 2.0 { f64::NAN } else { 0.0 }, &[0.0, 2.0], 1e-3),
            Err(PviError::NonFiniteEvaluation(1))
        );
    }

    #[test]
    fn elbo_identity_on_grid() {
        let model = ModelSpec::logistic_regression(1, false);
        let prior = GaussianMeanField::standard_normal(1);
        let data = Dataset::new(vec![vec![0.7], vec![-1.2], vec![2.0]], vec![1.0, 1.0, 0.0]).unwrap();
        let gp = grid_posterior(&model, &prior, &data, None, None).unwrap();
        for (m, v) in [(0.1, 0.4), (-0.5, 1.2), (0.9, 0.05)] {
            let q = GaussianMeanField::from_mean_var(&[m], &[v]).unwrap();
            let f = model.expected_log_lik(&data, &q, Estimator::Quadrature).unwrap().value - q.kl(&prior).unwrap();
            let kl = kl_to_grid(&q, &gp).unwrap();
            assert!((f + kl - gp.log_z).abs() < 1e-4, "{m} {v}: {}", f + kl - gp.log_z);
        }
    }
}
