//! Likelihoods, gradients and posterior predictives.
//!
//! Three model kinds are supported: conjugate linear regression, logistic
//! regression and a small ReLU network classifier. Linear and logistic
//! models act on the augmented input `x~ = [x, 1]` when `bias` is set.

pub mod bnn;
pub mod quadrature;
pub mod tape;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{PviError, Result};
use crate::expfam::{ApproxFactor, GaussianMeanField, NaturalParams};
pub use tape::{GradTape, Var};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Row-major design matrix with targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<f64>,
    pub n_features: usize,
    pub targets: Vec<f64>,
    pub feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(rows: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.len());
        if rows.len() != targets.len() {
            return Err(PviError::DimensionMismatch {
                expected: rows.len(),
                found: targets.len(),
            });
        }
        let mut inputs = Vec::with_capacity(rows.len() * d);
        for r in &rows {
            if r.len() != d {
                return Err(PviError::DimensionMismatch {
                    expected: d,
                    found: r.len(),
                });
            }
            inputs.extend_from_slice(r);
        }
        Self::from_flat(inputs, d, targets)
    }

    pub fn from_flat(inputs: Vec<f64>, n_features: usize, targets: Vec<f64>) -> Result<Self> {
        if inputs.len() != n_features * targets.len() {
            return Err(PviError::DimensionMismatch {
                expected: n_features * targets.len(),
                found: inputs.len(),
            });
        }
        if inputs.iter().chain(&targets).any(|v| !v.is_finite()) {
            return Err(PviError::Config("dataset contains non-finite entries".into()));
        }
        let feature_names = (0..n_features).map(|i| format!("x{i}")).collect();
        Ok(Self {
            inputs,
            n_features,
            targets,
            feature_names,
        })
    }

    /// A dataset with no rows.
    pub fn empty(n_features: usize) -> Self {
        Self {
            inputs: Vec::new(),
            n_features,
            targets: Vec::new(),
            feature_names: (0..n_features).map(|i| format!("x{i}")).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.n_features..(i + 1) * self.n_features]
    }

    /// Rows in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut inputs = Vec::with_capacity(idx.len() * self.n_features);
        let mut targets = Vec::with_capacity(idx.len());
        for &i in idx {
            inputs.extend_from_slice(self.row(i));
            targets.push(self.targets[i]);
        }
        Dataset {
            inputs,
            n_features: self.n_features,
            targets,
            feature_names: self.feature_names.clone(),
        }
    }

    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let d = parts.first().map_or(0, |p| p.n_features);
        let mut out = Dataset::empty(d);
        if let Some(p) = parts.first() {
            out.feature_names = p.feature_names.clone();
        }
        for p in parts {
            if p.n_features != d {
                return Err(PviError::DimensionMismatch {
                    expected: d,
                    found: p.n_features,
                });
            }
            out.inputs.extend_from_slice(&p.inputs);
            out.targets.extend_from_slice(&p.targets);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LinearRegression,
    LogisticRegression,
    BnnClassifier,
}

/// Scale inside the probit predictive denominator `sqrt(1 + c * s^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbitScale {
    #[default]
    Pi,
    PiOver8,
}

impl ProbitScale {
    pub fn value(self) -> f64 {
        match self {
            ProbitScale::Pi => std::f64::consts::PI,
            ProbitScale::PiOver8 => std::f64::consts::PI / 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    /// Append a constant 1 to inputs (linear and logistic models).
    pub bias: bool,
    /// Observation noise variance (linear regression only).
    pub noise_variance: f64,
    /// Hidden layer widths (network only).
    pub layer_widths: Vec<usize>,
    /// Output classes (network only).
    pub n_classes: usize,
}

/// How expectations under `q` are computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Estimator {
    /// Closed form for linear regression, 20-node Gauss-Hermite over the
    /// activation for logistic regression.
    Quadrature,
    /// Reparameterized Monte Carlo with `samples` draws.
    MonteCarlo { samples: usize, seed: u64 },
}

/// `E_q[log p(y|theta)]` with its derivatives in `(m, v)` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedLogLik {
    pub value: f64,
    pub grad_m: Vec<f64>,
    pub grad_v: Vec<f64>,
}

impl ExpectedLogLik {
    fn zeros(d: usize) -> Self {
        Self {
            value: 0.0,
            grad_m: vec![0.0; d],
            grad_v: vec![0.0; d],
        }
    }

    /// Derivatives with respect to the mean parameters `(mu1, mu2)`:
    /// `dE/dmu2 = dE/dv` and `dE/dmu1 = dE/dm - 2 m dE/dv`.
    pub fn mean_param_grad(&self, mean: &[f64]) -> ApproxFactor {
        let eta1 = self
            .grad_m
            .iter()
            .zip(&self.grad_v)
            .zip(mean)
            .map(|((gm, gv), m)| gm - 2.0 * m * gv)
            .collect();
        ApproxFactor {
            eta1,
            eta2: self.grad_v.clone(),
            owner: 0,
        }
    }
}

pub(crate) fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl ModelSpec {
    pub fn linear_regression(input_dim: usize, noise_variance: f64) -> Self {
        Self {
            kind: ModelKind::LinearRegression,
            input_dim,
            bias: false,
            noise_variance,
            layer_widths: Vec::new(),
            n_classes: 0,
        }
    }

    pub fn logistic_regression(input_dim: usize, bias: bool) -> Self {
        Self {
            kind: ModelKind::LogisticRegression,
            input_dim,
            bias,
            noise_variance: 1.0,
            layer_widths: Vec::new(),
            n_classes: 2,
        }
    }

    pub fn bnn_classifier(input_dim: usize, layer_widths: Vec<usize>, n_classes: usize) -> Self {
        Self {
            kind: ModelKind::BnnClassifier,
            input_dim,
            bias: true,
            noise_variance: 1.0,
            layer_widths,
            n_classes,
        }
    }

    /// Flattened parameter count `D`.
    pub fn param_dim(&self) -> usize {
        match self.kind {
            ModelKind::LinearRegression | ModelKind::LogisticRegression => self.input_dim + usize::from(self.bias),
            ModelKind::BnnClassifier => bnn::param_count(&self.sizes()),
        }
    }

    fn sizes(&self) -> Vec<usize> {
        bnn::layer_sizes(self.input_dim, &self.layer_widths, self.n_classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(PviError::Config("model.input_dim must be positive".into()));
        }
        match self.kind {
            ModelKind::LinearRegression if !(self.noise_variance > 0.0) => {
                Err(PviError::Config("model.noise_variance must be positive".into()))
            }
            ModelKind::BnnClassifier if self.n_classes < 2 => {
                Err(PviError::Config("model.n_classes must be at least 2".into()))
            }
            ModelKind::BnnClassifier if self.layer_widths.contains(&0) => {
                Err(PviError::Config("model.layer_widths must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    /// The augmented input `x~`.
    pub fn augment(&self, x: &[f64]) -> Vec<f64> {
        let mut v = x.to_vec();
        if self.bias && self.kind != ModelKind::BnnClassifier {
            v.push(1.0);
        }
        v
    }

    fn activation(&self, x: &[f64], theta: &[f64]) -> f64 {
        let a: f64 = x.iter().zip(theta).map(|(a, b)| a * b).sum();
        if self.bias {
            a + theta[self.input_dim]
        } else {
            a
        }
    }

    fn check(&self, data: &Dataset, theta_len: usize) -> Result<()> {
        if data.n_features != self.input_dim && !data.is_empty() {
            return Err(PviError::DimensionMismatch {
                expected: self.input_dim,
                found: data.n_features,
            });
        }
        if theta_len != self.param_dim() {
            return Err(PviError::DimensionMismatch {
                expected: self.param_dim(),
                found: theta_len,
            });
        }
        Ok(())
    }

    /// `log p(y_n | theta)` for one row.
    pub fn log_lik_point(&self, x: &[f64], y: f64, theta: &[f64]) -> f64 {
        match self.kind {
            ModelKind::LinearRegression => {
                let r = y - self.activation(x, theta);
                -0.5 * (LN_2PI + self.noise_variance.ln()) - r * r / (2.0 * self.noise_variance)
            }
            ModelKind::LogisticRegression => {
                let s = 2.0 * y - 1.0;
                log_sigmoid(s * self.activation(x, theta))
            }
            ModelKind::BnnClassifier => {
                let z = bnn::logits(&self.sizes(), theta, x);
                bnn::log_softmax(&z)[y as usize]
            }
        }
    }

    /// `sum_n log p(y_n | theta)`.
    pub fn log_lik(&self, data: &Dataset, theta: &[f64]) -> Result<f64> {
        self.check(data, theta.len())?;
        Ok((0..data.len())
            .map(|i| self.log_lik_point(data.row(i), data.targets[i], theta))
            .sum())
    }

    /// Exact gradient of [`ModelSpec::log_lik`].
    pub fn grad_log_lik(&self, data: &Dataset, theta: &[f64]) -> Result<Vec<f64>> {
        self.check(data, theta.len())?;
        let d = self.param_dim();
        let mut g = vec![0.0; d];
        match self.kind {
            ModelKind::LinearRegression | ModelKind::LogisticRegression => {
                for i in 0..data.len() {
                    let x = data.row(i);
                    let y = data.targets[i];
                    let a = self.activation(x, theta);
                    let c = if self.kind == ModelKind::LinearRegression {
                        (y - a) / self.noise_variance
                    } else {
                        y - sigmoid(a)
                    };
                    for (gj, xj) in g.iter_mut().zip(x) {
                        *gj += c * xj;
                    }
                    if self.bias {
                        g[self.input_dim] += c;
                    }
                }
            }
            ModelKind::BnnClassifier => {
                let sizes = self.sizes();
                let mut tape = GradTape::new();
                for i in 0..data.len() {
                    tape.clear();
                    let (out, leaves) =
                        bnn::record_log_lik(&mut tape, &sizes, theta, data.row(i), data.targets[i] as usize);
                    for (gj, v) in g.iter_mut().zip(tape.gradient(out, &leaves)) {
                        *gj += v;
                    }
                }
            }
        }
        Ok(g)
    }

    /// `E_q[log p(y|theta)]` and its `(m, v)` derivatives.
    pub fn expected_log_lik(
        &self,
        data: &Dataset,
        q: &GaussianMeanField,
        estimator: Estimator,
    ) -> Result<ExpectedLogLik> {
        let (m, v) = q.mean_var()?;
        self.expected_log_lik_moments(data, &m, &v, estimator)
    }

    pub fn expected_log_lik_moments(
        &self,
        data: &Dataset,
        mean: &[f64],
        var: &[f64],
        estimator: Estimator,
    ) -> Result<ExpectedLogLik> {
        self.check(data, mean.len())?;
        match (estimator, self.kind) {
            (Estimator::Quadrature, ModelKind::LinearRegression) => Ok(self.expected_linear(data, mean, var)),
            (Estimator::Quadrature, ModelKind::LogisticRegression) => Ok(self.expected_logistic(data, mean, var)),
            (Estimator::Quadrature, ModelKind::BnnClassifier) => Err(PviError::Unsupported(
                "quadrature expectations for the network model; use monte_carlo".into(),
            )),
            (Estimator::MonteCarlo { samples, seed }, _) => self.expected_mc(data, mean, var, samples.max(1), seed),
        }
    }

    fn moments_of_activation(&self, x: &[f64], mean: &[f64], var: &[f64]) -> (f64, f64) {
        let mut am = 0.0;
        let mut av = 0.0;
        for j in 0..self.input_dim {
            am += x[j] * mean[j];
            av += x[j] * x[j] * var[j];
        }
        if self.bias {
            am += mean[self.input_dim];
            av += var[self.input_dim];
        }
        (am, av)
    }

    fn scatter(&self, out: &mut [f64], x: &[f64], c: f64, squared: bool) {
        for j in 0..self.input_dim {
            out[j] += if squared { c * x[j] * x[j] } else { c * x[j] };
        }
        if self.bias {
            out[self.input_dim] += c;
        }
    }

    fn expected_linear(&self, data: &Dataset, mean: &[f64], var: &[f64]) -> ExpectedLogLik {
        let s2 = self.noise_variance;
        let mut e = ExpectedLogLik::zeros(mean.len());
        for i in 0..data.len() {
            let x = data.row(i);
            let y = data.targets[i];
            let (am, av) = self.moments_of_activation(x, mean, var);
            let r = y - am;
            e.value += -0.5 * (LN_2PI + s2.ln()) - (r * r + av) / (2.0 * s2);
            self.scatter(&mut e.grad_m, x, r / s2, false);
            self.scatter(&mut e.grad_v, x, -0.5 / s2, true);
        }
        e
    }

    fn expected_logistic(&self, data: &Dataset, mean: &[f64], var: &[f64]) -> ExpectedLogLik {
        let (z, w) = quadrature::standard_normal_rule();
        let mut e = ExpectedLogLik::zeros(mean.len());
        for i in 0..data.len() {
            let x = data.row(i);
            let s = 2.0 * data.targets[i] - 1.0;
            let (am, av) = self.moments_of_activation(x, mean, var);
            let sd = av.sqrt();
            // Variance derivative of the quadrature sum itself.
            let (mut f, mut f1, mut dvar) = (0.0, 0.0, 0.0);
            for (zk, wk) in z.iter().zip(w) {
                let a = am + sd * zk;
                let d1 = s * sigmoid(-s * a);
                f += wk * log_sigmoid(s * a);
                f1 += wk * d1;
                dvar += if sd > 0.0 {
                    wk * d1 * zk / (2.0 * sd)
                } else {
                    -0.5 * wk * sigmoid(a) * sigmoid(-a)
                };
            }
            e.value += f;
            self.scatter(&mut e.grad_m, x, f1, false);
            self.scatter(&mut e.grad_v, x, dvar, true);
        }
        e
    }

    fn expected_mc(
        &self,
        data: &Dataset,
        mean: &[f64],
        var: &[f64],
        samples: usize,
        seed: u64,
    ) -> Result<ExpectedLogLik> {
        let d = mean.len();
        let sd: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut e = ExpectedLogLik::zeros(d);
        let mut eps = vec![0.0; d];
        let mut theta = vec![0.0; d];
        for _ in 0..samples {
            for j in 0..d {
                eps[j] = StandardNormal.sample(&mut rng);
                theta[j] = mean[j] + sd[j] * eps[j];
            }
            e.value += self.log_lik(data, &theta)?;
            let g = self.grad_log_lik(data, &theta)?;
            for j in 0..d {
                e.grad_m[j] += g[j];
                if sd[j] > 0.0 {
                    e.grad_v[j] += g[j] * eps[j] / (2.0 * sd[j]);
                }
            }
        }
        let inv = 1.0 / samples as f64;
        e.value *= inv;
        for j in 0..d {
            e.grad_m[j] *= inv;
            e.grad_v[j] *= inv;
        }
        if !e.value.is_finite() {
            return Err(PviError::NonFiniteObjective(
                "Monte Carlo expected log-likelihood".into(),
            ));
        }
        Ok(e)
    }

    /// Natural parameters of the exact Gaussian likelihood of `data`
    /// (linear regression with a diagonal design only).
    pub fn likelihood_factor(&self, data: &Dataset) -> Result<ApproxFactor> {
        if self.kind != ModelKind::LinearRegression {
            return Err(PviError::Unsupported(
                "closed-form likelihood factors exist only for linear regression".into(),
            ));
        }
        let d = self.param_dim();
        let mut gram = vec![0.0; d * d];
        let mut xty = vec![0.0; d];
        for i in 0..data.len() {
            let x = self.augment(data.row(i));
            for a in 0..d {
                xty[a] += x[a] * data.targets[i];
                for b in 0..d {
                    gram[a * d + b] += x[a] * x[b];
                }
            }
        }
        let mass: f64 = (0..d)
            .flat_map(|a| (0..d).filter(move |&b| b != a).map(move |b| (a, b)))
            .map(|(a, b)| gram[a * d + b].abs())
            .sum();
        if mass > 1e-10 {
            return Err(PviError::NotDiagonal { mass });
        }
        let s2 = self.noise_variance;
        Ok(ApproxFactor {
            eta1: xty.iter().map(|v| v / s2).collect(),
            eta2: (0..d).map(|a| -gram[a * d + a] / (2.0 * s2)).collect(),
            owner: 0,
        })
    }

    /// Single-output predictive probability `p(y = 1 | x)` from the probit
    /// approximation.
    pub fn predict_logistic(&self, q: &GaussianMeanField, x: &[f64], scale: ProbitScale) -> Result<f64> {
        predict_logistic(q, &self.augment(x), scale)
    }

    /// Monte Carlo predictive class probabilities.
    pub fn predict_mc(&self, q: &GaussianMeanField, x: &[f64], samples: usize, seed: u64) -> Result<Vec<f64>> {
        let (m, v) = q.mean_var()?;
        self.predict_mc_moments(&m, &v, x, samples, seed)
    }

    /// As [`ModelSpec::predict_mc`] from explicit moments; zero variance is
    /// permitted.
    pub fn predict_mc_moments(
        &self,
        mean: &[f64],
        var: &[f64],
        x: &[f64],
        samples: usize,
        seed: u64,
    ) -> Result<Vec<f64>> {
        if mean.len() != self.param_dim() {
            return Err(PviError::DimensionMismatch {
                expected: self.param_dim(),
                found: mean.len(),
            });
        }
        if x.len() != self.input_dim {
            return Err(PviError::DimensionMismatch {
                expected: self.input_dim,
                found: x.len(),
            });
        }
        let samples = samples.max(1);
        let sd: Vec<f64> = var.iter().map(|v| v.max(0.0).sqrt()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes = match self.kind {
            ModelKind::LogisticRegression => 2,
            ModelKind::BnnClassifier => self.n_classes,
            ModelKind::LinearRegression => {
                return Err(PviError::Unsupported(
                    "class probabilities for linear regression".into(),
                ))
            }
        };
        let mut acc = vec![0.0; classes];
        let mut theta = vec![0.0; mean.len()];
        for _ in 0..samples {
            for j in 0..mean.len() {
                let z: f64 = StandardNormal.sample(&mut rng);
                theta[j] = mean[j] + sd[j] * z;
            }
            let p = self.forward_proba(&theta, x);
            for (a, b) in acc.iter_mut().zip(p) {
                *a += b;
            }
        }
        let total: f64 = acc.iter().sum();
        Ok(acc.into_iter().map(|a| a / total).collect())
    }

    /// Class probabilities at a fixed `theta`.
    pub fn forward_proba(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        match self.kind {
            ModelKind::LogisticRegression => {
                let p = sigmoid(self.activation(x, theta));
                vec![1.0 - p, p]
            }
            ModelKind::BnnClassifier => bnn::softmax(&bnn::logits(&self.sizes(), theta, x)),
            ModelKind::LinearRegression => vec![self.activation(x, theta)],
        }
    }

    /// Gaussian predictive `N(y; x~ m, noise + sum x~^2 v)` for linear
    /// regression, as `(mean, variance)`.
    pub fn predict_linear(&self, q: &GaussianMeanField, x: &[f64]) -> Result<(f64, f64)> {
        let (m, v) = q.mean_var()?;
        let (am, av) = self.moments_of_activation(x, &m, &v);
        Ok((am, av + self.noise_variance))
    }
}

/// `sigma(m.x / sqrt(1 + c * x' diag(v) x))` for the augmented input `x`.
pub fn predict_logistic(q: &GaussianMeanField, x: &[f64], scale: ProbitScale) -> Result<f64> {
    if x.len() != q.dim() {
        return Err(PviError::DimensionMismatch {
            expected: q.dim(),
            found: x.len(),
        });
    }
    let (m, v) = q.mean_var()?;
    Ok(probit_moments(&m, &v, x, scale))
}

pub(crate) fn probit_moments(m: &[f64], v: &[f64], x: &[f64], scale: ProbitScale) -> f64 {
    let mu: f64 = m.iter().zip(x).map(|(a, b)| a * b).sum();
    let s2: f64 = v.iter().zip(x).map(|(a, b)| a * b * b).sum();
    sigmoid(mu / (1.0 + scale.value() * s2).sqrt())
}

/// Exact conjugate posterior `prior * p(y|theta)` for linear regression
/// whose design satisfies `X'X` diagonal.
pub fn exact_posterior(spec: &ModelSpec, prior: &GaussianMeanField, data: &Dataset) -> Result<GaussianMeanField> {
    if spec.kind != ModelKind::LinearRegression {
        return Err(PviError::Unsupported(
            "exact posteriors exist only for linear regression".into(),
        ));
    }
    if prior.dim() != spec.param_dim() {
        return Err(PviError::DimensionMismatch {
            expected: spec.param_dim(),
            found: prior.dim(),
        });
    }
    let lik = spec.likelihood_factor(data)?;
    Ok(prior.add_scaled(&lik, 1.0))
}

#[cfg(test)]
mod tests;
