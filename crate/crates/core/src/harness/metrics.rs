use crate::error::{PviError, Result};
use crate::expfam::{GaussianMeanField, NaturalParams};
use crate::localopt::global_free_energy;
use crate::models::{Dataset, Estimator, ModelKind, ModelSpec, ProbitScale};
use crate::seeds::mix;
use crate::server::{Evaluator, Metrics};

use super::config::{Cadence, EvalConfig};

/// Number of coordinates whose marginal KL to the prior is below
/// `threshold`. Coordinates identical to the prior always count.
pub fn pruned_count(q: &GaussianMeanField, prior: &GaussianMeanField, threshold: f64) -> Result<usize> {
    if q.dim() != prior.dim() {
        return Err(PviError::DimensionMismatch {
            expected: prior.dim(),
            found: q.dim(),
        });
    }
    let kl = q.kl_per_dim(prior)?;
    Ok((0..q.dim())
        .filter(|&i| kl[i] < threshold || (q.eta1[i] == prior.eta1[i] && q.eta2[i] == prior.eta2[i]))
        .count())
}

/// Predictive distribution of one test point.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictive {
    /// Class probabilities.
    Classes(Vec<f64>),
    /// Gaussian `(mean, variance)`.
    Gaussian(f64, f64),
}

/// Predictive distributions for every row of `data`. Logistic models use
/// the probit approximation; networks use Monte Carlo with a per-row seed
/// derived from `seed`.
pub fn predictive(
    model: &ModelSpec,
    q: &GaussianMeanField,
    data: &Dataset,
    scale: ProbitScale,
    samples: usize,
    seed: u64,
) -> Result<Vec<Predictive>> {
    (0..data.len())
        .map(|i| {
            let x = data.row(i);
            Ok(match model.kind {
                ModelKind::LogisticRegression => {
                    let p = model.predict_logistic(q, x, scale)?;
                    Predictive::Classes(vec![1.0 - p, p])
                }
                ModelKind::BnnClassifier => {
                    Predictive::Classes(model.predict_mc(q, x, samples, mix(seed, i as u64))?)
                }
                ModelKind::LinearRegression => {
                    let (m, v) = model.predict_linear(q, x)?;
                    Predictive::Gaussian(m, v)
                }
            })
        })
        .collect()
}

fn class_of(y: f64, classes: usize) -> Result<usize> {
    let c = y as usize;
    if y < 0.0 || y.fract() != 0.0 || c >= classes {
        return Err(PviError::Config(format!(
            "target {y} is not a class label below {classes}"
        )));
    }
    Ok(c)
}

/// Mean negative log predictive density and error (misclassification rate,
/// or mean squared error for regression).
pub fn log_loss(preds: &[Predictive], targets: &[f64]) -> Result<(f64, f64)> {
    if preds.len() != targets.len() {
        return Err(PviError::DimensionMismatch {
            expected: targets.len(),
            found: preds.len(),
        });
    }
    if preds.is_empty() {
        return Ok((0.0, 0.0));
    }
    let (mut nll, mut err) = (0.0, 0.0);
    for (p, &y) in preds.iter().zip(targets) {
        match p {
            Predictive::Classes(probs) => {
                let c = class_of(y, probs.len())?;
                nll -= probs[c].max(f64::MIN_POSITIVE).ln();
                let best = (0..probs.len())
                    .max_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                if best != c {
                    err += 1.0;
                }
            }
            Predictive::Gaussian(m, v) => {
                let r = y - m;
                nll += 0.5 * (2.0 * std::f64::consts::PI * v).ln() + r * r / (2.0 * v);
                err += r * r;
            }
        }
    }
    let n = preds.len() as f64;
    Ok((nll / n, err / n))
}

/// Evaluator computing the trace metrics of a run.
#[derive(Debug, Clone)]
pub struct MetricEvaluator {
    pub model: ModelSpec,
    pub prior: GaussianMeanField,
    pub train: Dataset,
    pub test: Dataset,
    pub eval: EvalConfig,
    pub seed: u64,
}

impl MetricEvaluator {
    fn estimator(&self) -> Estimator {
        match self.model.kind {
            ModelKind::BnnClassifier => Estimator::MonteCarlo {
                samples: self.eval.mc_samples,
                seed: mix(self.seed, 0xfe),
            },
            _ => Estimator::Quadrature,
        }
    }

    fn nll(&self, q: &GaussianMeanField, data: &Dataset, stream: u64) -> Result<(f64, f64)> {
        let preds = predictive(
            &self.model,
            q,
            data,
            self.eval.probit_scale,
            self.eval.mc_samples,
            mix(self.seed, stream),
        )?;
        log_loss(&preds, &data.targets)
    }

    /// Metrics of `q`, ignoring the cadence.
    pub fn metrics(&self, q: &GaussianMeanField) -> Result<Metrics> {
        let (test_nll, test_err) = if self.test.is_empty() {
            (None, None)
        } else {
            let (a, b) = self.nll(q, &self.test, 1)?;
            (Some(a), Some(b))
        };
        let train_nll = if self.eval.train_nll {
            Some(self.nll(q, &self.train, 2)?.0)
        } else {
            None
        };
        let free_energy = if self.eval.free_energy {
            Some(global_free_energy(
                &self.model,
                &self.prior,
                &self.train,
                q,
                self.estimator(),
            )?)
        } else {
            None
        };
        Ok(Metrics {
            train_nll,
            test_nll,
            test_err,
            free_energy,
            pruned_count: Some(pruned_count(q, &self.prior, self.eval.prune_threshold)?),
        })
    }
}

impl Evaluator for MetricEvaluator {
    fn evaluate(&mut self, q: &GaussianMeanField, end_of_round: bool) -> Result<Option<Metrics>> {
        if self.eval.cadence == Cadence::EveryRound && !end_of_round {
            return Ok(None);
        }
        self.metrics(q).map(Some)
    }
}
