//! Exponential-family arithmetic for diagonal (mean-field) Gaussians.
//!
//! Every distribution and factor is stored in natural parameters per
//! dimension, `eta1 = precision * mean` and `eta2 = -precision / 2`, with
//! sufficient statistics `T(theta) = (theta, theta^2)`. Products and
//! quotients of factors are therefore plain additions and subtractions.
//!
//! Intermediate results are allowed to be unnormalizable (`eta2 >= 0` in
//! some dimension). Only the operations that need a proper density
//! (`to_mean`, `log_partition`, `kl`, `sample`) reject them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{PviError, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Read access to a pair of natural-parameter vectors.
pub trait NaturalParams {
    fn eta1(&self) -> &[f64];
    fn eta2(&self) -> &[f64];

    fn dim(&self) -> usize {
        self.eta1().len()
    }

    /// Client that owns this factor, if any.
    fn owner(&self) -> Option<usize> {
        None
    }

    /// Dimensions whose precision is not strictly positive.
    fn unnormalizable_dims(&self) -> Vec<usize> {
        self.eta2()
            .iter()
            .enumerate()
            .filter(|(_, &e)| !(e < 0.0))
            .map(|(i, _)| i)
            .collect()
    }

    fn is_normalizable(&self) -> bool {
        self.eta2().iter().all(|&e| e < 0.0) && self.eta1().iter().all(|e| e.is_finite())
    }

    /// Largest absolute difference in natural parameters.
    fn max_abs_diff<P: NaturalParams>(&self, other: &P) -> f64
    where
        Self: Sized,
    {
        self.eta1()
            .iter()
            .zip(other.eta1())
            .chain(self.eta2().iter().zip(other.eta2()))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Diagonal Gaussian `q(theta)` in natural-parameter form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMeanField {
    pub eta1: Vec<f64>,
    pub eta2: Vec<f64>,
}

/// Mean parameters `E[theta]` and `E[theta^2]` of a diagonal Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanParams {
    pub mu1: Vec<f64>,
    pub mu2: Vec<f64>,
}

/// Unnormalized exponential-family factor `t_m(theta) = exp(eta . T(theta))`.
///
/// The additive log-constant is not tracked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxFactor {
    pub eta1: Vec<f64>,
    pub eta2: Vec<f64>,
    #[serde(skip)]
    pub owner: usize,
}

impl NaturalParams for GaussianMeanField {
    fn eta1(&self) -> &[f64] {
        &self.eta1
    }
    fn eta2(&self) -> &[f64] {
        &self.eta2
    }
}

impl NaturalParams for ApproxFactor {
    fn eta1(&self) -> &[f64] {
        &self.eta1
    }
    fn eta2(&self) -> &[f64] {
        &self.eta2
    }
    fn owner(&self) -> Option<usize> {
        Some(self.owner)
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(PviError::DimensionMismatch { expected: a, found: b });
    }
    Ok(())
}

impl GaussianMeanField {
    pub fn new(eta1: Vec<f64>, eta2: Vec<f64>) -> Result<Self> {
        check_lengths(eta1.len(), eta2.len())?;
        Ok(Self { eta1, eta2 })
    }

    /// `N(0, I)` in `dim` dimensions.
    pub fn standard_normal(dim: usize) -> Self {
        Self::isotropic(dim, 1.0)
    }

    /// `N(0, variance * I)`.
    pub fn isotropic(dim: usize, variance: f64) -> Self {
        Self {
            eta1: vec![0.0; dim],
            eta2: vec![-0.5 / variance; dim],
        }
    }

    pub fn from_mean_var(mean: &[f64], var: &[f64]) -> Result<Self> {
        check_lengths(mean.len(), var.len())?;
        let mut eta1 = Vec::with_capacity(mean.len());
        let mut eta2 = Vec::with_capacity(mean.len());
        for (i, (&m, &v)) in mean.iter().zip(var).enumerate() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(PviError::DegenerateVariance { dim: i });
            }
            eta1.push(m / v);
            eta2.push(-0.5 / v);
        }
        Ok(Self { eta1, eta2 })
    }

    fn require_normalizable(&self) -> Result<()> {
        let dims = self.unnormalizable_dims();
        if dims.is_empty() {
            Ok(())
        } else {
            Err(PviError::NotNormalizable { dims })
        }
    }

    pub fn to_mean(&self) -> Result<MeanParams> {
        self.require_normalizable()?;
        let (mu1, mu2) = self
            .eta1
            .iter()
            .zip(&self.eta2)
            .map(|(&e1, &e2)| {
                let m = -e1 / (2.0 * e2);
                (m, m * m - 1.0 / (2.0 * e2))
            })
            .unzip();
        Ok(MeanParams { mu1, mu2 })
    }

    /// Means and variances per dimension.
    pub fn mean_var(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        self.require_normalizable()?;
        Ok(self
            .eta1
            .iter()
            .zip(&self.eta2)
            .map(|(&e1, &e2)| (-e1 / (2.0 * e2), -0.5 / e2))
            .unzip())
    }

    /// `A(eta)` such that `exp(eta . T(theta) - A)` integrates to one.
    pub fn log_partition(&self) -> Result<f64> {
        self.require_normalizable()?;
        let d = self.dim() as f64;
        let sum: f64 = self
            .eta1
            .iter()
            .zip(&self.eta2)
            .map(|(&e1, &e2)| -e1 * e1 / (4.0 * e2) - 0.5 * (-2.0 * e2).ln())
            .sum();
        Ok(sum + 0.5 * d * LN_2PI)
    }

    /// Closed-form `KL(self || other)`.
    pub fn kl(&self, other: &GaussianMeanField) -> Result<f64> {
        Ok(self.kl_per_dim(other)?.iter().sum())
    }

    /// Marginal KL of each coordinate.
    pub fn kl_per_dim(&self, other: &GaussianMeanField) -> Result<Vec<f64>> {
        check_lengths(self.dim(), other.dim())?;
        let (mq, vq) = self.mean_var()?;
        let (mp, vp) = other.mean_var()?;
        Ok((0..self.dim())
            .map(|i| {
                if self.eta1[i] == other.eta1[i] && self.eta2[i] == other.eta2[i] {
                    return 0.0;
                }
                let r = vq[i] / vp[i];
                let dm = mq[i] - mp[i];
                0.5 * (r + dm * dm / vp[i] - 1.0 - r.ln())
            })
            .collect())
    }

    /// `n` draws, row-major `n x D`, deterministic in `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let (m, v) = self.mean_var()?;
        let sd: Vec<f64> = v.iter().map(|v| v.sqrt()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n)
            .map(|_| {
                m.iter()
                    .zip(&sd)
                    .map(|(m, s)| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + s * z
                    })
                    .collect()
            })
            .collect())
    }

    /// Natural parameters raised to a power, `q^s`.
    pub fn powered(&self, s: f64) -> GaussianMeanField {
        GaussianMeanField {
            eta1: self.eta1.iter().map(|e| e * s).collect(),
            eta2: self.eta2.iter().map(|e| e * s).collect(),
        }
    }

    /// Multiply in a factor raised to `scale`, i.e. add `scale * eta`.
    pub fn add_scaled<P: NaturalParams>(&self, factor: &P, scale: f64) -> GaussianMeanField {
        GaussianMeanField {
            eta1: self
                .eta1
                .iter()
                .zip(factor.eta1())
                .map(|(a, b)| a + scale * b)
                .collect(),
            eta2: self
                .eta2
                .iter()
                .zip(factor.eta2())
                .map(|(a, b)| a + scale * b)
                .collect(),
        }
    }
}

impl MeanParams {
    pub fn to_natural(&self) -> Result<GaussianMeanField> {
        check_lengths(self.mu1.len(), self.mu2.len())?;
        let mut eta1 = Vec::with_capacity(self.mu1.len());
        let mut eta2 = Vec::with_capacity(self.mu1.len());
        for (i, (&m1, &m2)) in self.mu1.iter().zip(&self.mu2).enumerate() {
            let v = m2 - m1 * m1;
            if !(v > 0.0) {
                return Err(PviError::DegenerateVariance { dim: i });
            }
            eta1.push(m1 / v);
            eta2.push(-0.5 / v);
        }
        Ok(GaussianMeanField { eta1, eta2 })
    }

    pub fn variance(&self) -> Vec<f64> {
        self.mu1.iter().zip(&self.mu2).map(|(m1, m2)| m2 - m1 * m1).collect()
    }
}

impl ApproxFactor {
    pub fn new(eta1: Vec<f64>, eta2: Vec<f64>, owner: usize) -> Result<Self> {
        check_lengths(eta1.len(), eta2.len())?;
        Ok(Self { eta1, eta2, owner })
    }

    /// The factor `t(theta) = 1`.
    pub fn unit(dim: usize, owner: usize) -> Self {
        Self {
            eta1: vec![0.0; dim],
            eta2: vec![0.0; dim],
            owner,
        }
    }

    pub fn is_unit(&self) -> bool {
        self.eta1.iter().chain(&self.eta2).all(|&e| e == 0.0)
    }

    pub fn with_owner(mut self, owner: usize) -> Self {
        self.owner = owner;
        self
    }

    pub fn scaled(&self, s: f64) -> ApproxFactor {
        ApproxFactor {
            eta1: self.eta1.iter().map(|e| e * s).collect(),
            eta2: self.eta2.iter().map(|e| e * s).collect(),
            owner: self.owner,
        }
    }

    /// `self * other^scale`.
    pub fn add_scaled<P: NaturalParams>(&self, other: &P, scale: f64) -> ApproxFactor {
        ApproxFactor {
            eta1: self.eta1.iter().zip(other.eta1()).map(|(a, b)| a + scale * b).collect(),
            eta2: self.eta2.iter().zip(other.eta2()).map(|(a, b)| a + scale * b).collect(),
            owner: self.owner,
        }
    }

    /// View the factor as a (possibly improper) Gaussian.
    pub fn as_gaussian(&self) -> GaussianMeanField {
        GaussianMeanField {
            eta1: self.eta1.clone(),
            eta2: self.eta2.clone(),
        }
    }
}

/// `base * prod(factors)`: natural parameters add. The result may be
/// unnormalizable; check with [`NaturalParams::is_normalizable`].
pub fn combine<'a, I>(base: &GaussianMeanField, factors: I) -> GaussianMeanField
where
    I: IntoIterator<Item = &'a ApproxFactor>,
{
    let mut out = base.clone();
    for f in factors {
        debug_assert_eq!(f.dim(), base.dim());
        for (a, b) in out.eta1.iter_mut().zip(&f.eta1) {
            *a += b;
        }
        for (a, b) in out.eta2.iter_mut().zip(&f.eta2) {
            *a += b;
        }
    }
    out
}

/// `num / den`: natural parameters subtract.
pub fn divide<A: NaturalParams, B: NaturalParams>(num: &A, den: &B) -> ApproxFactor {
    debug_assert_eq!(num.dim(), den.dim());
    ApproxFactor {
        eta1: num.eta1().iter().zip(den.eta1()).map(|(a, b)| a - b).collect(),
        eta2: num.eta2().iter().zip(den.eta2()).map(|(a, b)| a - b).collect(),
        owner: num.owner().or(den.owner()).unwrap_or(0),
    }
}
