//! Observation families and their second-order expansion.
//!
//! Every family works on the linear predictor `η` *excluding* the
//! observation's offset; the offset is added internally. For the Poisson
//! family the offset is `log E_i` (exposure).

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

/// Floor applied to the negative curvature `c_i`.
pub const C_MIN: f64 = 1e-8;
/// Default number of Gauss–Hermite nodes.
pub const DEFAULT_GH_NODES: usize = 15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LikelihoodError {
    #[error("observation {value} outside the support of the {family:?} family")]
    SupportViolation { family: Family, value: f64 },
    #[error("invalid trials count {0}")]
    InvalidTrials(f64),
    #[error("non-finite linear predictor")]
    NonFinitePredictor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Identity link; one hyperparameter, the observation log-precision.
    Gaussian,
    /// Log link with offset `log E_i`.
    Poisson,
    /// Logit link with `trials` per observation (Bernoulli when 1).
    Binomial,
}

/// One data point as seen by a family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub y: f64,
    pub offset: f64,
    pub trials: f64,
}

impl Observation {
    pub fn new(y: f64) -> Self {
        Self { y, offset: 0.0, trials: 1.0 }
    }

    pub fn with_offset(mut self, offset: f64) -> Self {
        self.offset = offset;
        self
    }

    /// Poisson exposure `E`, stored as the offset `log E`.
    pub fn with_exposure(self, exposure: f64) -> Self {
        self.with_offset(exposure.ln())
    }

    pub fn with_trials(mut self, trials: f64) -> Self {
        self.trials = trials;
        self
    }
}

/// Log-likelihood value with its first two derivatives in `η`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLikDerivs {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

impl Family {
    /// Number of likelihood hyperparameters.
    pub fn n_hyper(self) -> usize {
        match self {
            Family::Gaussian => 1,
            Family::Poisson | Family::Binomial => 0,
        }
    }

    pub fn validate(self, obs: &Observation) -> Result<(), LikelihoodError> {
        let y = obs.y;
        let bad = || LikelihoodError::SupportViolation { family: self, value: y };
        if !y.is_finite() || !obs.offset.is_finite() {
            return Err(bad());
        }
        match self {
            Family::Gaussian => Ok(()),
            Family::Poisson => {
                if y < 0.0 || y.fract() != 0.0 {
                    Err(bad())
                } else {
                    Ok(())
                }
            }
            Family::Binomial => {
                let n = obs.trials;
                if !(n >= 1.0) || n.fract() != 0.0 {
                    return Err(LikelihoodError::InvalidTrials(n));
                }
                if y < 0.0 || y > n || y.fract() != 0.0 {
                    Err(bad())
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Exact log density/mass of one observation, normalizing constants included.
    pub fn log_lik(self, obs: &Observation, eta: f64, hyper: &[f64]) -> Result<f64, LikelihoodError> {
        self.validate(obs)?;
        if !eta.is_finite() {
            return Err(LikelihoodError::NonFinitePredictor);
        }
        Ok(self.eval(obs, eta, hyper).value)
    }

    /// Unchecked evaluation for validated observations.
    #[inline]
    pub fn eval(self, obs: &Observation, eta: f64, hyper: &[f64]) -> LogLikDerivs {
        let t = eta + obs.offset;
        match self {
            Family::Gaussian => {
                let tau = hyper[0].exp();
                let r = obs.y - t;
                LogLikDerivs {
                    value: 0.5 * hyper[0] - 0.5 * (2.0 * PI).ln() - 0.5 * tau * r * r,
                    d1: tau * r,
                    d2: -tau,
                }
            }
            Family::Poisson => {
                let mu = t.exp();
                LogLikDerivs { value: obs.y * t - mu - ln_gamma(obs.y + 1.0), d1: obs.y - mu, d2: -mu }
            }
            Family::Binomial => {
                let n = obs.trials;
                let p = logistic(t);
                let log_choose = ln_gamma(n + 1.0) - ln_gamma(obs.y + 1.0) - ln_gamma(n - obs.y + 1.0);
                LogLikDerivs {
                    value: log_choose + obs.y * t - n * softplus(t),
                    d1: obs.y - n * p,
                    d2: -n * p * (1.0 - p),
                }
            }
        }
    }
}

#[inline]
fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^t)` without overflow.
#[inline]
fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

/// Coefficients of the quadratic `b η − ½ c η²` matching the log-likelihood
/// to second order at the expansion point.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoData {
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub clamped: usize,
}

/// `c_i = −ℓ''(η⁰_i)` floored at `c_floor`, `b_i = ℓ'(η⁰_i) + c_i η⁰_i`.
pub fn pseudo_data(family: Family, obs: &[Observation], eta0: &[f64], hyper: &[f64]) -> PseudoData {
    pseudo_data_with_floor(family, obs, eta0, hyper, C_MIN)
}

pub(crate) fn pseudo_data_with_floor(
    family: Family,
    obs: &[Observation],
    eta0: &[f64],
    hyper: &[f64],
    c_floor: f64,
) -> PseudoData {
    assert_eq!(obs.len(), eta0.len());
    let mut b = Vec::with_capacity(obs.len());
    let mut c = Vec::with_capacity(obs.len());
    let mut clamped = 0;
    for (o, &e) in obs.iter().zip(eta0) {
        let d = family.eval(o, e, hyper);
        let mut ci = -d.d2;
        if !(ci >= c_floor) {
            ci = c_floor;
            clamped += 1;
        }
        b.push(d.d1 + ci * e);
        c.push(ci);
    }
    PseudoData { b, c, clamped }
}

/// Gauss–Hermite rule for expectations under a standard normal:
/// `E[f(Z)] ≈ Σ w_j f(x_j)`, with `Σ w_j = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// Golub–Welsch on the Jacobi matrix of the probabilists' Hermite polynomials.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Hermite rule needs at least one node");
        if n == 1 {
            return Self { nodes: vec![0.0], weights: vec![1.0] };
        }
        let mut jacobi = DMatrix::zeros(n, n);
        for k in 1..n {
            let off = (k as f64).sqrt();
            jacobi[(k, k - 1)] = off;
            jacobi[(k - 1, k)] = off;
        }
        let eig = SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let v0 = eig.eigenvectors[(0, i)];
                (eig.eigenvalues[i], v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        // symmetrize to remove eigen-solver noise
        for i in 0..n / 2 {
            let j = n - 1 - i;
            let x = 0.5 * (pairs[j].0 - pairs[i].0);
            let w = 0.5 * (pairs[i].1 + pairs[j].1);
            pairs[i] = (-x, w);
            pairs[j] = (x, w);
        }
        if n % 2 == 1 {
            pairs[n / 2].0 = 0.0;
        }
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        Self {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1 / total).collect(),
        }
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `E[f(μ + σ Z)]`.
    pub fn expect(&self, mu: f64, sigma: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(mu + sigma * x)).sum()
    }

    /// Expected value, gradient and curvature of the log-likelihood in `μ`
    /// for `η ~ N(μ, σ²)`.
    pub fn expected_derivs(&self, family: Family, obs: &Observation, mu: f64, sigma: f64, hyper: &[f64]) -> LogLikDerivs {
        let mut out = LogLikDerivs { value: 0.0, d1: 0.0, d2: 0.0 };
        for (&x, &w) in self.nodes.iter().zip(&self.weights) {
            let d = family.eval(obs, mu + sigma * x, hyper);
            out.value += w * d.value;
            out.d1 += w * d.d1;
            out.d2 += w * d.d2;
        }
        out
    }
}

/// Gauss–Hermite estimate of `E[log π(y | η)]` for `η ~ N(μ, σ²)`.
pub fn expected_loglik_gh(
    family: Family,
    obs: &Observation,
    mu: f64,
    sigma: f64,
    hyper: &[f64],
    n_nodes: usize,
) -> Result<f64, LikelihoodError> {
    family.validate(obs)?;
    if sigma == 0.0 {
        return family.log_lik(obs, mu, hyper);
    }
    let rule = GaussHermite::new(n_nodes);
    Ok(rule.expect(mu, sigma, |eta| family.eval(obs, eta, hyper).value))
}
