//! Brute-force references for testing: dense linear algebra, tensor
//! quadrature for tiny models and a random-walk Metropolis sampler.
//!
//! Nothing here calls the sparse solver, the Gaussian approximation or the
//! likelihood code of the engine; log-likelihoods are written out again.
//! Only the model definition (prior precision `Q(θ)`, design, data) is
//! shared.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::lgm::{DesignMatrix, LatentModel};
use crate::likelihood::{Family, Observation};

/// Largest matrix handled by the dense references.
pub const DENSE_CAP: usize = 500;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("dimension {got} exceeds the oracle cap {cap}")]
    TooLarge { got: usize, cap: usize },
    #[error("matrix is not symmetric positive definite")]
    NotSpd,
    #[error("quadrature needs at most {max_latent} latent and {max_hyper} hyperparameters")]
    QuadratureDimension { max_latent: usize, max_hyper: usize },
    #[error("log density is not finite at the starting point")]
    BadStart,
}

/// Dense `Q⁻¹` by Cholesky.
pub fn dense_inverse(q: &DMatrix<f64>) -> Result<DMatrix<f64>, OracleError> {
    if q.nrows() > DENSE_CAP {
        return Err(OracleError::TooLarge { got: q.nrows(), cap: DENSE_CAP });
    }
    let chol = q.clone().cholesky().ok_or(OracleError::NotSpd)?;
    Ok(chol.inverse())
}

/// Diagonal of `A Σ Aᵀ`.
pub fn dense_linpred_variance(a: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<Vec<f64>, OracleError> {
    if sigma.nrows() > DENSE_CAP {
        return Err(OracleError::TooLarge { got: sigma.nrows(), cap: DENSE_CAP });
    }
    let asig = a * sigma;
    Ok((0..a.nrows()).map(|i| asig.row(i).dot(&a.row(i))).collect())
}

/// Moments from an oracle; latent entries first, then θ.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    /// Batch-means Monte-Carlo standard errors (sampler only).
    pub mcse: Option<Vec<f64>>,
    pub meta: OracleMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OracleMeta {
    Quadrature { evaluations: usize },
    Metropolis { draws: usize, burn_in: usize, seed: u64, acceptance: f64 },
}

/// Dense restatement of a latent Gaussian model.
pub struct OracleModel {
    a: DMatrix<f64>,
    family: Family,
    y: Vec<f64>,
    offset: Vec<f64>,
    trials: Vec<f64>,
    model: LatentModel,
    /// Hold θ at this value instead of integrating over it.
    fixed_theta: Option<Vec<f64>>,
}

impl OracleModel {
    pub fn new(model: &LatentModel, design: &DesignMatrix, family: Family, obs: &[Observation]) -> Result<Self, OracleError> {
        if model.m() > DENSE_CAP {
            return Err(OracleError::TooLarge { got: model.m(), cap: DENSE_CAP });
        }
        Ok(Self {
            a: design.to_dense(),
            family,
            y: obs.iter().map(|o| o.y).collect(),
            offset: obs.iter().map(|o| o.offset).collect(),
            trials: obs.iter().map(|o| o.trials).collect(),
            model: model.clone(),
            fixed_theta: None,
        })
    }

    pub fn with_fixed_theta(mut self, theta: Vec<f64>) -> Self {
        assert_eq!(theta.len(), self.model.q(), "θ length");
        self.fixed_theta = Some(theta);
        self
    }

    pub fn m(&self) -> usize {
        self.model.m()
    }

    /// Number of integrated hyperparameters.
    pub fn q_free(&self) -> usize {
        if self.fixed_theta.is_some() {
            0
        } else {
            self.model.q()
        }
    }

    fn dim(&self) -> usize {
        self.m() + self.q_free()
    }

    fn theta_of<'a>(&'a self, z: &'a [f64]) -> &'a [f64] {
        match &self.fixed_theta {
            Some(t) => t,
            None => &z[self.m()..],
        }
    }

    /// `log π(x, θ, y)` up to a constant, `z = (x, θ)`.
    pub fn log_joint(&self, z: &[f64]) -> f64 {
        let m = self.m();
        let x = DVector::from_column_slice(&z[..m]);
        let theta = self.theta_of(z);
        let q = match self.model.prior_precision(theta) {
            Ok(q) => q.to_dense(),
            Err(_) => return f64::NEG_INFINITY,
        };
        let Some(chol) = q.clone().cholesky() else {
            return f64::NEG_INFINITY;
        };
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let mut lp = 0.5 * logdet - 0.5 * x.dot(&(&q * &x));
        if self.fixed_theta.is_none() {
            lp += self.model.theta_log_prior(theta);
        }
        let eta = &self.a * &x;
        for i in 0..self.y.len() {
            let t = eta[i] + self.offset[i];
            lp += match self.family {
                Family::Gaussian => {
                    let tau = theta[0].exp();
                    0.5 * theta[0] - 0.5 * tau * (self.y[i] - t).powi(2)
                }
                Family::Poisson => self.y[i] * t - t.exp(),
                Family::Binomial => {
                    let log1pexp = if t > 0.0 { t + (-t).exp().ln_1p() } else { t.exp().ln_1p() };
                    self.y[i] * t - self.trials[i] * log1pexp
                }
            };
        }
        lp
    }

    /// Joint mode and the inverse of the negative Hessian there, by
    /// finite-difference Newton with backtracking.
    pub fn laplace(&self) -> (Vec<f64>, DMatrix<f64>) {
        let d = self.dim();
        let mut z = vec![0.0; d];
        for (k, v) in z.iter_mut().enumerate().skip(self.m()) {
            *v = self.model.initial_theta()[k - self.m()];
        }
        let f = |z: &[f64]| self.log_joint(z);
        let mut fz = f(&z);
        for _ in 0..200 {
            let (g, h) = fd_grad_hess(&f, &z, 1e-4);
            let neg = -h;
            let step = match neg.clone().cholesky() {
                Some(c) => c.solve(&g),
                None => g.clone() * 1e-2,
            };
            let mut t = 1.0;
            let mut moved = false;
            for _ in 0..40 {
                let cand: Vec<f64> = z.iter().zip(step.iter()).map(|(a, b)| a + t * b).collect();
                let fc = f(&cand);
                if fc > fz {
                    z = cand;
                    fz = fc;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if !moved || t * step.amax() < 1e-10 {
                break;
            }
        }
        let (_, h) = fd_grad_hess(&f, &z, 1e-4);
        let cov = (-h).try_inverse().unwrap_or_else(|| DMatrix::identity(d, d));
        (z, cov)
    }
}

fn fd_grad_hess(f: &impl Fn(&[f64]) -> f64, z: &[f64], h: f64) -> (DVector<f64>, DMatrix<f64>) {
    let d = z.len();
    let f0 = f(z);
    let mut g = DVector::zeros(d);
    let mut hess = DMatrix::zeros(d, d);
    let shifted = |pairs: &[(usize, f64)]| {
        let mut w = z.to_vec();
        for &(k, s) in pairs {
            w[k] += s;
        }
        f(&w)
    };
    for a in 0..d {
        let fp = shifted(&[(a, h)]);
        let fm = shifted(&[(a, -h)]);
        g[a] = (fp - fm) / (2.0 * h);
        hess[(a, a)] = (fp - 2.0 * f0 + fm) / (h * h);
        for b in 0..a {
            let v = (shifted(&[(a, h), (b, h)]) - shifted(&[(a, h), (b, -h)]) - shifted(&[(a, -h), (b, h)])
                + shifted(&[(a, -h), (b, -h)]))
                / (4.0 * h * h);
            hess[(a, b)] = v;
            hess[(b, a)] = v;
        }
    }
    (g, hess)
}

const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const K15_WEIGHTS: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728,
];
const G7_WEIGHTS: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Gauss–Kronrod 7/15 on one interval for a vector integrand.
fn gk15(f: &mut dyn FnMut(f64) -> Vec<f64>, a: f64, b: f64) -> (Vec<f64>, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let k = fc.len();
    let mut kron: Vec<f64> = fc.iter().map(|v| v * K15_WEIGHTS[7]).collect();
    let mut gauss: Vec<f64> = fc.iter().map(|v| v * G7_WEIGHTS[3]).collect();
    for j in 0..7 {
        let x = h * GK_NODES[j];
        let (f1, f2) = (f(c - x), f(c + x));
        for t in 0..k {
            let s = f1[t] + f2[t];
            kron[t] += K15_WEIGHTS[j] * s;
            if j % 2 == 1 {
                gauss[t] += G7_WEIGHTS[j / 2] * s;
            }
        }
    }
    let mut err = 0.0_f64;
    for t in 0..k {
        kron[t] *= h;
        gauss[t] *= h;
        err = err.max((kron[t] - gauss[t]).abs());
    }
    (kron, err)
}

/// Adaptive bisection until the error estimate is below `rel · |∫ f_0|`,
/// where the first component is the normalizer.
fn integrate(f: &mut dyn FnMut(f64) -> Vec<f64>, a: f64, b: f64, rel: f64) -> Vec<f64> {
    let mut intervals = vec![(a, b, gk15(f, a, b))];
    for _ in 0..2000 {
        let total: Vec<f64> = sum_vec(intervals.iter().map(|iv| &iv.2 .0));
        let err: f64 = intervals.iter().map(|iv| iv.2 .1).sum();
        let scale = total.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if err <= rel * scale || scale == 0.0 {
            return total;
        }
        let (worst, _) = intervals
            .iter()
            .enumerate()
            .fold((0, -1.0), |best, (i, iv)| if iv.2 .1 > best.1 { (i, iv.2 .1) } else { best });
        let (lo, hi, _) = intervals.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        intervals.push((lo, mid, gk15(f, lo, mid)));
        intervals.push((mid, hi, gk15(f, mid, hi)));
    }
    sum_vec(intervals.iter().map(|iv| &iv.2 .0))
}

fn sum_vec<'a>(parts: impl Iterator<Item = &'a Vec<f64>>) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for p in parts {
        if out.is_empty() {
            out = vec![0.0; p.len()];
        }
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

/// Posterior moments of every latent entry and free θ by nested adaptive
/// Gauss–Kronrod quadrature over a box around the joint mode.
pub fn quadrature_posterior(model: &OracleModel, rel_tol: f64) -> Result<OracleResult, OracleError> {
    if model.m() > 2 || model.q_free() > 1 {
        return Err(OracleError::QuadratureDimension { max_latent: 2, max_hyper: 1 });
    }
    let d = model.dim();
    let (mode, cov) = model.laplace();
    let f_mode = model.log_joint(&mode);
    let mut bounds = Vec::with_capacity(d);
    for k in 0..d {
        let sd = cov[(k, k)].abs().sqrt().max(1e-3);
        let mut lo = mode[k] - 8.0 * sd;
        let mut hi = mode[k] + 8.0 * sd;
        let at = |v: f64| {
            let mut z = mode.clone();
            z[k] = v;
            model.log_joint(&z) - f_mode
        };
        for _ in 0..60 {
            if at(lo) < -60.0 {
                break;
            }
            lo -= 2.0 * sd;
        }
        for _ in 0..60 {
            if at(hi) < -60.0 {
                break;
            }
            hi += 2.0 * sd;
        }
        bounds.push((lo, hi));
    }

    let mut evaluations = 0usize;
    // integrand vector: [1, z_k, z_k²]
    let mut point = vec![0.0; d];
    let totals = nested(model, f_mode, &bounds, 0, &mut point, rel_tol, &mut evaluations);
    let z0 = totals[0];
    let means: Vec<f64> = (0..d).map(|k| totals[1 + k] / z0).collect();
    let sds: Vec<f64> = (0..d).map(|k| (totals[1 + d + k] / z0 - means[k] * means[k]).max(0.0).sqrt()).collect();
    Ok(OracleResult { means, sds, mcse: None, meta: OracleMeta::Quadrature { evaluations } })
}

fn nested(
    model: &OracleModel,
    f_mode: f64,
    bounds: &[(f64, f64)],
    level: usize,
    point: &mut Vec<f64>,
    rel: f64,
    evals: &mut usize,
) -> Vec<f64> {
    let d = bounds.len();
    let (a, b) = bounds[level];
    let mut f = |v: f64| -> Vec<f64> {
        point[level] = v;
        if level + 1 < d {
            let mut inner = point.clone();
            nested(model, f_mode, bounds, level + 1, &mut inner, rel, evals)
        } else {
            *evals += 1;
            let w = (model.log_joint(point) - f_mode).exp();
            let mut out = vec![0.0; 1 + 2 * d];
            out[0] = w;
            for k in 0..d {
                out[1 + k] = w * point[k];
                out[1 + d + k] = w * point[k] * point[k];
            }
            out
        }
    };
    integrate(&mut f, a, b, rel)
}

/// Adaptive random-walk Metropolis on an arbitrary log density.
///
/// The first 20 % of draws are burn-in, during which the proposal covariance
/// follows the running sample covariance and its scale is tuned towards an
/// acceptance rate in `[0.23, 0.40]`. The proposal is frozen afterwards.
pub fn metropolis_target(
    log_density: &dyn Fn(&[f64]) -> f64,
    start: &[f64],
    start_cov: Option<&DMatrix<f64>>,
    draws: usize,
    seed: u64,
) -> Result<OracleResult, OracleError> {
    let d = start.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DVector::from_column_slice(start);
    let mut lp = log_density(start);
    if !lp.is_finite() {
        return Err(OracleError::BadStart);
    }
    let burn_in = draws / 5;
    let mut cov = start_cov.cloned().unwrap_or_else(|| DMatrix::identity(d, d));
    let mut scale = 2.38 / (d.max(1) as f64).sqrt();
    let mut chol = cholesky_or_identity(&cov);

    let mut run_mean = DVector::zeros(d);
    let mut run_m2 = DMatrix::zeros(d, d);
    let mut run_n = 0.0;
    let mut window_acc = 0usize;
    let mut window_len = 0usize;
    let mut accepted_kept = 0usize;
    let kept = draws - burn_in;
    let mut samples: Vec<f64> = Vec::with_capacity(kept * d);

    for it in 0..draws {
        let noise = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let cand = &x + scale * (&chol * noise);
        let lc = log_density(cand.as_slice());
        let u: f64 = rng.random();
        let accept = lc.is_finite() && u.ln() < lc - lp;
        if accept {
            x = cand;
            lp = lc;
        }
        if it < burn_in {
            window_acc += usize::from(accept);
            window_len += 1;
            run_n += 1.0;
            let delta = &x - &run_mean;
            run_mean += &delta / run_n;
            let delta2 = &x - &run_mean;
            run_m2 += &delta * delta2.transpose();
            if window_len == 200 {
                let rate = window_acc as f64 / window_len as f64;
                if rate < 0.23 {
                    scale *= 0.8;
                } else if rate > 0.40 {
                    scale *= 1.25;
                }
                if run_n > (10 * d) as f64 {
                    cov = &run_m2 / (run_n - 1.0) + DMatrix::identity(d, d) * 1e-12;
                    chol = cholesky_or_identity(&cov);
                }
                window_acc = 0;
                window_len = 0;
            }
        } else {
            accepted_kept += usize::from(accept);
            samples.extend_from_slice(x.as_slice());
        }
    }

    let (means, sds, mcse) = batch_means(&samples, d, 50);
    Ok(OracleResult {
        means,
        sds,
        mcse: Some(mcse),
        meta: OracleMeta::Metropolis { draws, burn_in, seed, acceptance: accepted_kept as f64 / kept.max(1) as f64 },
    })
}

fn cholesky_or_identity(cov: &DMatrix<f64>) -> DMatrix<f64> {
    cov.clone().cholesky().map_or_else(|| DMatrix::identity(cov.nrows(), cov.nrows()), |c| c.l())
}

/// Means, sds and batch-means standard errors of row-major samples.
pub fn batch_means(samples: &[f64], d: usize, batches: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = samples.len() / d.max(1);
    let mut means = vec![0.0; d];
    let mut sds = vec![0.0; d];
    let mut mcse = vec![0.0; d];
    if n == 0 {
        return (means, sds, mcse);
    }
    for k in 0..d {
        let col = |i: usize| samples[i * d + k];
        let mean = (0..n).map(col).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (col(i) - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
        let size = n / batches;
        let se = if size == 0 {
            (var / n as f64).sqrt()
        } else {
            let bm: Vec<f64> =
                (0..batches).map(|b| (b * size..(b + 1) * size).map(col).sum::<f64>() / size as f64).collect();
            let bmean = bm.iter().sum::<f64>() / batches as f64;
            let bvar = bm.iter().map(|v| (v - bmean).powi(2)).sum::<f64>() / (batches - 1) as f64;
            (bvar / batches as f64).sqrt()
        };
        means[k] = mean;
        sds[k] = var.sqrt();
        mcse[k] = se;
    }
    (means, sds, mcse)
}

/// Metropolis over `(x, θ)` started at the joint mode.
pub fn metropolis(model: &OracleModel, draws: usize, seed: u64) -> Result<OracleResult, OracleError> {
    let (mode, cov) = model.laplace();
    let cov_ok = cov.clone().cholesky().is_some();
    metropolis_target(&|z| model.log_joint(z), &mode, cov_ok.then_some(&cov), draws, seed)
}
