//! Posterior marginals as Gaussian mixtures over the θ grid, the low-rank
//! variational mean correction, and summaries.

use rayon::prelude::*;
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::lgm::DesignMatrix;
use crate::likelihood::GaussHermite;
use crate::outer::{HyperGrid, HyperPosterior, OuterError, ThetaEval};
use crate::sparse::{SelectedInverse, SparseError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PosteriorError {
    #[error("selected inverse has no entry ({0}, {1}); Q_X pattern does not cover AᵀA")]
    MissingCEntry(usize, usize),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Outer(#[from] OuterError),
    #[error("VB node {index} outside a field of dimension {dim}")]
    InvalidNode { index: usize, dim: usize },
}

const QUANTILE_PROBS: [f64; 3] = [0.025, 0.5, 0.975];

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// One-dimensional Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Mixture {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, sds: Vec<f64>) -> Self {
        assert!(weights.len() == means.len() && means.len() == sds.len(), "mixture lengths differ");
        Self { weights, means, sds }
    }

    pub fn gaussian(mean: f64, sd: f64) -> Self {
        Self::new(vec![1.0], vec![mean], vec![sd])
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    pub fn variance(&self) -> f64 {
        let mean = self.mean();
        let second: f64 =
            self.weights.iter().zip(&self.means).zip(&self.sds).map(|((w, m), s)| w * (s * s + m * m)).sum();
        (second - mean * mean).max(0.0)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.sds)
            .map(|((w, m), s)| {
                if *s > 0.0 {
                    w * normal_cdf((x - m) / s)
                } else if x >= *m {
                    *w
                } else {
                    0.0
                }
            })
            .sum()
    }

    /// Bisection on the CDF over `[min μ − 10σ, max μ + 10σ]`.
    pub fn quantile(&self, p: f64) -> f64 {
        let sd_max = self.sds.iter().copied().fold(0.0_f64, f64::max);
        let mut lo = self.means.iter().copied().fold(f64::INFINITY, f64::min) - 10.0 * sd_max;
        let mut hi = self.means.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 10.0 * sd_max;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    pub fn summary(&self) -> Summary {
        let q: Vec<f64> = QUANTILE_PROBS.iter().map(|&p| self.quantile(p)).collect();
        Summary { mean: self.mean(), sd: self.variance().sqrt(), q025: q[0], q50: q[1], q975: q[2] }
    }
}

/// Mean, standard deviation and 2.5/50/97.5 % quantiles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
}

pub fn summarize(mix: &Mixture) -> Summary {
    mix.summary()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    Latent,
    LinearPredictor,
}

/// Mixtures for many targets sharing the same grid weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalMixture {
    pub kind: TargetKind,
    pub weights: Vec<f64>,
    /// `means[k][i]`: mean of target `i` at grid point `k`.
    pub means: Vec<Vec<f64>>,
    pub sds: Vec<Vec<f64>>,
}

impl MarginalMixture {
    pub fn n_targets(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn target(&self, i: usize) -> Mixture {
        Mixture::new(
            self.weights.clone(),
            self.means.iter().map(|m| m[i]).collect(),
            self.sds.iter().map(|s| s[i]).collect(),
        )
    }

    pub fn summaries(&self) -> Vec<Summary> {
        (0..self.n_targets()).into_par_iter().map(|i| self.target(i).summary()).collect()
    }
}

/// Settings of the variational mean correction.
#[derive(Debug, Clone, PartialEq)]
pub struct VbSettings {
    /// Field indices whose means are shifted directly.
    pub nodes: Vec<usize>,
    pub n_gh: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl VbSettings {
    pub fn new(nodes: Vec<usize>) -> Self {
        Self { nodes, n_gh: crate::likelihood::DEFAULT_GH_NODES, tol: 1e-4, max_iter: 25 }
    }
}

/// Default node set: every fixed effect, at most 30.
pub fn default_vb_nodes(post: &HyperPosterior) -> Vec<usize> {
    let off = post.latent_range().start;
    post.model().fixed_effect_indices().into_iter().take(30).map(|j| j + off).collect()
}

/// Outcome of [`vb_correct`].
#[derive(Debug, Clone, PartialEq)]
pub struct VbCorrection {
    pub nodes: Vec<usize>,
    /// Accumulated shift `λ` with `μ* = μ + M λ`.
    pub lambda: Vec<f64>,
    pub mean: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub objective_trace: Vec<f64>,
}

/// `Var(η_i) = Σ_{a,b} A_ia A_ib C_ab` over the stored selected inverse.
pub fn linpred_variance(design: &DesignMatrix, c: &SelectedInverse) -> Result<Vec<f64>, PosteriorError> {
    (0..design.nrows())
        .into_par_iter()
        .map(|i| {
            let (cols, vals) = design.row(i);
            let mut v = 0.0;
            for a in 0..cols.len() {
                for b in 0..cols.len() {
                    let cab = c.get(cols[a], cols[b]).ok_or(PosteriorError::MissingCEntry(cols[a], cols[b]))?;
                    v += vals[a] * vals[b] * cab;
                }
            }
            Ok(v)
        })
        .collect()
}

/// Variational mean correction at one θ.
///
/// Minimizes `E[−Σ log π(y_i | η_i)] + ½ μ*ᵀ Q μ*` over `μ* = μ + M λ`, where
/// `M` holds the columns of `Q_X⁻¹` at the nodes and the expectation is over
/// `η_i ~ N((A μ*)_i, σ_i²)` with `σ_i` the uncorrected standard deviations.
pub fn vb_correct(
    post: &HyperPosterior,
    eval: &ThetaEval,
    linpred_sd: &[f64],
    settings: &VbSettings,
) -> Result<VbCorrection, PosteriorError> {
    let mut mean = eval.inner.mu.clone();
    let p = settings.nodes.len();
    let dim = mean.len();
    if let Some(&bad) = settings.nodes.iter().find(|&&j| j >= dim) {
        return Err(PosteriorError::InvalidNode { index: bad, dim });
    }
    if p == 0 {
        return Ok(VbCorrection {
            nodes: Vec::new(),
            lambda: Vec::new(),
            mean,
            iterations: 0,
            converged: true,
            objective_trace: Vec::new(),
        });
    }
    let problem = post.problem();
    let design = problem.design();
    let family = problem.family();
    let obs = problem.observations();
    let hyper = &eval.theta[..post.model().n_lik_hyper()];
    let q = post.field_prior(&eval.theta)?;
    let rule = GaussHermite::new(settings.n_gh);

    let m_cols = eval.inner.factor.inverse_columns(&settings.nodes)?;
    // B = A M, n × p, row-major
    let n = design.nrows();
    let mut b = vec![0.0; n * p];
    for i in 0..n {
        let (cols, vals) = design.row(i);
        for k in 0..p {
            b[i * p + k] = cols.iter().zip(vals).map(|(&c, &a)| a * m_cols[k][c]).sum();
        }
    }
    // MᵀQM
    let qm: Vec<Vec<f64>> = m_cols.iter().map(|c| q.mul_vec(c)).collect();
    let mut mqm = nalgebra::DMatrix::<f64>::zeros(p, p);
    for a in 0..p {
        for c in 0..p {
            mqm[(a, c)] = m_cols[a].iter().zip(&qm[c]).map(|(x, y)| x * y).sum();
        }
    }

    let objective = |mean: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
        let eta = design.mul_vec(mean);
        let parts: Vec<(f64, f64, f64)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let d = rule.expected_derivs(family, &obs[i], eta[i], linpred_sd[i], hyper);
                (d.value, d.d1, d.d2)
            })
            .collect();
        let value = -parts.iter().map(|t| t.0).sum::<f64>() + 0.5 * q.quad_form(mean);
        (value, parts.iter().map(|t| t.1).collect(), parts.iter().map(|t| t.2).collect())
    };

    let mut lambda = vec![0.0; p];
    let (mut value, mut e1, mut e2) = objective(&mean);
    let mut trace = vec![value];
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..settings.max_iter {
        iterations += 1;
        let qmean = q.mul_vec(&mean);
        let mut grad = nalgebra::DVector::<f64>::zeros(p);
        let mut hess = mqm.clone();
        for k in 0..p {
            grad[k] = m_cols[k].iter().zip(&qmean).map(|(x, y)| x * y).sum::<f64>();
        }
        for i in 0..n {
            let row = &b[i * p..(i + 1) * p];
            for a in 0..p {
                grad[a] -= row[a] * e1[i];
                for c in 0..=a {
                    hess[(a, c)] -= row[a] * row[c] * e2[i];
                }
            }
        }
        for a in 0..p {
            for c in 0..a {
                hess[(c, a)] = hess[(a, c)];
            }
        }
        let Some(chol) = hess.clone().cholesky() else {
            log::warn!("VB curvature not positive definite; correction stopped");
            break;
        };
        let step = -chol.solve(&grad);
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=10 {
            let cand: Vec<f64> = mean
                .iter()
                .enumerate()
                .map(|(j, &mj)| mj + scale * (0..p).map(|k| m_cols[k][j] * step[k]).sum::<f64>())
                .collect();
            let (cv, c1, c2) = objective(&cand);
            if cv.is_finite() && cv <= value + 1e-12 * value.abs().max(1.0) {
                accepted = Some((cand, cv, c1, c2));
                break;
            }
            scale *= 0.5;
        }
        let Some((cand, cv, c1, c2)) = accepted else {
            converged = step.amax() < settings.tol;
            break;
        };
        for k in 0..p {
            lambda[k] += scale * step[k];
        }
        mean = cand;
        value = cv;
        e1 = c1;
        e2 = c2;
        trace.push(value);
        if scale * step.amax() < settings.tol {
            converged = true;
            break;
        }
    }
    Ok(VbCorrection { nodes: settings.nodes.clone(), lambda, mean, iterations, converged, objective_trace: trace })
}

/// Per-grid-point quantities feeding the mixtures.
#[derive(Debug, Clone)]
pub struct PointState {
    /// Field mean, VB-corrected when a correction ran.
    pub mean: Vec<f64>,
    pub selinv: SelectedInverse,
    pub linpred_var: Vec<f64>,
    pub vb: Option<VbCorrection>,
}

/// Selected inverses, linear-predictor variances and optional VB
/// corrections at every grid point, computed concurrently in grid order.
pub fn prepare_points(
    post: &HyperPosterior,
    grid: &HyperGrid<ThetaEval>,
    vb: Option<&VbSettings>,
) -> Result<Vec<PointState>, PosteriorError> {
    let mut states = gaussian_points(post, grid)?;
    if let Some(s) = vb {
        apply_vb(post, grid, &mut states, s)?;
    }
    Ok(states)
}

/// Uncorrected per-point states.
pub fn gaussian_points(post: &HyperPosterior, grid: &HyperGrid<ThetaEval>) -> Result<Vec<PointState>, PosteriorError> {
    grid.points
        .par_iter()
        .map(|pt| {
            let selinv = pt.point.inner.factor.selected_inverse();
            let linpred_var = linpred_variance(post.problem().design(), &selinv)?;
            Ok(PointState { mean: pt.point.inner.mu.clone(), selinv, linpred_var, vb: None })
        })
        .collect()
}

/// Replaces the means of `states` by their VB-corrected values.
pub fn apply_vb(
    post: &HyperPosterior,
    grid: &HyperGrid<ThetaEval>,
    states: &mut [PointState],
    settings: &VbSettings,
) -> Result<(), PosteriorError> {
    if settings.nodes.is_empty() {
        return Ok(());
    }
    let corrections: Vec<VbCorrection> = grid
        .points
        .par_iter()
        .zip(states.par_iter())
        .map(|(pt, st)| {
            let sd: Vec<f64> = st.linpred_var.iter().map(|v| v.max(0.0).sqrt()).collect();
            vb_correct(post, &pt.point, &sd, settings)
        })
        .collect::<Result<_, _>>()?;
    for (st, c) in states.iter_mut().zip(corrections) {
        st.mean.clone_from(&c.mean);
        st.vb = Some(c);
    }
    Ok(())
}

/// Mixtures for each latent index.
pub fn latent_marginals(post: &HyperPosterior, grid: &HyperGrid<ThetaEval>, states: &[PointState]) -> MarginalMixture {
    let range = post.latent_range();
    let weights = grid.points.iter().map(|p| p.weight).collect();
    let means = states.iter().map(|s| s.mean[range.clone()].to_vec()).collect();
    let sds = states
        .iter()
        .map(|s| range.clone().map(|j| s.selinv.get(j, j).expect("diagonal is stored").max(0.0).sqrt()).collect())
        .collect();
    MarginalMixture { kind: TargetKind::Latent, weights, means, sds }
}

/// Mixtures for each linear predictor `η = A x`, offsets excluded.
pub fn linpred_marginals(
    post: &HyperPosterior,
    grid: &HyperGrid<ThetaEval>,
    states: &[PointState],
) -> MarginalMixture {
    let design = post.problem().design();
    let weights = grid.points.iter().map(|p| p.weight).collect();
    let means = states.iter().map(|s| design.mul_vec(&s.mean)).collect();
    let sds = states.iter().map(|s| s.linpred_var.iter().map(|v| v.max(0.0).sqrt()).collect()).collect();
    MarginalMixture { kind: TargetKind::LinearPredictor, weights, means, sds }
}

/// Summary of one hyperparameter on the log-precision scale.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperSummary {
    pub name: String,
    pub mode: f64,
    /// Grid-weighted mean.
    pub mean: f64,
    /// Grid-weighted sd, or the Gaussian sd at the mode for a single point.
    pub sd: f64,
    /// Quantiles of the Gaussian approximation at the mode.
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
}

pub fn hyper_summaries<P>(names: &[String], grid: &HyperGrid<P>) -> Vec<HyperSummary> {
    let var = grid.theta_variances();
    names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let mean: f64 = grid.points.iter().map(|p| p.weight * p.theta[j]).sum();
            let sd = if grid.points.len() > 1 {
                let second: f64 = grid.points.iter().map(|p| p.weight * p.theta[j] * p.theta[j]).sum();
                (second - mean * mean).max(0.0).sqrt()
            } else {
                var[j].sqrt()
            };
            let g = Mixture::gaussian(grid.mode[j], var[j].sqrt());
            HyperSummary {
                name: name.clone(),
                mode: grid.mode[j],
                mean,
                sd,
                q025: g.quantile(0.025),
                q50: grid.mode[j],
                q975: g.quantile(0.975),
            }
        })
        .collect()
}
