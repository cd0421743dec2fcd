//! Hyperparameter posterior `π̃(θ | y)`: evaluation, mode search with
//! smart gradients, Hessian at the mode and the integration grid.

use std::collections::{BTreeMap, VecDeque};
use std::ops::Range;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use thiserror::Error;

use crate::inner::{ClassicAugmentation, InnerError, InnerProblem, InnerResult, InnerSettings};
use crate::lgm::{DesignMatrix, LatentModel, LgmError};
use crate::likelihood::{Family, Observation};
use crate::sparse::{LowerStructure, Ordering, SparseError, SparseSym, SymbolicCholesky};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OuterError {
    #[error(transparent)]
    Inner(#[from] InnerError),
    #[error(transparent)]
    Lgm(#[from] LgmError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error("log posterior is not finite at θ = {0:?}")]
    NonFinite(Vec<f64>),
    #[error("θ has {got} entries, expected {expected}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuterSettings {
    /// Central-difference step of the gradient.
    pub grad_step: f64,
    /// Central-difference step of the Hessian.
    pub hess_step: f64,
    pub grad_tol: f64,
    pub step_tol: f64,
    pub max_iter: usize,
    /// Largest move of a single quasi-Newton step in any coordinate.
    pub max_step: f64,
    /// Lattice spacing of the grid in standardized coordinates.
    pub dz: f64,
    /// Points with `log π̃(θ*) − log π̃(θ) > drop` are discarded.
    pub drop: f64,
}

impl Default for OuterSettings {
    fn default() -> Self {
        Self {
            grad_step: 5e-3,
            hess_step: 1e-2,
            grad_tol: 1e-4,
            step_tol: 1e-6,
            max_iter: 100,
            max_step: 2.0,
            dz: 0.75,
            drop: 2.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IntStrategy {
    /// Grid collapsed to the mode.
    EmpiricalBayes,
    #[default]
    Grid,
}

/// Something that can be evaluated at θ, returning `log π̃(θ | y)` and a
/// payload reused as a warm start for nearby evaluations.
pub trait HyperObjective: Sync {
    type Point: Send + Sync;

    fn dim(&self) -> usize;

    fn evaluate(&self, theta: &[f64], warm: Option<&Self::Point>) -> Result<(f64, Self::Point), OuterError>;
}

/// Plain function of θ as an objective, for tests and toy problems.
pub struct FnObjective<F> {
    q: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> FnObjective<F> {
    pub fn new(q: usize, f: F) -> Self {
        Self { q, f }
    }
}

impl<F: Fn(&[f64]) -> f64 + Sync> HyperObjective for FnObjective<F> {
    type Point = ();

    fn dim(&self) -> usize {
        self.q
    }

    fn evaluate(&self, theta: &[f64], _warm: Option<&()>) -> Result<(f64, ()), OuterError> {
        let v = (self.f)(theta);
        if v.is_finite() {
            Ok((v, ()))
        } else {
            Err(OuterError::NonFinite(theta.to_vec()))
        }
    }
}

/// Result of one evaluation of the hyperparameter posterior.
#[derive(Debug, Clone)]
pub struct ThetaEval {
    pub theta: Vec<f64>,
    pub log_post: f64,
    pub inner: InnerResult,
    /// `log det Q(θ)` of the field prior.
    pub logdet_prior: f64,
}

/// Model, data and cached symbolic work needed to evaluate `π̃(θ | y)`.
///
/// In the classic formulation the Gaussian field is `(η, x)` and the
/// latent block sits after the `n` linear predictors.
#[derive(Debug)]
pub struct HyperPosterior {
    model: LatentModel,
    design: DesignMatrix,
    problem: InnerProblem,
    classic: Option<ClassicAugmentation>,
    prior_symbolic: Mutex<Option<Arc<SymbolicCholesky>>>,
}

impl HyperPosterior {
    pub fn new(model: LatentModel, design: DesignMatrix, family: Family, obs: Vec<Observation>) -> Result<Self, OuterError> {
        check_dims(&model, &design)?;
        let problem = InnerProblem::new(design.clone(), family, obs)?;
        Ok(Self { model, design, problem, classic: None, prior_symbolic: Mutex::new(None) })
    }

    pub fn classic(
        model: LatentModel,
        design: DesignMatrix,
        family: Family,
        obs: Vec<Observation>,
        tau_noise: f64,
    ) -> Result<Self, OuterError> {
        check_dims(&model, &design)?;
        let aug = ClassicAugmentation::new(model.prior_structure(), &design, tau_noise);
        let problem = InnerProblem::new(aug.design(), family, obs)?;
        Ok(Self { model, design, problem, classic: Some(aug), prior_symbolic: Mutex::new(None) })
    }

    pub fn with_inner_settings(mut self, settings: InnerSettings) -> Self {
        self.problem = self.problem.with_settings(settings);
        self
    }

    pub fn model(&self) -> &LatentModel {
        &self.model
    }

    /// Design of the latent field, `η = A x`.
    pub fn design(&self) -> &DesignMatrix {
        &self.design
    }

    pub fn problem(&self) -> &InnerProblem {
        &self.problem
    }

    pub fn is_classic(&self) -> bool {
        self.classic.is_some()
    }

    /// Dimension of the Gaussian field: `m`, or `n + m` in classic mode.
    pub fn field_dim(&self) -> usize {
        self.problem.design().ncols()
    }

    /// Position of the latent block inside the Gaussian field.
    pub fn latent_range(&self) -> Range<usize> {
        let off = self.classic.as_ref().map_or(0, ClassicAugmentation::n);
        off..off + self.model.m()
    }

    /// Prior precision of the Gaussian field at θ.
    pub fn field_prior(&self, theta: &[f64]) -> Result<SparseSym, OuterError> {
        let q = self.model.prior_precision(theta)?;
        Ok(match &self.classic {
            Some(aug) => aug.prior(&q),
            None => q,
        })
    }

    fn prior_factor_logdet(&self, q: &SparseSym) -> Result<f64, OuterError> {
        let symbolic = {
            let mut slot = self.prior_symbolic.lock().expect("prior symbolic lock");
            match slot.as_ref() {
                Some(s) => Arc::clone(s),
                None => {
                    let s = Arc::new(SymbolicCholesky::analyze(q.structure(), Ordering::MinimumDegree)?);
                    *slot = Some(Arc::clone(&s));
                    s
                }
            }
        };
        Ok(symbolic.factorize(q)?.logdet())
    }

    /// `log π̃(θ | y)` up to a constant:
    /// `log π(θ) + ½ log|Q| − ½ μᵀQμ + Σ log π(y_i | η_i, θ) − ½ log|Q_X|`.
    pub fn log_post_theta(&self, theta: &[f64], warm: Option<&[f64]>) -> Result<ThetaEval, OuterError> {
        if theta.len() != self.model.q() {
            return Err(OuterError::Dimension { expected: self.model.q(), got: theta.len() });
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(OuterError::NonFinite(theta.to_vec()));
        }
        let latent_q = self.model.prior_precision(theta)?;
        let logdet_latent = self.prior_factor_logdet(&latent_q)?;
        let (q, logdet_prior) = match &self.classic {
            Some(aug) => (aug.prior(&latent_q), aug.prior_logdet(logdet_latent)),
            None => (latent_q, logdet_latent),
        };
        let inner = self.problem.gaussian_approx(&q, &theta[..self.model.n_lik_hyper()], warm)?;
        let log_post = self.model.theta_log_prior(theta) + 0.5 * logdet_prior - 0.5 * inner.prior_quad
            + inner.loglik_at_mode
            - 0.5 * inner.logdet_qx;
        if !log_post.is_finite() {
            return Err(OuterError::NonFinite(theta.to_vec()));
        }
        Ok(ThetaEval { theta: theta.to_vec(), log_post, inner, logdet_prior })
    }

    /// Structure of `Q_X`, shared by every θ.
    pub fn qx_structure(&self) -> Result<Arc<LowerStructure>, OuterError> {
        let q = self.field_prior(&self.model.initial_theta())?;
        Ok(self.problem.qx_structure(q.structure())?)
    }
}

fn check_dims(model: &LatentModel, design: &DesignMatrix) -> Result<(), OuterError> {
    if model.m() != design.ncols() {
        return Err(InnerError::DimensionMismatch { prior: model.m(), design: design.ncols() }.into());
    }
    Ok(())
}

impl HyperObjective for HyperPosterior {
    type Point = ThetaEval;

    fn dim(&self) -> usize {
        self.model.q()
    }

    fn evaluate(&self, theta: &[f64], warm: Option<&ThetaEval>) -> Result<(f64, ThetaEval), OuterError> {
        let e = self.log_post_theta(theta, warm.map(|w| w.inner.mu.as_slice()))?;
        Ok((e.log_post, e))
    }
}

/// Orthonormal basis built from recent optimizer steps.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBasis {
    q: usize,
    history: VecDeque<Vec<f64>>,
    g: DMatrix<f64>,
}

impl GradientBasis {
    /// Empty history: `G = I`.
    pub fn canonical(q: usize) -> Self {
        Self { q, history: VecDeque::new(), g: DMatrix::identity(q, q) }
    }

    /// Basis from explicit directions, most recent first.
    pub fn from_directions(q: usize, directions: &[Vec<f64>]) -> Self {
        let mut b = Self::canonical(q);
        for d in directions.iter().rev() {
            b.push_step(d);
        }
        b
    }

    pub fn dim(&self) -> usize {
        self.q
    }

    /// Normalized steps, most recent first.
    pub fn history(&self) -> impl Iterator<Item = &[f64]> {
        self.history.iter().map(Vec::as_slice)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.g
    }

    /// Records an accepted step `Δθ`, keeping the latest `q` directions.
    pub fn push_step(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.q, "step dimension");
        let norm = delta.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return;
        }
        self.history.push_front(delta.iter().map(|x| x / norm).collect());
        self.history.truncate(self.q);
        self.g = mgs_basis(self.q, self.history.iter().map(Vec::as_slice));
    }
}

/// Modified Gram–Schmidt over the given directions, completed with the
/// canonical vectors until `q` columns are found.
fn mgs_basis<'a>(q: usize, directions: impl Iterator<Item = &'a [f64]>) -> DMatrix<f64> {
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(q);
    let canonical = (0..q).map(|k| DVector::from_fn(q, |i, _| if i == k { 1.0 } else { 0.0 }));
    let candidates = directions.map(DVector::from_column_slice).chain(canonical);
    for mut v in candidates {
        if cols.len() == q {
            break;
        }
        let original = v.norm();
        for _ in 0..2 {
            for u in &cols {
                let p = u.dot(&v);
                v.axpy(-p, u, 1.0);
            }
        }
        let norm = v.norm();
        if norm > 1e-8 * original.max(1.0) {
            cols.push(v / norm);
        }
    }
    DMatrix::from_columns(&cols)
}

/// Central-difference gradient along the columns of `G`, mapped back to θ.
pub fn smart_gradient<F>(f: &F, theta: &[f64], basis: &GradientBasis, h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let q = theta.len();
    let g = basis.matrix();
    let directional: Vec<f64> = (0..q)
        .into_par_iter()
        .map(|k| {
            let col = g.column(k);
            let plus: Vec<f64> = theta.iter().zip(col.iter()).map(|(t, c)| t + h * c).collect();
            let minus: Vec<f64> = theta.iter().zip(col.iter()).map(|(t, c)| t - h * c).collect();
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect();
    (g * DVector::from_vec(directional)).as_slice().to_vec()
}

/// Mode of `π̃(θ | y)` and the state of the search.
#[derive(Debug, Clone)]
pub struct ModeResult<P> {
    pub theta: Vec<f64>,
    pub log_post: f64,
    pub point: P,
    pub gradient: Vec<f64>,
    pub basis: GradientBasis,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

fn objective_values<O: HyperObjective>(obj: &O, points: &[Vec<f64>], warm: &O::Point) -> Vec<f64> {
    points
        .par_iter()
        .map(|t| obj.evaluate(t, Some(warm)).map_or(f64::NEG_INFINITY, |(v, _)| v))
        .collect()
}

fn gradient_at<O: HyperObjective>(obj: &O, theta: &[f64], warm: &O::Point, basis: &GradientBasis, h: f64) -> Vec<f64> {
    let q = theta.len();
    let g = basis.matrix();
    let mut points = Vec::with_capacity(2 * q);
    for k in 0..q {
        for sign in [1.0, -1.0] {
            points.push(theta.iter().zip(g.column(k).iter()).map(|(t, c)| t + sign * h * c).collect());
        }
    }
    let vals = objective_values(obj, &points, warm);
    let directional: Vec<f64> = (0..q).map(|k| (vals[2 * k] - vals[2 * k + 1]) / (2.0 * h)).collect();
    (g * DVector::from_vec(directional)).as_slice().to_vec()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Quasi-Newton ascent on `log π̃(θ | y)` with smart gradients.
pub fn find_mode<O: HyperObjective>(
    obj: &O,
    start: &[f64],
    settings: &OuterSettings,
) -> Result<ModeResult<O::Point>, OuterError> {
    let q = obj.dim();
    if start.len() != q {
        return Err(OuterError::Dimension { expected: q, got: start.len() });
    }
    let (mut f, mut point) = obj.evaluate(start, None)?;
    let mut evaluations = 1;
    let mut theta = start.to_vec();
    let mut basis = GradientBasis::canonical(q);
    if q == 0 {
        return Ok(ModeResult {
            theta,
            log_post: f,
            point,
            gradient: Vec::new(),
            basis,
            iterations: 0,
            evaluations,
            converged: true,
        });
    }

    let mut grad = gradient_at(obj, &theta, &point, &basis, settings.grad_step);
    evaluations += 2 * q;
    // inverse Hessian approximation of −log π̃
    let mut hinv = DMatrix::<f64>::identity(q, q);
    let mut first = true;
    let mut iterations = 0;
    let mut converged = inf_norm(&grad) < settings.grad_tol;

    while !converged && iterations < settings.max_iter {
        iterations += 1;
        let g = DVector::from_column_slice(&grad);
        let mut dir = &hinv * &g;
        if dir.dot(&g) <= 0.0 {
            hinv = DMatrix::identity(q, q);
            dir = g.clone();
        }
        let longest = dir.amax();
        if longest > settings.max_step {
            dir *= settings.max_step / longest;
        }

        let mut alpha = 1.0;
        let slope = dir.dot(&g);
        let accepted = loop {
            let cand: Vec<f64> = theta.iter().zip(dir.iter()).map(|(t, d)| t + alpha * d).collect();
            evaluations += 1;
            if let Ok((fc, pc)) = obj.evaluate(&cand, Some(&point)) {
                if fc >= f + 1e-4 * alpha * slope {
                    break Some((cand, fc, pc));
                }
            }
            alpha *= 0.5;
            if alpha * longest.min(settings.max_step) < settings.step_tol {
                break None;
            }
        };
        let Some((cand, fc, pc)) = accepted else {
            // no ascent at the resolution of the step tolerance
            converged = true;
            break;
        };

        let step: Vec<f64> = cand.iter().zip(&theta).map(|(a, b)| a - b).collect();
        basis.push_step(&step);
        theta = cand;
        f = fc;
        point = pc;
        let new_grad = gradient_at(obj, &theta, &point, &basis, settings.grad_step);
        evaluations += 2 * q;

        let s = DVector::from_column_slice(&step);
        let y = DVector::from_iterator(q, grad.iter().zip(&new_grad).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if first {
                hinv = DMatrix::identity(q, q) * (sy / y.dot(&y));
                first = false;
            }
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(q, q);
            let left = &eye - rho * &s * y.transpose();
            let right = &eye - rho * &y * s.transpose();
            hinv = &left * &hinv * &right + rho * &s * s.transpose();
        }
        grad = new_grad;
        converged = inf_norm(&grad) < settings.grad_tol || inf_norm(&step) < settings.step_tol;
    }

    Ok(ModeResult { theta, log_post: f, point, gradient: grad, basis, iterations, evaluations, converged })
}

/// One retained integration point.
#[derive(Debug, Clone)]
pub struct ThetaPoint<P> {
    pub theta: Vec<f64>,
    /// Standardized coordinates.
    pub z: Vec<f64>,
    pub log_post: f64,
    /// Normalized integration weight.
    pub weight: f64,
    pub point: P,
}

/// Integration grid around the mode.
#[derive(Debug, Clone)]
pub struct HyperGrid<P> {
    pub mode: Vec<f64>,
    /// Negative Hessian of `log π̃` at the mode, after eigenvalue repair.
    pub hessian: DMatrix<f64>,
    /// Eigenvectors `V` of the covariance `H⁻¹`.
    pub eigenvectors: DMatrix<f64>,
    /// Eigenvalues `Λ` of `H⁻¹`.
    pub eigenvalues: Vec<f64>,
    pub points: Vec<ThetaPoint<P>>,
    /// Points whose evaluation failed and were skipped.
    pub failures: usize,
}

impl<P> HyperGrid<P> {
    /// `θ(z) = θ* + V Λ^{1/2} z`.
    pub fn theta_at(&self, z: &[f64]) -> Vec<f64> {
        theta_from_z(&self.mode, &self.eigenvectors, &self.eigenvalues, z)
    }

    /// Gaussian approximation of the marginal variance of each θ entry.
    pub fn theta_variances(&self) -> Vec<f64> {
        let q = self.mode.len();
        (0..q)
            .map(|i| (0..q).map(|k| self.eigenvectors[(i, k)].powi(2) * self.eigenvalues[k]).sum())
            .collect()
    }
}

fn theta_from_z(mode: &[f64], v: &DMatrix<f64>, lambda: &[f64], z: &[f64]) -> Vec<f64> {
    let mut t = mode.to_vec();
    for (k, &zk) in z.iter().enumerate() {
        if zk == 0.0 {
            continue;
        }
        let s = lambda[k].sqrt() * zk;
        for (i, ti) in t.iter_mut().enumerate() {
            *ti += v[(i, k)] * s;
        }
    }
    t
}

/// Negative Hessian of `log π̃` by central differences in the frame of
/// `basis`, rotated back to θ.
pub fn neg_hessian<O: HyperObjective>(obj: &O, mode: &ModeResult<O::Point>, h: f64) -> DMatrix<f64> {
    let q = mode.theta.len();
    let g = mode.basis.matrix();
    let at = |coef: &[(usize, f64)]| -> Vec<f64> {
        let mut t = mode.theta.clone();
        for &(k, c) in coef {
            for (i, ti) in t.iter_mut().enumerate() {
                *ti += c * h * g[(i, k)];
            }
        }
        t
    };
    let mut points = Vec::new();
    for a in 0..q {
        points.push(at(&[(a, 1.0)]));
        points.push(at(&[(a, -1.0)]));
        for b in 0..a {
            for (sa, sb) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                points.push(at(&[(a, sa), (b, sb)]));
            }
        }
    }
    let vals = objective_values(obj, &points, &mode.point);
    let f0 = mode.log_post;
    let mut hg = DMatrix::<f64>::zeros(q, q);
    let mut idx = 0;
    for a in 0..q {
        let (fp, fm) = (vals[idx], vals[idx + 1]);
        idx += 2;
        hg[(a, a)] = -(fp - 2.0 * f0 + fm) / (h * h);
        for b in 0..a {
            let (pp, pm, mp, mm) = (vals[idx], vals[idx + 1], vals[idx + 2], vals[idx + 3]);
            idx += 4;
            let v = -(pp - pm - mp + mm) / (4.0 * h * h);
            hg[(a, b)] = v;
            hg[(b, a)] = v;
        }
    }
    let h_theta = g * hg * g.transpose();
    (&h_theta + h_theta.transpose()) * 0.5
}

/// Eigen-repair: eigenvalues below `1e-6 · max` (or non-finite) are raised
/// to that floor. Returns the repaired matrix, eigenvectors and eigenvalues.
pub fn repair_spd(h: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, Vec<f64>) {
    let q = h.nrows();
    if q == 0 {
        return (h.clone(), DMatrix::zeros(0, 0), Vec::new());
    }
    let eig = SymmetricEigen::new(h.clone());
    let max = eig.eigenvalues.iter().copied().filter(|v| v.is_finite()).fold(0.0_f64, f64::max);
    let floor = if max > 0.0 { 1e-6 * max } else { 1.0 };
    let vals: Vec<f64> = eig.eigenvalues.iter().map(|&v| if v.is_finite() && v > floor { v } else { floor }).collect();
    // order eigenpairs by decreasing precision for a stable layout
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    let mut v = DMatrix::zeros(q, q);
    let mut lam = Vec::with_capacity(q);
    for (k, &o) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(o).clone_owned();
        // deterministic sign: largest-magnitude entry positive
        let imax = col.iamax();
        if col[imax] < 0.0 {
            col = -col;
        }
        v.set_column(k, &col);
        lam.push(vals[o]);
    }
    let repaired = &v * DMatrix::from_diagonal(&DVector::from_vec(lam.clone())) * v.transpose();
    (repaired, v, lam)
}

/// Hessian at the mode and the weighted grid of θ points.
pub fn hessian_and_grid<O: HyperObjective>(
    obj: &O,
    mode: ModeResult<O::Point>,
    settings: &OuterSettings,
    strategy: IntStrategy,
) -> HyperGrid<O::Point> {
    let q = mode.theta.len();
    let raw = neg_hessian(obj, &mode, settings.hess_step);
    let (hessian, v, prec) = repair_spd(&raw);
    let eigenvalues: Vec<f64> = prec.iter().map(|p| 1.0 / p).collect();
    let f0 = mode.log_post;
    let centre = ThetaPoint { theta: mode.theta.clone(), z: vec![0.0; q], log_post: f0, weight: 1.0, point: mode.point };
    let mut grid = HyperGrid { mode: mode.theta, hessian, eigenvectors: v, eigenvalues, points: Vec::new(), failures: 0 };
    if q == 0 || strategy == IntStrategy::EmpiricalBayes {
        grid.points.push(centre);
        return grid;
    }

    let offsets = neighbour_offsets(q);
    let mut seen: BTreeMap<Vec<i64>, bool> = BTreeMap::new();
    let origin = vec![0i64; q];
    seen.insert(origin.clone(), true);
    let mut kept: Vec<(Vec<i64>, ThetaPoint<O::Point>)> = Vec::new();
    let mut frontier = vec![origin];
    let mut evaluated: Vec<Vec<i64>> = Vec::new();
    while !frontier.is_empty() {
        let mut next: Vec<Vec<i64>> = Vec::new();
        for k in &frontier {
            for off in &offsets {
                if q > 2 && !on_axis_extension(k, off) {
                    continue;
                }
                let cand: Vec<i64> = k.iter().zip(off).map(|(a, b)| a + b).collect();
                if !seen.contains_key(&cand) {
                    seen.insert(cand.clone(), false);
                    next.push(cand);
                }
            }
        }
        next.sort();
        evaluated.extend(next.iter().cloned());
        let evals: Vec<_> = next
            .par_iter()
            .map(|k| {
                let z: Vec<f64> = k.iter().map(|&i| i as f64 * settings.dz).collect();
                let theta = theta_from_z(&grid.mode, &grid.eigenvectors, &grid.eigenvalues, &z);
                let r = obj.evaluate(&theta, Some(&centre.point));
                (z, theta, r)
            })
            .collect();
        let mut frontier_next = Vec::new();
        for (k, (z, theta, r)) in next.into_iter().zip(evals) {
            match r {
                Ok((lp, point)) if f0 - lp <= settings.drop => {
                    seen.insert(k.clone(), true);
                    kept.push((k.clone(), ThetaPoint { theta, z, log_post: lp, weight: 0.0, point }));
                    frontier_next.push(k);
                }
                Ok(_) => {}
                Err(e) => {
                    log::warn!("skipping grid point θ = {theta:?}: {e}");
                    grid.failures += 1;
                }
            }
        }
        frontier = frontier_next;
    }

    kept.push((vec![0; q], centre));
    kept.sort_by(|a, b| a.0.cmp(&b.0));
    let lmax = kept.iter().map(|(_, p)| p.log_post).fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = kept.iter().map(|(_, p)| (p.log_post - lmax).exp()).sum();
    grid.points = kept
        .into_iter()
        .map(|(_, mut p)| {
            p.weight = (p.log_post - lmax).exp() / total;
            p
        })
        .collect();
    grid
}

/// Axis and diagonal lattice moves.
fn neighbour_offsets(q: usize) -> Vec<Vec<i64>> {
    if q > 2 {
        let mut out = Vec::with_capacity(2 * q);
        for k in 0..q {
            for s in [-1, 1] {
                let mut o = vec![0; q];
                o[k] = s;
                out.push(o);
            }
        }
        return out;
    }
    let mut out = Vec::new();
    let total = 3usize.pow(q as u32);
    for code in 0..total {
        let mut c = code;
        let o: Vec<i64> = (0..q)
            .map(|_| {
                let d = (c % 3) as i64 - 1;
                c /= 3;
                d
            })
            .collect();
        if o.iter().any(|&d| d != 0) {
            out.push(o);
        }
    }
    out
}

/// For `q > 2` the grid stays on the axes: from the origin any axis move is
/// allowed, elsewhere only moves further along the current axis.
fn on_axis_extension(k: &[i64], off: &[i64]) -> bool {
    let nz: Vec<usize> = (0..k.len()).filter(|&i| k[i] != 0).collect();
    match nz.as_slice() {
        [] => true,
        [a] => off[*a].signum() == k[*a].signum() && off.iter().enumerate().all(|(i, &d)| i == *a || d == 0),
        _ => false,
    }
}
