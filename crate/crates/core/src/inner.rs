//! Gaussian approximation of `π(x | θ, y)`.
//!
//! The likelihood is expanded to second order around the current linear
//! predictor, giving `Q_X = Q(θ) + Aᵀ D A` and right-hand side `Aᵀ b`; the
//! expansion point is moved to the new mean until it stops changing. The
//! linear predictors are not part of the latent field, so `Q_X` is `m × m`
//! whatever the number of observations.

use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::lgm::{DesignMatrix, LatentModel, LgmError};
use crate::likelihood::{self, Family, Observation, PseudoData, C_MIN};
use crate::sparse::{CholFactor, LowerStructure, Ordering, SparseError, SparsePattern, SparseSym, SymbolicCholesky};

/// Default noise precision of the classic formulation, `e¹⁴`.
pub const CLASSIC_TAU_NOISE: f64 = 1_202_604.284_164_776_8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InnerError {
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Lgm(#[from] LgmError),
    #[error("prior dimension {prior} does not match design with {design} columns")]
    DimensionMismatch { prior: usize, design: usize },
    #[error("{got} observations for a design with {rows} rows")]
    ObservationCount { rows: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerSettings {
    pub tol_step: f64,
    /// Gradient tolerance relative to `1 + ‖Aᵀb‖∞`.
    pub tol_grad: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for InnerSettings {
    fn default() -> Self {
        Self { tol_step: 1e-6, tol_grad: 1e-6, max_iter: 50, max_halvings: 10 }
    }
}

/// Mode and precision of the Gaussian approximation at one θ.
#[derive(Debug, Clone)]
pub struct InnerResult {
    pub mu: Vec<f64>,
    /// `A μ`, excluding offsets.
    pub eta: Vec<f64>,
    /// Factor of `Q_X(θ)` at the mode.
    pub factor: CholFactor,
    pub iterations: usize,
    pub converged: bool,
    /// `Σ log π(y_i | η_i, θ)` at the mode.
    pub loglik_at_mode: f64,
    pub logdet_qx: f64,
    /// `μᵀ Q(θ) μ`.
    pub prior_quad: f64,
    pub clamped: usize,
    /// Unnormalized log posterior `−½ xᵀQx + Σ ℓ_i` over accepted iterates.
    pub objective_trace: Vec<f64>,
    /// Infinity norm of the exact gradient at the returned mean.
    pub grad_norm: f64,
}

impl InnerResult {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

#[derive(Debug)]
struct QxAssembly {
    prior: Arc<LowerStructure>,
    structure: Arc<LowerStructure>,
    prior_map: Vec<usize>,
    row_ptr: Vec<usize>,
    pairs: Vec<(usize, f64)>,
    symbolic: Arc<SymbolicCholesky>,
}

impl QxAssembly {
    fn new(prior: &Arc<LowerStructure>, design: &DesignMatrix) -> Result<Self, SparseError> {
        let n = prior.n();
        let mut edges = Vec::with_capacity(prior.nnz() + design.nnz() * 2);
        for j in 0..n {
            for p in prior.col_ptr()[j]..prior.col_ptr()[j + 1] {
                edges.push((prior.row_idx()[p], j));
            }
        }
        for i in 0..design.nrows() {
            let (cols, _) = design.row(i);
            for (a, &ca) in cols.iter().enumerate() {
                for &cb in &cols[..=a] {
                    edges.push((ca, cb));
                }
            }
        }
        let structure = Arc::new(LowerStructure::from_pattern(&SparsePattern::from_edges(n, edges)));
        let mut prior_map = Vec::with_capacity(prior.nnz());
        for j in 0..n {
            for p in prior.col_ptr()[j]..prior.col_ptr()[j + 1] {
                prior_map.push(structure.position(prior.row_idx()[p], j).expect("prior entry in Q_X"));
            }
        }
        let mut row_ptr = Vec::with_capacity(design.nrows() + 1);
        let mut pairs = Vec::new();
        row_ptr.push(0);
        for i in 0..design.nrows() {
            let (cols, vals) = design.row(i);
            for a in 0..cols.len() {
                for b in 0..=a {
                    let pos = structure.position(cols[a], cols[b]).expect("AᵀA entry in Q_X");
                    pairs.push((pos, vals[a] * vals[b]));
                }
            }
            row_ptr.push(pairs.len());
        }
        let symbolic = Arc::new(SymbolicCholesky::analyze(&structure, Ordering::MinimumDegree)?);
        Ok(Self { prior: Arc::clone(prior), structure, prior_map, row_ptr, pairs, symbolic })
    }

    fn assemble(&self, q: &SparseSym, c: &[f64]) -> SparseSym {
        let mut qx = SparseSym::zeros(Arc::clone(&self.structure));
        let vals = qx.values_mut();
        for (&dst, &v) in self.prior_map.iter().zip(q.values()) {
            vals[dst] += v;
        }
        for (i, &ci) in c.iter().enumerate() {
            for &(pos, coef) in &self.pairs[self.row_ptr[i]..self.row_ptr[i + 1]] {
                vals[pos] += ci * coef;
            }
        }
        qx
    }
}

/// Data side of the inner problem; caches the `Q_X` pattern and its
/// symbolic factorization across θ values.
#[derive(Debug)]
pub struct InnerProblem {
    design: DesignMatrix,
    family: Family,
    obs: Vec<Observation>,
    settings: InnerSettings,
    assembly: Mutex<Option<Arc<QxAssembly>>>,
}

impl InnerProblem {
    pub fn new(design: DesignMatrix, family: Family, obs: Vec<Observation>) -> Result<Self, InnerError> {
        if obs.len() != design.nrows() {
            return Err(InnerError::ObservationCount { rows: design.nrows(), got: obs.len() });
        }
        Ok(Self { design, family, obs, settings: InnerSettings::default(), assembly: Mutex::new(None) })
    }

    pub fn with_settings(mut self, settings: InnerSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn design(&self) -> &DesignMatrix {
        &self.design
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn observations(&self) -> &[Observation] {
        &self.obs
    }

    pub fn settings(&self) -> &InnerSettings {
        &self.settings
    }

    fn assembly_for(&self, prior: &Arc<LowerStructure>) -> Result<Arc<QxAssembly>, InnerError> {
        let mut slot = self.assembly.lock().expect("assembly lock");
        if let Some(a) = slot.as_ref() {
            if Arc::ptr_eq(&a.prior, prior) || *a.prior == **prior {
                return Ok(Arc::clone(a));
            }
        }
        let a = Arc::new(QxAssembly::new(prior, &self.design)?);
        *slot = Some(Arc::clone(&a));
        Ok(a)
    }

    /// Structure of `Q_X = Q + AᵀDA` for a prior with the given structure.
    pub fn qx_structure(&self, prior: &Arc<LowerStructure>) -> Result<Arc<LowerStructure>, InnerError> {
        Ok(Arc::clone(&self.assembly_for(prior)?.structure))
    }

    /// `Σ log π(y_i | η_i, θ)`.
    fn loglik(&self, eta: &[f64], hyper: &[f64]) -> f64 {
        self.obs.iter().zip(eta).map(|(o, &e)| self.family.eval(o, e, hyper).value).sum()
    }

    /// Newton iteration for the conditional mode at fixed θ.
    ///
    /// `lik_hyper` are the likelihood hyperparameters (Gaussian noise
    /// log-precision), `q` the prior precision `Q(θ)`.
    pub fn gaussian_approx(
        &self,
        q: &SparseSym,
        lik_hyper: &[f64],
        warm_start: Option<&[f64]>,
    ) -> Result<InnerResult, InnerError> {
        let dim = q.n();
        if dim != self.design.ncols() {
            return Err(InnerError::DimensionMismatch { prior: dim, design: self.design.ncols() });
        }
        let assembly = self.assembly_for(q.structure())?;
        let s = &self.settings;

        let mut mu = match warm_start {
            Some(w) if w.len() == dim => w.to_vec(),
            _ => vec![0.0; dim],
        };
        let mut eta = self.design.mul_vec(&mu);
        let mut ll = self.loglik(&eta, lik_hyper);
        let mut quad = q.quad_form(&mu);
        let mut objective = -0.5 * quad + ll;
        let mut pd = likelihood::pseudo_data(self.family, &self.obs, &eta, lik_hyper);
        let mut trace = vec![objective];
        let mut converged = false;
        let mut iterations = 0;
        let mut grad_norm = f64::INFINITY;

        for _ in 0..s.max_iter {
            iterations += 1;
            let factor = self.factorize(&assembly, q, &pd)?;
            let rhs = self.design.tmul_vec(&pd.b);
            let rhs_norm = inf_norm(&rhs);
            let target = factor.solve(&rhs)?;
            let step: Vec<f64> = target.iter().zip(&mu).map(|(t, m)| t - m).collect();

            let mut scale = 1.0;
            let mut accepted = None;
            for _ in 0..=s.max_halvings {
                let cand: Vec<f64> = mu.iter().zip(&step).map(|(m, d)| m + scale * d).collect();
                let cand_eta = self.design.mul_vec(&cand);
                let cand_ll = self.loglik(&cand_eta, lik_hyper);
                let cand_quad = q.quad_form(&cand);
                let cand_obj = -0.5 * cand_quad + cand_ll;
                if cand_obj.is_finite() && cand_obj >= objective - 1e-12 * objective.abs().max(1.0) {
                    accepted = Some((cand, cand_eta, cand_ll, cand_quad, cand_obj));
                    break;
                }
                scale *= 0.5;
            }
            let Some((cand, cand_eta, cand_ll, cand_quad, cand_obj)) = accepted else {
                // no ascent along the Newton direction: we are at the optimum up to round-off
                grad_norm = self.gradient_norm(q, &mu, &eta, lik_hyper);
                converged = grad_norm <= s.tol_grad * (1.0 + rhs_norm);
                break;
            };
            let moved = scale * inf_norm(&step);
            mu = cand;
            eta = cand_eta;
            ll = cand_ll;
            quad = cand_quad;
            objective = cand_obj;
            trace.push(objective);
            pd = likelihood::pseudo_data(self.family, &self.obs, &eta, lik_hyper);
            grad_norm = self.gradient_norm(q, &mu, &eta, lik_hyper);
            if moved < s.tol_step || grad_norm <= s.tol_grad * (1.0 + rhs_norm) {
                converged = true;
                break;
            }
        }

        let factor = self.factorize(&assembly, q, &pd)?;
        Ok(InnerResult {
            logdet_qx: factor.logdet(),
            mu,
            eta,
            factor,
            iterations,
            converged,
            loglik_at_mode: ll,
            prior_quad: quad,
            clamped: pd.clamped,
            objective_trace: trace,
            grad_norm,
        })
    }

    fn gradient_norm(&self, q: &SparseSym, mu: &[f64], eta: &[f64], hyper: &[f64]) -> f64 {
        let d1: Vec<f64> = self.obs.iter().zip(eta).map(|(o, &e)| self.family.eval(o, e, hyper).d1).collect();
        let g = self.design.tmul_vec(&d1);
        let qmu = q.mul_vec(mu);
        g.iter().zip(&qmu).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    fn factorize(&self, assembly: &QxAssembly, q: &SparseSym, pd: &PseudoData) -> Result<CholFactor, InnerError> {
        let qx = assembly.assemble(q, &pd.c);
        match assembly.symbolic.factorize(&qx) {
            Ok(f) => Ok(f),
            Err(SparseError::NotPositiveDefinite { .. }) => {
                log::warn!("Q_X not positive definite; retrying with raised curvature floor");
                let floor = 1e-2_f64.max(C_MIN);
                let c: Vec<f64> = pd.c.iter().map(|&c| c.max(floor)).collect();
                Ok(assembly.symbolic.factorize(&assembly.assemble(q, &c))?)
            }
            Err(e) => Err(e.into()),
        }
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// One-shot Gaussian approximation for a model at θ.
pub fn gaussian_approx(
    model: &LatentModel,
    design: &DesignMatrix,
    family: Family,
    obs: &[Observation],
    theta: &[f64],
    warm_start: Option<&[f64]>,
) -> Result<InnerResult, InnerError> {
    let q = model.prior_precision(theta)?;
    let problem = InnerProblem::new(design.clone(), family, obs.to_vec())?;
    problem.gaussian_approx(&q, &theta[..model.n_lik_hyper()], warm_start)
}

/// Prior of the classic formulation, where the latent field is `(η, x)`
/// with `η = A x + ε`, `ε ~ N(0, τ⁻¹ I)`:
///
/// ```text
/// [ τI     −τA         ]
/// [ −τAᵀ   Q(θ) + τAᵀA ]
/// ```
#[derive(Debug)]
pub struct ClassicAugmentation {
    n: usize,
    tau_noise: f64,
    structure: Arc<LowerStructure>,
    constant: Vec<f64>,
    prior_map: Vec<usize>,
    latent_prior: Arc<LowerStructure>,
}

impl ClassicAugmentation {
    pub fn new(latent_prior: &Arc<LowerStructure>, design: &DesignMatrix, tau_noise: f64) -> Self {
        let n = design.nrows();
        let m = design.ncols();
        let dim = n + m;
        let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
        for i in 0..n {
            triplets.push((i, i, tau_noise));
            let (cols, vals) = design.row(i);
            for (&c, &a) in cols.iter().zip(vals) {
                triplets.push((n + c, i, -tau_noise * a));
            }
            for x in 0..cols.len() {
                for y in 0..=x {
                    triplets.push((n + cols[x], n + cols[y], tau_noise * vals[x] * vals[y]));
                }
            }
        }
        for j in 0..m {
            for p in latent_prior.col_ptr()[j]..latent_prior.col_ptr()[j + 1] {
                triplets.push((n + latent_prior.row_idx()[p], n + j, 0.0));
            }
        }
        let pattern = SparsePattern::from_edges(dim, triplets.iter().map(|t| (t.0, t.1)));
        let structure = Arc::new(LowerStructure::from_pattern(&pattern));
        let mut constant = vec![0.0; structure.nnz()];
        for &(i, j, v) in &triplets {
            constant[structure.position(i, j).expect("augmented entry")] += v;
        }
        let mut prior_map = Vec::with_capacity(latent_prior.nnz());
        for j in 0..m {
            for p in latent_prior.col_ptr()[j]..latent_prior.col_ptr()[j + 1] {
                prior_map.push(structure.position(n + latent_prior.row_idx()[p], n + j).expect("latent prior entry"));
            }
        }
        Self { n, tau_noise, structure, constant, prior_map, latent_prior: Arc::clone(latent_prior) }
    }

    /// Number of observations, i.e. leading linear-predictor nodes.
    pub fn n(&self) -> usize {
        self.n
    }

    /// `log det` of the augmented prior from that of `Q`; its Schur
    /// complement is `Q` itself.
    pub fn prior_logdet(&self, logdet_q: f64) -> f64 {
        self.n as f64 * self.tau_noise.ln() + logdet_q
    }

    pub fn dim(&self) -> usize {
        self.structure.n()
    }

    pub fn tau_noise(&self) -> f64 {
        self.tau_noise
    }

    /// Augmented prior precision for a latent prior `Q(θ)`.
    pub fn prior(&self, q: &SparseSym) -> SparseSym {
        debug_assert!(**q.structure() == *self.latent_prior);
        let mut values = self.constant.clone();
        for (&dst, &v) in self.prior_map.iter().zip(q.values()) {
            values[dst] += v;
        }
        SparseSym::from_values(Arc::clone(&self.structure), values).expect("augmented sizes agree")
    }

    /// Design of the augmented field: observation `i` sees node `i` only.
    pub fn design(&self) -> DesignMatrix {
        DesignMatrix::from_rows(self.dim(), (0..self.n).map(|i| vec![(i, 1.0)]).collect())
    }
}

/// Classic-formulation approximation over the `(n + m)`-dimensional field.
pub fn classic_augmented_approx(
    model: &LatentModel,
    design: &DesignMatrix,
    family: Family,
    obs: &[Observation],
    theta: &[f64],
    tau_noise: f64,
) -> Result<InnerResult, InnerError> {
    let q = model.prior_precision(theta)?;
    let aug = ClassicAugmentation::new(q.structure(), design, tau_noise);
    let problem = InnerProblem::new(aug.design(), family, obs.to_vec())?;
    problem.gaussian_approx(&aug.prior(&q), &theta[..model.n_lik_hyper()], None)
}
