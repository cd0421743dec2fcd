//! Latent Gaussian model assembly: component layout, prior precision
//! `Q(θ)`, the design matrix `A` with `η = A x`, and hyperparameter priors.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::data::DataTable;
use crate::likelihood::{Family, LikelihoodError, Observation};
use crate::model_spec::{FamilyName, ModelSpec, NOISE};
use crate::sparse::{LowerStructure, SparsePattern, SparseSym};

/// Prior precision of intercepts and linear effects.
pub const DEFAULT_FIXED_PRECISION: f64 = 0.001;
/// Relative diagonal jitter that makes intrinsic random walks proper.
pub const RW_JITTER: f64 = 1e-5;
/// Precision of the soft sum-to-zero pseudo-observation.
pub const CONSTRAINT_PRECISION: f64 = 1e6;
/// Default starting log-precision of random-effect components.
pub const DEFAULT_INITIAL_LOG_PRECISION: f64 = 4.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LgmError {
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("component `{name}` is empty or too small (size {size})")]
    EmptyComponent { name: String, size: usize },
    #[error("column `{column}` has a non-finite value at row {row}")]
    NonFiniteCovariate { column: String, row: usize },
    #[error("column `{column}` row {row}: level {value} is not an integer in 0..{size}")]
    InvalidLevel { column: String, row: usize, value: f64, size: usize },
    #[error("θ has {got} entries, model needs {expected}")]
    MissingHyperparameter { expected: usize, got: usize },
    #[error("observation row {row} has no latent component")]
    EmptyRow { row: usize },
    #[error("family `{0:?}` must be expanded before model assembly")]
    UnsupportedFamily(FamilyName),
    #[error("row {row}: {source}")]
    Observation { row: usize, source: LikelihoodError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentKind {
    Intercept,
    Linear,
    Iid,
    Rw1,
    Rw2,
}

impl ComponentKind {
    pub fn has_hyper(self) -> bool {
        matches!(self, ComponentKind::Iid | ComponentKind::Rw1 | ComponentKind::Rw2)
    }

    pub fn is_fixed_effect(self) -> bool {
        matches!(self, ComponentKind::Intercept | ComponentKind::Linear)
    }

    pub fn min_size(self) -> usize {
        match self {
            ComponentKind::Rw1 => 2,
            ComponentKind::Rw2 => 3,
            _ => 1,
        }
    }

    fn is_intrinsic(self) -> bool {
        matches!(self, ComponentKind::Rw1 | ComponentKind::Rw2)
    }
}

/// Gamma(shape, rate) prior on a precision `τ = e^θ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl Default for GammaPrior {
    fn default() -> Self {
        Self { shape: 1.0, rate: 5e-5 }
    }
}

impl GammaPrior {
    pub fn new(shape: f64, rate: f64) -> Self {
        assert!(shape > 0.0 && rate > 0.0, "gamma prior needs positive shape and rate");
        Self { shape, rate }
    }

    /// Log density of `θ = log τ`, Jacobian included.
    pub fn log_density_theta(&self, theta: f64) -> f64 {
        let (a, r) = (self.shape, self.rate);
        a * r.ln() - ln_gamma(a) + a * theta - r * theta.exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperParam {
    pub name: String,
    pub prior: GammaPrior,
    pub initial: f64,
}

/// One additive term of the linear predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSpec {
    pub name: String,
    pub kind: ComponentKind,
    pub size: usize,
    pub coef: f64,
    pub scaled: bool,
    pub constrained: bool,
    pub prior: GammaPrior,
    pub initial: f64,
}

impl ComponentSpec {
    pub fn new(name: impl Into<String>, kind: ComponentKind, size: usize) -> Self {
        Self {
            name: name.into(),
            kind,
            size,
            coef: 1.0,
            scaled: kind.is_intrinsic(),
            constrained: kind.is_intrinsic(),
            prior: GammaPrior::default(),
            initial: DEFAULT_INITIAL_LOG_PRECISION,
        }
    }

    pub fn intercept() -> Self {
        Self::new("intercept", ComponentKind::Intercept, 1)
    }

    pub fn linear(name: impl Into<String>) -> Self {
        Self::new(name, ComponentKind::Linear, 1)
    }

    pub fn with_coef(mut self, coef: f64) -> Self {
        self.coef = coef;
        self
    }

    pub fn with_prior(mut self, prior: GammaPrior) -> Self {
        self.prior = prior;
        self
    }

    pub fn with_initial(mut self, initial: f64) -> Self {
        self.initial = initial;
        self
    }

    pub fn scaled(mut self, scaled: bool) -> Self {
        self.scaled = scaled;
        self
    }

    pub fn constrained(mut self, constrained: bool) -> Self {
        self.constrained = constrained;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub spec: ComponentSpec,
    /// Latent indices owned by this component.
    pub range: Range<usize>,
    /// Index of its log-precision in θ.
    pub hyper: Option<usize>,
    /// Generalized-variance scaling constant (1 when unscaled).
    pub scale: f64,
}

#[derive(Debug, Clone, Copy)]
struct PriorTerm {
    pos: usize,
    hyper: Option<usize>,
    scaled: f64,
    fixed: f64,
}

/// Component layout and prior of the latent field.
#[derive(Debug, Clone)]
pub struct LatentModel {
    components: Vec<Component>,
    m: usize,
    hypers: Vec<HyperParam>,
    n_lik_hyper: usize,
    fixed_precision: f64,
    structure: Arc<LowerStructure>,
    terms: Vec<PriorTerm>,
}

impl LatentModel {
    /// Lays components out contiguously. Likelihood hyperparameters come
    /// first in θ, followed by one log-precision per random-effect component.
    pub fn new(
        specs: Vec<ComponentSpec>,
        lik_hypers: Vec<HyperParam>,
        fixed_precision: f64,
    ) -> Result<Self, LgmError> {
        let n_lik_hyper = lik_hypers.len();
        let mut hypers = lik_hypers;
        let mut components = Vec::with_capacity(specs.len());
        let mut next = 0;
        for spec in specs {
            if spec.size < spec.kind.min_size() || (spec.kind.is_fixed_effect() && spec.size != 1) {
                return Err(LgmError::EmptyComponent { name: spec.name.clone(), size: spec.size });
            }
            let hyper = spec.kind.has_hyper().then(|| {
                hypers.push(HyperParam { name: spec.name.clone(), prior: spec.prior, initial: spec.initial });
                hypers.len() - 1
            });
            let scale = if spec.kind.is_intrinsic() && spec.scaled { rw_scale(spec.kind, spec.size) } else { 1.0 };
            let range = next..next + spec.size;
            next += spec.size;
            components.push(Component { spec, range, hyper, scale });
        }
        let m = next;

        let mut entries: Vec<(usize, usize, Option<usize>, f64, f64)> = Vec::new();
        for c in &components {
            let s = c.range.start;
            let k = c.spec.size;
            match c.spec.kind {
                ComponentKind::Intercept | ComponentKind::Linear => {
                    entries.push((s, s, None, 0.0, fixed_precision));
                }
                ComponentKind::Iid => {
                    for i in 0..k {
                        entries.push((s + i, s + i, c.hyper, 1.0, 0.0));
                    }
                }
                ComponentKind::Rw1 | ComponentKind::Rw2 => {
                    let r = rw_structure(c.spec.kind, k);
                    for j in 0..k {
                        for i in j..k {
                            let mut v = r[(i, j)];
                            if i == j {
                                v += RW_JITTER;
                            }
                            let fixed = if c.spec.constrained { CONSTRAINT_PRECISION } else { 0.0 };
                            if v != 0.0 || fixed != 0.0 {
                                entries.push((s + i, s + j, c.hyper, c.scale * v, fixed));
                            }
                        }
                    }
                }
            }
        }
        let pattern = SparsePattern::from_edges(m, entries.iter().map(|e| (e.0, e.1)));
        let structure = Arc::new(LowerStructure::from_pattern(&pattern));
        let terms = entries
            .iter()
            .map(|&(i, j, hyper, scaled, fixed)| PriorTerm {
                pos: structure.position(i, j).expect("entry in prior pattern"),
                hyper,
                scaled,
                fixed,
            })
            .collect();

        Ok(Self { components, m, hypers, n_lik_hyper, fixed_precision, structure, terms })
    }

    /// Latent dimension.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn component(&self, name: &str) -> Option<&Component> {
        self.components.iter().find(|c| c.spec.name == name)
    }

    pub fn hypers(&self) -> &[HyperParam] {
        &self.hypers
    }

    /// Number of hyperparameters (length of θ).
    pub fn q(&self) -> usize {
        self.hypers.len()
    }

    /// Number of leading θ entries that belong to the likelihood.
    pub fn n_lik_hyper(&self) -> usize {
        self.n_lik_hyper
    }

    pub fn fixed_precision(&self) -> f64 {
        self.fixed_precision
    }

    pub fn initial_theta(&self) -> Vec<f64> {
        self.hypers.iter().map(|h| h.initial).collect()
    }

    pub fn prior_structure(&self) -> &Arc<LowerStructure> {
        &self.structure
    }

    /// Latent indices of intercepts and linear effects.
    pub fn fixed_effect_indices(&self) -> Vec<usize> {
        self.components.iter().filter(|c| c.spec.kind.is_fixed_effect()).map(|c| c.range.start).collect()
    }

    /// Human-readable label of every latent index.
    pub fn latent_labels(&self) -> Vec<(String, usize)> {
        let mut out = Vec::with_capacity(self.m);
        for c in &self.components {
            for k in 0..c.spec.size {
                out.push((c.spec.name.clone(), k));
            }
        }
        out
    }

    /// Block-diagonal prior precision `Q(θ)`.
    pub fn prior_precision(&self, theta: &[f64]) -> Result<SparseSym, LgmError> {
        if theta.len() != self.q() {
            return Err(LgmError::MissingHyperparameter { expected: self.q(), got: theta.len() });
        }
        let mut q = SparseSym::zeros(Arc::clone(&self.structure));
        let vals = q.values_mut();
        for t in &self.terms {
            let tau = t.hyper.map_or(0.0, |h| theta[h].exp());
            vals[t.pos] += tau * t.scaled + t.fixed;
        }
        Ok(q)
    }

    /// `log π(θ)`: sum of log-gamma densities on the log-precision scale.
    pub fn theta_log_prior(&self, theta: &[f64]) -> f64 {
        self.hypers.iter().zip(theta).map(|(h, &t)| h.prior.log_density_theta(t)).sum()
    }
}

/// First- or second-order difference structure matrix `DᵀD`.
pub fn rw_structure(kind: ComponentKind, size: usize) -> DMatrix<f64> {
    let stencil: &[f64] = match kind {
        ComponentKind::Rw1 => &[-1.0, 1.0],
        ComponentKind::Rw2 => &[1.0, -2.0, 1.0],
        _ => panic!("not a random walk: {kind:?}"),
    };
    let rows = size + 1 - stencil.len();
    let mut d = DMatrix::zeros(rows, size);
    for r in 0..rows {
        for (k, &s) in stencil.iter().enumerate() {
            d[(r, r + k)] = s;
        }
    }
    d.transpose() * d
}

/// Scaling constant `s` such that `s·R` has marginal variances (under the
/// generalized inverse) with geometric mean one.
pub fn rw_scale(kind: ComponentKind, size: usize) -> f64 {
    static CACHE: OnceLock<Mutex<HashMap<(ComponentKind, usize), f64>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(&s) = cache.lock().expect("scale cache").get(&(kind, size)) {
        return s;
    }
    let r = rw_structure(kind, size);
    let nullity = match kind {
        ComponentKind::Rw1 => 1,
        _ => 2,
    };
    // orthonormal null-space basis: constants (and a centred linear trend)
    let mut v = DMatrix::zeros(size, nullity);
    let n = size as f64;
    for i in 0..size {
        v[(i, 0)] = 1.0 / n.sqrt();
    }
    if nullity == 2 {
        let mean = (n - 1.0) / 2.0;
        let norm: f64 = (0..size).map(|i| (i as f64 - mean).powi(2)).sum::<f64>().sqrt();
        for i in 0..size {
            v[(i, 1)] = (i as f64 - mean) / norm;
        }
    }
    let vvt = &v * v.transpose();
    let inv = (&r + &vvt).cholesky().expect("R + VVᵀ is positive definite").inverse();
    let ginv = inv - vvt;
    let mean_log: f64 = (0..size).map(|i| ginv[(i, i)].ln()).sum::<f64>() / n;
    let s = mean_log.exp();
    cache.lock().expect("scale cache").insert((kind, size), s);
    s
}

/// Sparse `n × m` design matrix in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl DesignMatrix {
    /// Rows given as `(column, value)` lists; duplicate columns are summed.
    pub fn from_rows(ncols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            for (c, v) in row {
                assert!(c < ncols, "column {c} outside {ncols}");
                if col_idx.len() > *row_ptr.last().unwrap() && *col_idx.last().unwrap() == c {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self { ncols, row_ptr, col_idx, values }
    }

    pub fn from_dense(a: &DMatrix<f64>) -> Self {
        let rows = (0..a.nrows())
            .map(|i| (0..a.ncols()).filter(|&j| a[(i, j)] != 0.0).map(|j| (j, a[(i, j)])).collect())
            .collect();
        Self::from_rows(a.ncols(), rows)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_rows(n, (0..n).map(|i| vec![(i, 1.0)]).collect())
    }

    pub fn nrows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    /// `A x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows())
            .map(|i| {
                let (c, v) = self.row(i);
                c.iter().zip(v).map(|(&j, &a)| a * x[j]).sum()
            })
            .collect()
    }

    /// `Aᵀ y`
    pub fn tmul_vec(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.nrows());
        let mut out = vec![0.0; self.ncols];
        for (i, &yi) in y.iter().enumerate() {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                out[j] += a * yi;
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.nrows(), self.ncols);
        for i in 0..self.nrows() {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                d[(i, j)] += a;
            }
        }
        d
    }
}

fn column<'a>(data: &'a DataTable, name: &str) -> Result<&'a [f64], LgmError> {
    let col = data.column(name).ok_or_else(|| LgmError::UnknownColumn(name.to_owned()))?;
    if let Some(row) = col.iter().position(|v| !v.is_finite()) {
        return Err(LgmError::NonFiniteCovariate { column: name.to_owned(), row });
    }
    Ok(col)
}

/// Resolves a parsed model description against a data table.
pub fn build_model(spec: &ModelSpec, data: &DataTable) -> Result<(LatentModel, DesignMatrix), LgmError> {
    let family = family_of(spec)?;
    let n = data.n_rows();
    let mut specs = Vec::with_capacity(spec.components.len());
    let mut columns: Vec<Option<&[f64]>> = Vec::with_capacity(spec.components.len());
    for entry in &spec.components {
        let col = entry.column.as_deref().map(|c| column(data, c)).transpose()?;
        let size = match entry.kind {
            ComponentKind::Intercept | ComponentKind::Linear => 1,
            _ => {
                let col = col.expect("validated: non-intercept has column");
                let inferred = col.iter().fold(0.0_f64, |m, &v| m.max(v)) as usize + usize::from(n > 0);
                let size = entry.size.unwrap_or(inferred);
                for (row, &v) in col.iter().enumerate() {
                    if v < 0.0 || v.fract() != 0.0 || v as usize >= size {
                        return Err(LgmError::InvalidLevel {
                            column: entry.column.clone().unwrap_or_default(),
                            row,
                            value: v,
                            size,
                        });
                    }
                }
                size
            }
        };
        if size < entry.kind.min_size() {
            return Err(LgmError::EmptyComponent { name: entry.name.clone(), size });
        }
        let mut c = ComponentSpec::new(entry.name.clone(), entry.kind, size);
        if let Some(v) = entry.coef {
            c.coef = v;
        }
        if let Some(v) = entry.scaled {
            c.scaled = v;
        }
        if let Some(v) = entry.constrained {
            c.constrained = v;
        }
        if let Some(v) = entry.initial {
            c.initial = v;
        }
        if let Some(p) = spec.priors.get(&entry.name) {
            c.prior = *p;
        }
        specs.push(c);
        columns.push(col);
    }

    let mut lik_hypers = Vec::new();
    if family == Family::Gaussian {
        let y = column(data, spec.data.response.as_deref().unwrap_or_default())?;
        lik_hypers.push(HyperParam {
            name: NOISE.to_owned(),
            prior: spec.priors.get(NOISE).copied().unwrap_or_default(),
            initial: gaussian_initial(y),
        });
    }
    let model = LatentModel::new(specs, lik_hypers, spec.model.fixed_precision.unwrap_or(DEFAULT_FIXED_PRECISION))?;

    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::with_capacity(model.components.len());
        for (c, col) in model.components.iter().zip(&columns) {
            let coef = c.spec.coef;
            match c.spec.kind {
                ComponentKind::Intercept => row.push((c.range.start, coef)),
                ComponentKind::Linear => row.push((c.range.start, coef * col.unwrap()[i])),
                _ => row.push((c.range.start + col.unwrap()[i] as usize, coef)),
            }
        }
        if row.is_empty() {
            return Err(LgmError::EmptyRow { row: i });
        }
        rows.push(row);
    }
    let design = DesignMatrix::from_rows(model.m, rows);
    Ok((model, design))
}

fn gaussian_initial(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    if y.len() < 2 {
        return 0.0;
    }
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var > 0.0 {
        -var.ln()
    } else {
        0.0
    }
}

pub fn family_of(spec: &ModelSpec) -> Result<Family, LgmError> {
    match spec.model.family {
        FamilyName::Gaussian => Ok(Family::Gaussian),
        FamilyName::Poisson => Ok(Family::Poisson),
        FamilyName::Binomial | FamilyName::Bernoulli => Ok(Family::Binomial),
        FamilyName::Coxph => Err(LgmError::UnsupportedFamily(FamilyName::Coxph)),
    }
}

/// Per-row observations (response, offset/exposure, trials) for the family.
pub fn build_observations(spec: &ModelSpec, data: &DataTable) -> Result<(Family, Vec<Observation>), LgmError> {
    let family = family_of(spec)?;
    let y = column(data, spec.data.response.as_deref().unwrap_or_default())?;
    let offset = spec.data.offset.as_deref().map(|c| column(data, c)).transpose()?;
    let exposure = spec.data.exposure.as_deref().map(|c| column(data, c)).transpose()?;
    let trials = spec.data.trials.as_deref().map(|c| column(data, c)).transpose()?;
    let mut obs = Vec::with_capacity(y.len());
    for (i, &yi) in y.iter().enumerate() {
        let mut o = Observation::new(yi);
        if let Some(off) = offset {
            o.offset = off[i];
        }
        if let Some(e) = exposure {
            o = o.with_exposure(e[i]);
        }
        if let Some(t) = trials {
            o.trials = t[i];
        }
        family.validate(&o).map_err(|source| LgmError::Observation { row: i, source })?;
        obs.push(o);
    }
    Ok((family, obs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_spec::{ComponentEntry, ModelSpec};
    use nalgebra::DVector;

    fn poisson_spec() -> ModelSpec {
        ModelSpec::new(FamilyName::Poisson).with_response("y")
    }

    #[test]
    fn intercept_only_design() {
        let spec = poisson_spec().with_component(ComponentEntry::new("b0", ComponentKind::Intercept, None));
        let data = DataTable::new().with_column("y", vec![1.0, 2.0, 3.0]).unwrap();
        let (model, a) = build_model(&spec, &data).unwrap();
        assert_eq!(model.m(), 1);
        assert_eq!(a.to_dense(), DMatrix::from_element(3, 1, 1.0));
    }

    #[test]
    fn intercept_and_linear_rows() {
        let spec = poisson_spec()
            .with_component(ComponentEntry::new("b0", ComponentKind::Intercept, None))
            .with_component(ComponentEntry::new("x", ComponentKind::Linear, Some("x")));
        let data = DataTable::new()
            .with_column("y", vec![1.0, 2.0])
            .unwrap()
            .with_column("x", vec![0.5, -0.5])
            .unwrap();
        let (_, a) = build_model(&spec, &data).unwrap();
        assert_eq!(a.to_dense(), DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 1.0, -0.5]));
    }

    #[test]
    fn rasch_design_by_enumeration() {
        let mut item = ComponentEntry::new("alpha", ComponentKind::Iid, Some("item"));
        item.coef = Some(-1.0);
        let spec = ModelSpec::new(FamilyName::Binomial)
            .with_response("y")
            .with_component(ComponentEntry::new("kappa", ComponentKind::Iid, Some("student")))
            .with_component(item);
        let student = vec![0.0, 0.0, 1.0, 1.0];
        let items = vec![0.0, 1.0, 0.0, 1.0];
        let data = DataTable::new()
            .with_column("y", vec![1.0, 0.0, 1.0, 1.0])
            .unwrap()
            .with_column("student", student.clone())
            .unwrap()
            .with_column("item", items.clone())
            .unwrap();
        let (model, a) = build_model(&spec, &data).unwrap();
        assert_eq!(model.m(), 4);
        let mut oracle = DMatrix::zeros(4, 4);
        for r in 0..4 {
            oracle[(r, student[r] as usize)] = 1.0;
            oracle[(r, 2 + items[r] as usize)] = -1.0;
        }
        assert_eq!(a.to_dense(), oracle);
        assert_eq!(model.q(), 2);
    }

    #[test]
    fn build_errors() {
        let data = DataTable::new().with_column("y", vec![1.0]).unwrap();
        let spec = poisson_spec().with_component(ComponentEntry::new("x", ComponentKind::Linear, Some("nope")));
        assert_eq!(build_model(&spec, &data).unwrap_err(), LgmError::UnknownColumn("nope".into()));
        let data2 = data.clone().with_column("x", vec![f64::NAN]).unwrap();
        let spec2 = poisson_spec().with_component(ComponentEntry::new("x", ComponentKind::Linear, Some("x")));
        assert!(matches!(build_model(&spec2, &data2), Err(LgmError::NonFiniteCovariate { .. })));
        let data3 = data.clone().with_column("g", vec![0.0]).unwrap();
        let spec3 = poisson_spec().with_component(ComponentEntry::new("r", ComponentKind::Rw1, Some("g")));
        assert!(matches!(build_model(&spec3, &data3), Err(LgmError::EmptyComponent { .. })));
        let spec4 = poisson_spec();
        assert_eq!(build_model(&spec4, &data).unwrap_err(), LgmError::EmptyRow { row: 0 });
    }

    #[test]
    fn iid_prior_is_tau_identity() {
        let model = LatentModel::new(vec![ComponentSpec::new("u", ComponentKind::Iid, 3)], vec![], 0.001).unwrap();
        let q = model.prior_precision(&[2f64.ln()]).unwrap();
        let d = q.to_dense();
        assert!((d - DMatrix::identity(3, 3) * 2.0).abs().max() < 1e-14);
        assert!(matches!(model.prior_precision(&[]), Err(LgmError::MissingHyperparameter { .. })));
    }

    #[test]
    fn rw1_structure_plus_jitter() {
        let spec = ComponentSpec::new("r", ComponentKind::Rw1, 3).scaled(false).constrained(false);
        let model = LatentModel::new(vec![spec], vec![], 0.001).unwrap();
        let q = model.prior_precision(&[0.0]).unwrap().to_dense();
        let e = RW_JITTER;
        let want = DMatrix::from_row_slice(3, 3, &[1.0 + e, -1.0, 0.0, -1.0, 2.0 + e, -1.0, 0.0, -1.0, 1.0 + e]);
        assert!((q - want).abs().max() < 1e-14);
    }

    #[test]
    fn rw2_scaling_gives_unit_geometric_mean_variance() {
        // independent route: SVD pseudo-inverse of the scaled structure
        let size = 5;
        let s = rw_scale(ComponentKind::Rw2, size);
        let scaled = rw_structure(ComponentKind::Rw2, size) * s;
        let pinv = scaled.pseudo_inverse(1e-10).unwrap();
        let gm = ((0..size).map(|i| pinv[(i, i)].ln()).sum::<f64>() / size as f64).exp();
        assert!((gm - 1.0).abs() < 1e-10, "{gm}");
    }

    #[test]
    fn scaling_flag_is_a_scalar_factor() {
        let a = LatentModel::new(vec![ComponentSpec::new("r", ComponentKind::Rw1, 6).constrained(false)], vec![], 0.001)
            .unwrap();
        let b = LatentModel::new(
            vec![ComponentSpec::new("r", ComponentKind::Rw1, 6).constrained(false).scaled(false)],
            vec![],
            0.001,
        )
        .unwrap();
        let s = rw_scale(ComponentKind::Rw1, 6);
        let qa = a.prior_precision(&[0.3]).unwrap().to_dense();
        let qb = b.prior_precision(&[0.3 + s.ln()]).unwrap().to_dense();
        assert!((qa - qb).abs().max() < 1e-12);
    }

    #[test]
    fn constrained_rw_is_positive_definite_for_any_theta() {
        let model = LatentModel::new(vec![ComponentSpec::new("r", ComponentKind::Rw2, 20)], vec![], 0.001).unwrap();
        for t in [-10.0, 0.0, 10.0] {
            model.prior_precision(&[t]).unwrap().factorize().unwrap();
        }
    }

    #[test]
    fn theta_log_prior_hand_values() {
        assert!((GammaPrior::new(1.0, 1.0).log_density_theta(0.0) + 1.0).abs() < 1e-15);
        let v = GammaPrior::new(1.0, 5e-5).log_density_theta(0.0);
        assert!((v - (5e-5f64.ln() - 5e-5)).abs() < 1e-14);
    }

    #[test]
    fn theta_prior_integrates_to_one() {
        // trapezoid quadrature in θ over a wide range
        for prior in [GammaPrior::new(1.0, 1.0), GammaPrior::new(2.5, 0.3), GammaPrior::new(1.0, 5e-5)] {
            let (lo, hi, n) = (-40.0, 25.0, 400_000);
            let h = (hi - lo) / n as f64;
            let mut total = 0.0;
            for k in 0..=n {
                let w = if k == 0 || k == n { 0.5 } else { 1.0 };
                total += w * prior.log_density_theta(lo + k as f64 * h).exp();
            }
            assert!((total * h - 1.0).abs() < 1e-6, "{prior:?}: {}", total * h);
        }
    }

    #[test]
    fn design_matvecs_match_dense() {
        let a = DesignMatrix::from_rows(3, vec![vec![(0, 1.0), (2, -2.0)], vec![(1, 0.5)], vec![(2, 1.0), (2, 1.0)]]);
        let d = a.to_dense();
        assert_eq!(d[(2, 2)], 2.0);
        let x = [1.0, 2.0, 3.0];
        let ax = a.mul_vec(&x);
        let y = [1.0, -1.0, 0.5];
        let aty = a.tmul_vec(&y);
        let ax_d = &d * DVector::from_column_slice(&x);
        let aty_d = d.transpose() * DVector::from_column_slice(&y);
        for i in 0..3 {
            assert!((ax[i] - ax_d[i]).abs() < 1e-15 && (aty[i] - aty_d[i]).abs() < 1e-15);
        }
    }
}
