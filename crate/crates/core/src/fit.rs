//! End-to-end fitting: model assembly, mode search, grid, marginals,
//! optional VB correction, summaries and output files.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use thiserror::Error;

use crate::coxph::{self, AugmentedData, CoxError};
use crate::data::{format_number, DataError, DataTable};
use crate::inner::{InnerSettings, CLASSIC_TAU_NOISE};
use crate::lgm::{self, DesignMatrix, LatentModel, LgmError};
use crate::likelihood::{Family, Observation, DEFAULT_GH_NODES};
use crate::model_spec::{FamilyName, ModelSpec};
use crate::outer::{find_mode, hessian_and_grid, HyperPosterior, IntStrategy, OuterError, OuterSettings};
use crate::posterior::{
    apply_vb, default_vb_nodes, gaussian_points, hyper_summaries, latent_marginals, linpred_marginals, HyperSummary, PosteriorError,
    Summary, VbSettings,
};

#[derive(Debug, Error)]
pub enum FitError {
    #[error("model: {0}")]
    Lgm(#[from] LgmError),
    #[error("survival data: {0}")]
    Cox(#[from] CoxError),
    #[error("hyperparameter posterior: {0}")]
    Outer(#[from] OuterError),
    #[error("marginals: {0}")]
    Posterior(#[from] PosteriorError),
    #[error("output: {0}")]
    Data(#[from] DataError),
    #[error("output: {0}")]
    Io(#[from] std::io::Error),
    #[error("thread pool: {0}")]
    Threads(String),
    #[error("VB node {0} is not a latent index")]
    VbNode(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strategy {
    /// Means of the Gaussian approximation.
    Gaussian,
    /// Means with the variational correction.
    #[default]
    Vb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Formulation {
    /// Latent field without linear predictors.
    #[default]
    Modern,
    /// Linear predictors in the field with a tiny noise term.
    Classic,
}

macro_rules! parse_enum {
    ($ty:ty, $($text:literal => $variant:expr),+) => {
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($text => Ok($variant),)+
                    other => Err(format!("unknown value `{other}`")),
                }
            }
        }
    };
}

parse_enum!(Strategy, "gaussian" => Strategy::Gaussian, "vb" => Strategy::Vb);
parse_enum!(IntStrategy, "eb" => IntStrategy::EmpiricalBayes, "grid" => IntStrategy::Grid);
parse_enum!(Formulation, "modern" => Formulation::Modern, "classic" => Formulation::Classic);

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub strategy: Strategy,
    pub int_strategy: IntStrategy,
    pub mode: Formulation,
    pub threads: usize,
    pub seed: u64,
    pub n_gh: usize,
    /// Latent indices for the VB correction; defaults to the fixed effects.
    pub vb_nodes: Option<Vec<usize>>,
    pub inner: InnerSettings,
    pub outer: OuterSettings,
    pub tau_noise: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::default(),
            int_strategy: IntStrategy::default(),
            mode: Formulation::default(),
            threads: 1,
            seed: 1,
            n_gh: DEFAULT_GH_NODES,
            vb_nodes: None,
            inner: InnerSettings::default(),
            outer: OuterSettings::default(),
            tau_noise: CLASSIC_TAU_NOISE,
        }
    }
}

/// Wall-clock seconds per phase.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Timings {
    pub build: f64,
    pub mode: f64,
    pub grid: f64,
    pub marginals: f64,
    pub vb: f64,
}

impl Timings {
    pub fn total(&self) -> f64 {
        self.build + self.mode + self.grid + self.marginals + self.vb
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub timings: Timings,
    /// Latent dimension.
    pub m: usize,
    /// Rows of data supplied (subjects for survival models).
    pub n: usize,
    /// Poisson rows after survival augmentation.
    pub augmented: Option<usize>,
    /// Dimension of the Gaussian field actually factorized.
    pub field_dim: usize,
    pub hyper_count: usize,
    pub grid_points: usize,
    pub grid_failures: usize,
    pub mode_theta: Vec<f64>,
    pub mode_iterations: usize,
    pub mode_converged: bool,
    pub inner_converged: bool,
    pub vb_converged: bool,
    pub formulation: Formulation,
    pub strategy: Strategy,
    pub int_strategy: IntStrategy,
}

impl RunReport {
    pub fn all_converged(&self) -> bool {
        self.mode_converged && self.inner_converged && self.vb_converged && self.grid_failures == 0
    }

    /// Flat `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let t = &self.timings;
        let _ = writeln!(s, "formulation = {}", match self.formulation {
            Formulation::Modern => "modern",
            Formulation::Classic => "classic",
        });
        let _ = writeln!(s, "strategy = {}", match self.strategy {
            Strategy::Gaussian => "gaussian",
            Strategy::Vb => "vb",
        });
        let _ = writeln!(s, "int_strategy = {}", match self.int_strategy {
            IntStrategy::EmpiricalBayes => "eb",
            IntStrategy::Grid => "grid",
        });
        let _ = writeln!(s, "m = {}", self.m);
        let _ = writeln!(s, "n = {}", self.n);
        if let Some(a) = self.augmented {
            let _ = writeln!(s, "augmented_rows = {a}");
        }
        let _ = writeln!(s, "field_dim = {}", self.field_dim);
        let _ = writeln!(s, "hyperparameters = {}", self.hyper_count);
        let _ = writeln!(s, "grid_points = {}", self.grid_points);
        let _ = writeln!(s, "grid_failures = {}", self.grid_failures);
        let theta: Vec<String> = self.mode_theta.iter().map(|v| format_number(*v)).collect();
        let _ = writeln!(s, "mode_theta = {}", theta.join(" "));
        let _ = writeln!(s, "mode_iterations = {}", self.mode_iterations);
        let _ = writeln!(s, "mode_converged = {}", self.mode_converged);
        let _ = writeln!(s, "inner_converged = {}", self.inner_converged);
        let _ = writeln!(s, "vb_converged = {}", self.vb_converged);
        let _ = writeln!(s, "time_build = {:.6}", t.build);
        let _ = writeln!(s, "time_mode = {:.6}", t.mode);
        let _ = writeln!(s, "time_grid = {:.6}", t.grid);
        let _ = writeln!(s, "time_marginals = {:.6}", t.marginals);
        let _ = writeln!(s, "time_vb = {:.6}", t.vb);
        let _ = writeln!(s, "time_total = {:.6}", t.total());
        s
    }
}

/// Summary of one latent entry.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSummary {
    pub component: String,
    pub index: usize,
    pub summary: Summary,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub latent: Vec<LatentSummary>,
    pub linpred: Vec<Summary>,
    pub hyper: Vec<HyperSummary>,
    pub report: RunReport,
    /// Present for survival models.
    pub augmented: Option<AugmentedData>,
}

impl FitResult {
    /// Summaries of every entry of a named component.
    pub fn component(&self, name: &str) -> Vec<Summary> {
        self.latent.iter().filter(|l| l.component == name).map(|l| l.summary).collect()
    }

    pub fn latent_table(&self) -> String {
        let mut s = String::from("component,index,mean,sd,q0.025,q0.5,q0.975\n");
        for l in &self.latent {
            let _ = writeln!(s, "{},{},{}", l.component, l.index, summary_fields(&l.summary));
        }
        s
    }

    pub fn linpred_table(&self) -> String {
        let mut s = String::from("row,mean,sd,q0.025,q0.5,q0.975\n");
        for (i, l) in self.linpred.iter().enumerate() {
            let _ = writeln!(s, "{i},{}", summary_fields(l));
        }
        s
    }

    pub fn hyper_table(&self) -> String {
        let mut s = String::from("name,mode,mean,sd,q0.025,q0.5,q0.975\n");
        for h in &self.hyper {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                h.name,
                format_number(h.mode),
                format_number(h.mean),
                format_number(h.sd),
                format_number(h.q025),
                format_number(h.q50),
                format_number(h.q975)
            );
        }
        s
    }

    /// Writes `latent.csv`, `linpred.csv`, `hyper.csv`, `report.txt` and,
    /// for survival models, `augmented.csv`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), FitError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("latent.csv"), self.latent_table())?;
        std::fs::write(dir.join("linpred.csv"), self.linpred_table())?;
        std::fs::write(dir.join("hyper.csv"), self.hyper_table())?;
        std::fs::write(dir.join("report.txt"), self.report.to_text())?;
        if let Some(a) = &self.augmented {
            a.to_table()?.write_csv(dir.join("augmented.csv"))?;
        }
        Ok(())
    }
}

fn summary_fields(s: &Summary) -> String {
    [s.mean, s.sd, s.q025, s.q50, s.q975].iter().map(|v| format_number(*v)).collect::<Vec<_>>().join(",")
}

/// Fits a model description against a data table.
pub fn fit(spec: &ModelSpec, data: &DataTable, config: &FitConfig) -> Result<FitResult, FitError> {
    let start = Instant::now();
    let (spec, data, augmented, n) = if spec.model.family == FamilyName::Coxph {
        let ex = coxph::expand(spec, data)?;
        let n = data.n_rows();
        (ex.spec, ex.data, Some(ex.augmented), n)
    } else {
        (spec.clone(), data.clone(), None, data.n_rows())
    };
    let (model, design) = lgm::build_model(&spec, &data)?;
    let (family, obs) = lgm::build_observations(&spec, &data)?;
    let build = start.elapsed().as_secs_f64();
    let mut result = fit_model(model, design, family, obs, config)?;
    result.report.timings.build += build;
    result.report.n = n;
    result.report.augmented = augmented.as_ref().map(AugmentedData::len);
    result.augmented = augmented;
    Ok(result)
}

/// Fits an assembled model.
pub fn fit_model(
    model: LatentModel,
    design: DesignMatrix,
    family: Family,
    obs: Vec<Observation>,
    config: &FitConfig,
) -> Result<FitResult, FitError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads.max(1))
        .build()
        .map_err(|e| FitError::Threads(e.to_string()))?;
    pool.install(|| run(model, design, family, obs, config))
}

fn run(
    model: LatentModel,
    design: DesignMatrix,
    family: Family,
    obs: Vec<Observation>,
    config: &FitConfig,
) -> Result<FitResult, FitError> {
    let t0 = Instant::now();
    let n = obs.len();
    let labels = model.latent_labels();
    let names: Vec<String> = model.hypers().iter().map(|h| h.name.clone()).collect();
    let start = model.initial_theta();
    let post = match config.mode {
        Formulation::Modern => HyperPosterior::new(model, design, family, obs)?,
        Formulation::Classic => HyperPosterior::classic(model, design, family, obs, config.tau_noise)?,
    };
    let post = post.with_inner_settings(config.inner);
    let build = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let mode = find_mode(&post, &start, &config.outer)?;
    let mode_time = t1.elapsed().as_secs_f64();
    let mode_theta = mode.theta.clone();
    let (mode_iterations, mode_converged) = (mode.iterations, mode.converged);

    let t2 = Instant::now();
    let grid = hessian_and_grid(&post, mode, &config.outer, config.int_strategy);
    let grid_time = t2.elapsed().as_secs_f64();

    let vb = match config.strategy {
        Strategy::Gaussian => None,
        Strategy::Vb => {
            let nodes = match &config.vb_nodes {
                Some(nodes) => {
                    let range = post.latent_range();
                    let mut out = Vec::with_capacity(nodes.len());
                    for &j in nodes {
                        if j >= post.model().m() {
                            return Err(FitError::VbNode(j));
                        }
                        out.push(range.start + j);
                    }
                    out
                }
                None => default_vb_nodes(&post),
            };
            let mut s = VbSettings::new(nodes);
            s.n_gh = config.n_gh;
            Some(s)
        }
    };

    let t3 = Instant::now();
    let mut states = gaussian_points(&post, &grid)?;
    let marg_time = t3.elapsed().as_secs_f64();
    let t4 = Instant::now();
    if let Some(s) = &vb {
        apply_vb(&post, &grid, &mut states, s)?;
    }
    let vb_time = t4.elapsed().as_secs_f64();

    let lat = latent_marginals(&post, &grid, &states).summaries();
    let eta = linpred_marginals(&post, &grid, &states).summaries();
    let hyper = hyper_summaries(&names, &grid);
    let inner_converged = grid.points.iter().all(|p| p.point.inner.converged);
    let vb_converged = states.iter().all(|s| s.vb.as_ref().is_none_or(|c| c.converged));

    let latent = labels
        .into_iter()
        .zip(lat)
        .map(|((component, index), summary)| LatentSummary { component, index, summary })
        .collect();
    let report = RunReport {
        timings: Timings { build, mode: mode_time, grid: grid_time, marginals: marg_time, vb: vb_time },
        m: post.model().m(),
        n,
        augmented: None,
        field_dim: post.field_dim(),
        hyper_count: post.model().q(),
        grid_points: grid.points.len(),
        grid_failures: grid.failures,
        mode_theta,
        mode_iterations,
        mode_converged,
        inner_converged,
        vb_converged,
        formulation: config.mode,
        strategy: config.strategy,
        int_strategy: config.int_strategy,
    };
    Ok(FitResult { latent, linpred: eta, hyper, report, augmented: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lgm::{ComponentKind, ComponentSpec};
    use crate::model_spec::ComponentEntry;
    use crate::oracle::{quadrature_posterior, OracleModel};
    use nalgebra::{DMatrix, DVector};

    fn gaussian_toy() -> (ModelSpec, DataTable) {
        let x: Vec<f64> = (0..20).map(|i| (i as f64 - 9.5) / 6.0).collect();
        let y: Vec<f64> = x.iter().enumerate().map(|(i, &x)| 1.0 + 0.7 * x + 0.3 * ((i * 7 % 5) as f64 - 2.0)).collect();
        let mut spec = ModelSpec::new(FamilyName::Gaussian)
            .with_response("y")
            .with_component(ComponentEntry::new("b0", ComponentKind::Intercept, None))
            .with_component(ComponentEntry::new("x", ComponentKind::Linear, Some("x")));
        spec.model.fixed_precision = Some(0.01);
        let data = DataTable::new().with_column("y", y).unwrap().with_column("x", x).unwrap();
        (spec, data)
    }

    #[test]
    fn gaussian_toy_matches_closed_form() {
        let (spec, data) = gaussian_toy();
        let config = FitConfig { int_strategy: IntStrategy::EmpiricalBayes, strategy: Strategy::Gaussian, ..FitConfig::default() };
        let r = fit(&spec, &data, &config).unwrap();
        assert!(r.report.all_converged());
        let tau = r.report.mode_theta[0].exp();
        let x = data.column("x").unwrap();
        let a = DMatrix::from_fn(20, 2, |i, j| if j == 0 { 1.0 } else { x[i] });
        let y = DVector::from_column_slice(data.column("y").unwrap());
        let qx = DMatrix::identity(2, 2) * 0.01 + a.transpose() * &a * tau;
        let cov = qx.clone().try_inverse().unwrap();
        let mu = &cov * a.transpose() * y * tau;
        let eta_cov = &a * &cov * a.transpose();
        let eta = &a * &mu;
        for (j, l) in r.latent.iter().enumerate() {
            assert!((l.summary.mean - mu[j]).abs() < 1e-8);
            assert!((l.summary.sd - cov[(j, j)].sqrt()).abs() < 1e-8);
        }
        for (i, s) in r.linpred.iter().enumerate() {
            assert!((s.mean - eta[i]).abs() < 1e-8);
            assert!((s.sd - eta_cov[(i, i)].sqrt()).abs() < 1e-8);
        }
        assert_eq!(r.component("x").len(), 1);
    }

    #[test]
    fn vb_mean_closer_to_quadrature_than_gaussian() {
        let model = LatentModel::new(vec![ComponentSpec::intercept()], Vec::new(), 1.0).unwrap();
        let design = DesignMatrix::from_rows(1, vec![vec![(0, 1.0)]; 3]);
        let obs: Vec<Observation> = [0.0, 1.0, 0.0].iter().map(|&y| Observation::new(y)).collect();
        let exact = quadrature_posterior(&OracleModel::new(&model, &design, Family::Poisson, &obs).unwrap(), 1e-10)
            .unwrap()
            .means[0];
        let run = |strategy| {
            let config = FitConfig { strategy, ..FitConfig::default() };
            fit_model(model.clone(), design.clone(), Family::Poisson, obs.clone(), &config).unwrap()
        };
        let g = run(Strategy::Gaussian).latent[0].summary.mean;
        let v = run(Strategy::Vb).latent[0].summary.mean;
        assert!((v - exact).abs() < (g - exact).abs(), "vb {v}, gaussian {g}, exact {exact}");
    }

    #[test]
    fn thread_count_does_not_change_numbers() {
        let spec = ModelSpec::parse(
            "[model]\nfamily = \"poisson\"\n[data]\nresponse = \"y\"\n\
             [[component]]\nname = \"b0\"\nkind = \"intercept\"\n\
             [[component]]\nname = \"g\"\nkind = \"iid\"\ncolumn = \"g\"\nsize = 6\n",
        )
        .unwrap();
        let g: Vec<f64> = (0..60).map(|i| (i % 6) as f64).collect();
        let y: Vec<f64> = (0..60).map(|i| ((i * 13 % 7) as f64 / 2.0).floor() + (i % 6 == 2) as u8 as f64 * 3.0).collect();
        let data = DataTable::new().with_column("y", y).unwrap().with_column("g", g).unwrap();
        let one = fit(&spec, &data, &FitConfig::default()).unwrap();
        let four = fit(&spec, &data, &FitConfig { threads: 4, ..FitConfig::default() }).unwrap();
        assert_eq!(one.latent_table(), four.latent_table());
        assert_eq!(one.linpred_table(), four.linpred_table());
        assert_eq!(one.hyper_table(), four.hyper_table());
        assert!(one.report.grid_points > 1);
    }

    #[test]
    fn classic_mode_reports_augmented_field() {
        let (spec, data) = gaussian_toy();
        let config = FitConfig { mode: Formulation::Classic, strategy: Strategy::Gaussian, ..FitConfig::default() };
        let r = fit(&spec, &data, &config).unwrap();
        assert_eq!(r.report.field_dim, 22);
        assert_eq!(r.report.m, 2);
        let modern = fit(&spec, &data, &FitConfig { strategy: Strategy::Gaussian, ..FitConfig::default() }).unwrap();
        assert_eq!(modern.report.field_dim, 2);
        for (a, b) in r.latent.iter().zip(&modern.latent) {
            assert!((a.summary.mean - b.summary.mean).abs() < 1e-3 * b.summary.sd);
        }
    }

    #[test]
    fn enums_parse_and_bad_nodes_are_rejected() {
        assert_eq!("vb".parse::<Strategy>(), Ok(Strategy::Vb));
        assert_eq!("eb".parse::<IntStrategy>(), Ok(IntStrategy::EmpiricalBayes));
        assert_eq!("classic".parse::<Formulation>(), Ok(Formulation::Classic));
        assert!("laplace".parse::<Strategy>().is_err());
        let (spec, data) = gaussian_toy();
        let config = FitConfig { vb_nodes: Some(vec![5]), ..FitConfig::default() };
        assert!(matches!(fit(&spec, &data, &config), Err(FitError::VbNode(5))));
    }

    #[test]
    fn writes_output_files() {
        let (spec, data) = gaussian_toy();
        let r = fit(&spec, &data, &FitConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path()).unwrap();
        let latent = std::fs::read_to_string(dir.path().join("latent.csv")).unwrap();
        assert_eq!(latent.lines().count(), 3);
        let text = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
        assert!(text.contains("mode_converged = true"));
        assert!(text.lines().all(|l| l.contains(" = ")));
        let hyper = std::fs::read_to_string(dir.path().join("hyper.csv")).unwrap();
        assert!(hyper.starts_with("name,mode,mean"));
        assert!(hyper.contains("noise,"));
    }
}
