//! Seeded synthetic datasets with known truth for recovery checks.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Poisson, StandardNormal};

use crate::coxph::simulate_cox;
use crate::data::{format_number, DataError, DataTable};
use crate::lgm::ComponentKind;
use crate::model_spec::{ComponentEntry, FamilyName, ModelSpec};

/// Log-hazard ratio of the simulated survival covariate.
pub const COX_BETA: f64 = 0.1;
pub const GLM_BETA: [f64; 2] = [-1.0, 0.5];
pub const IRT_ITEMS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimKind {
    Cox,
    Irt,
    Glm,
}

impl FromStr for SimKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cox" => Ok(SimKind::Cox),
            "irt" => Ok(SimKind::Irt),
            "glm" => Ok(SimKind::Glm),
            other => Err(format!("unknown dataset kind `{other}`")),
        }
    }
}

impl SimKind {
    pub fn name(self) -> &'static str {
        match self {
            SimKind::Cox => "cox",
            SimKind::Irt => "irt",
            SimKind::Glm => "glm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimParams {
    /// Subjects (cox), students (irt) or rows (glm).
    pub n: usize,
    /// Items per student (irt only).
    pub items: usize,
    pub seed: u64,
}

impl SimParams {
    pub fn new(n: usize, seed: u64) -> Self {
        Self { n, items: IRT_ITEMS, seed }
    }
}

/// True value of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthEntry {
    pub parameter: String,
    pub index: usize,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct Simulated {
    pub data: DataTable,
    pub truth: Vec<TruthEntry>,
    /// Model that generated the data.
    pub spec: ModelSpec,
}

impl Simulated {
    pub fn truth_table(&self) -> String {
        let mut s = String::from("parameter,index,value\n");
        for t in &self.truth {
            let _ = writeln!(s, "{},{},{}", t.parameter, t.index, format_number(t.value));
        }
        s
    }

    /// True values of one parameter in index order.
    pub fn truth_of(&self, parameter: &str) -> Vec<f64> {
        self.truth.iter().filter(|t| t.parameter == parameter).map(|t| t.value).collect()
    }

    /// Writes `data.csv`, `truth.csv` and `model.toml`.
    pub fn write(&self, dir: impl AsRef<std::path::Path>) -> Result<(), DataError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.data.write_csv(dir.join("data.csv"))?;
        std::fs::write(dir.join("truth.csv"), self.truth_table())?;
        std::fs::write(dir.join("model.toml"), self.spec.to_canonical())?;
        Ok(())
    }
}

pub fn simulate(kind: SimKind, params: SimParams) -> Simulated {
    match kind {
        SimKind::Cox => cox(params),
        SimKind::Irt => irt(params),
        SimKind::Glm => glm(params),
    }
}

fn entry(parameter: &str, index: usize, value: f64) -> TruthEntry {
    TruthEntry { parameter: parameter.to_owned(), index, value }
}

fn cox(p: SimParams) -> Simulated {
    let d = simulate_cox(p.n, COX_BETA, p.seed, None);
    let mut spec = ModelSpec::new(FamilyName::Coxph)
        .with_component(ComponentEntry::new("beta", ComponentKind::Linear, Some("x")));
    spec.data.time = Some("time".into());
    spec.data.event = Some("event".into());
    Simulated { data: d.to_table(), truth: vec![entry("beta", 0, COX_BETA)], spec }
}

/// Rasch data, `P(y = 1) = logistic(κ_student − α_item)`.
fn irt(p: SimParams) -> Simulated {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let kappa: Vec<f64> = (0..p.n).map(|_| rng.sample(StandardNormal)).collect();
    let alpha: Vec<f64> = (0..p.items).map(|_| rng.sample(StandardNormal)).collect();
    let rows = p.n * p.items;
    let (mut y, mut student, mut item) = (Vec::with_capacity(rows), Vec::with_capacity(rows), Vec::with_capacity(rows));
    for (j, k) in kappa.iter().enumerate() {
        for (i, a) in alpha.iter().enumerate() {
            let prob = 1.0 / (1.0 + (a - k).exp());
            y.push(f64::from(u8::from(rng.random::<f64>() < prob)));
            student.push(j as f64);
            item.push(i as f64);
        }
    }
    let data = DataTable::new()
        .with_column("y", y)
        .and_then(|t| t.with_column("student", student))
        .and_then(|t| t.with_column("item", item))
        .expect("distinct columns of equal length");
    let mut s = ComponentEntry::new("student", ComponentKind::Iid, Some("student"));
    s.size = Some(p.n);
    let mut it = ComponentEntry::new("item", ComponentKind::Iid, Some("item"));
    it.size = Some(p.items);
    it.coef = Some(-1.0);
    let spec = ModelSpec::new(FamilyName::Bernoulli).with_response("y").with_component(s).with_component(it);
    let truth = kappa
        .iter()
        .enumerate()
        .map(|(j, &v)| entry("student", j, v))
        .chain(alpha.iter().enumerate().map(|(i, &v)| entry("item", i, v)))
        .collect();
    Simulated { data, truth, spec }
}

fn glm(p: SimParams) -> Simulated {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut x = Vec::with_capacity(p.n);
    let mut y = Vec::with_capacity(p.n);
    for _ in 0..p.n {
        let xi: f64 = rng.sample(StandardNormal);
        let rate = (GLM_BETA[0] + GLM_BETA[1] * xi).exp();
        let yi: f64 = rng.sample(Poisson::new(rate).expect("positive rate"));
        x.push(xi);
        y.push(yi);
    }
    let data = DataTable::new()
        .with_column("y", y)
        .and_then(|t| t.with_column("x", x))
        .expect("distinct columns of equal length");
    let spec = ModelSpec::new(FamilyName::Poisson)
        .with_response("y")
        .with_component(ComponentEntry::new("intercept", ComponentKind::Intercept, None))
        .with_component(ComponentEntry::new("x", ComponentKind::Linear, Some("x")));
    let truth = vec![entry("intercept", 0, GLM_BETA[0]), entry("x", 0, GLM_BETA[1])];
    Simulated { data, truth, spec }
}
