use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use inla_core::benchmark::benchmark;
use inla_core::coxph;
use inla_core::data::{format_number, DataTable};
use inla_core::fit::{fit, FitConfig, Formulation, Strategy};
use inla_core::lgm;
use inla_core::model_spec::{FamilyName, ModelSpec};
use inla_core::oracle::{metropolis, quadrature_posterior, OracleMeta, OracleModel};
use inla_core::outer::IntStrategy;
use inla_core::simulate::{simulate, SimKind, SimParams};

#[derive(Parser)]
#[command(name = "inla", version, about = "Approximate Bayesian inference for latent Gaussian models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write latent, linear-predictor and hyperparameter summaries.
    Fit {
        #[command(flatten)]
        input: Input,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write a synthetic dataset with its truth and generating model.
    Simulate {
        #[arg(long, value_enum)]
        kind: Kind,
        /// Subjects, students or rows.
        #[arg(long)]
        n: usize,
        /// Items per student (irt).
        #[arg(long, default_value_t = inla_core::simulate::IRT_ITEMS)]
        items: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time modern and classic fits on simulated data.
    Benchmark {
        #[arg(long, value_enum)]
        suite: Kind,
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        /// Formulations to run.
        #[arg(long, value_enum, value_delimiter = ',', default_values_t = [ModeArg::Modern, ModeArg::Classic])]
        modes: Vec<ModeArg>,
        /// Directory for `benchmark.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Reference posterior moments from quadrature or Metropolis sampling.
    Oracle {
        #[command(flatten)]
        input: Input,
        #[arg(long, value_enum, default_value_t = Method::Metropolis)]
        method: Method,
        #[arg(long, default_value_t = 200_000)]
        draws: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// CSV destination; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Input {
    /// Model description (TOML).
    #[arg(long)]
    model: PathBuf,
    /// Data (CSV with header).
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long, value_enum, default_value_t = StrategyArg::Vb)]
    strategy: StrategyArg,
    #[arg(long, value_enum, default_value_t = IntArg::Grid)]
    int_strategy: IntArg,
    #[arg(long, value_enum, default_value_t = ModeArg::Modern)]
    mode: ModeArg,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    threads: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Gauss–Hermite nodes for VB expectations.
    #[arg(long, default_value_t = inla_core::likelihood::DEFAULT_GH_NODES)]
    n_gh: usize,
    /// Latent indices to correct, comma separated.
    #[arg(long, value_delimiter = ',')]
    vb_nodes: Option<Vec<usize>>,
    /// Inner Newton iteration limit.
    #[arg(long)]
    max_inner_iter: Option<usize>,
    /// Outer quasi-Newton iteration limit.
    #[arg(long)]
    max_outer_iter: Option<usize>,
    /// Gradient tolerance of the mode search.
    #[arg(long)]
    grad_tol: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Gaussian,
    Vb,
}

#[derive(Clone, Copy, ValueEnum)]
enum IntArg {
    Eb,
    Grid,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Modern,
    Classic,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Cox,
    Irt,
    Glm,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Quadrature,
    Metropolis,
}

impl From<ModeArg> for Formulation {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Modern => Formulation::Modern,
            ModeArg::Classic => Formulation::Classic,
        }
    }
}

impl From<Kind> for SimKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Cox => SimKind::Cox,
            Kind::Irt => SimKind::Irt,
            Kind::Glm => SimKind::Glm,
        }
    }
}

impl ConfigArgs {
    fn to_config(&self) -> FitConfig {
        let mut c = FitConfig {
            strategy: match self.strategy {
                StrategyArg::Gaussian => Strategy::Gaussian,
                StrategyArg::Vb => Strategy::Vb,
            },
            int_strategy: match self.int_strategy {
                IntArg::Eb => IntStrategy::EmpiricalBayes,
                IntArg::Grid => IntStrategy::Grid,
            },
            mode: self.mode.into(),
            threads: self.threads as usize,
            seed: self.seed,
            n_gh: self.n_gh,
            vb_nodes: self.vb_nodes.clone(),
            ..FitConfig::default()
        };
        if let Some(v) = self.max_inner_iter {
            c.inner.max_iter = v;
        }
        if let Some(v) = self.max_outer_iter {
            c.outer.max_iter = v;
        }
        if let Some(v) = self.grad_tol {
            c.outer.grad_tol = v;
        }
        c
    }
}

fn read_input(input: &Input) -> Result<(ModelSpec, DataTable)> {
    let spec = ModelSpec::from_file(&input.model).with_context(|| format!("reading {}", input.model.display()))?;
    let data = DataTable::read_csv(&input.data).with_context(|| format!("reading {}", input.data.display()))?;
    Ok((spec, data))
}

fn run_fit(input: &Input, out: &Path, config: &ConfigArgs) -> Result<bool> {
    let (spec, data) = read_input(input)?;
    let result = fit(&spec, &data, &config.to_config()).context("fit failed")?;
    result.write(out).with_context(|| format!("writing {}", out.display()))?;
    print!("{}", result.report.to_text());
    Ok(result.report.all_converged())
}

fn run_oracle(input: &Input, method: Method, draws: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    let (mut spec, mut data) = read_input(input)?;
    if spec.model.family == FamilyName::Coxph {
        let ex = coxph::expand(&spec, &data)?;
        spec = ex.spec;
        data = ex.data;
    }
    let (model, design) = lgm::build_model(&spec, &data)?;
    let (family, obs) = lgm::build_observations(&spec, &data)?;
    let om = OracleModel::new(&model, &design, family, &obs)?;
    let r = match method {
        Method::Quadrature => quadrature_posterior(&om, 1e-8)?,
        Method::Metropolis => metropolis(&om, draws, seed)?,
    };
    let names: Vec<(String, usize)> = model
        .latent_labels()
        .into_iter()
        .chain(model.hypers().iter().map(|h| (format!("theta:{}", h.name), 0)))
        .collect();
    let mut s = String::from("name,index,mean,sd,mcse\n");
    for (k, (name, idx)) in names.iter().enumerate() {
        let mcse = r.mcse.as_ref().map(|m| format_number(m[k])).unwrap_or_default();
        let _ = writeln!(s, "{name},{idx},{},{},{mcse}", format_number(r.means[k]), format_number(r.sds[k]));
    }
    match out {
        Some(p) => std::fs::write(p, &s).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{s}"),
    }
    match r.meta {
        OracleMeta::Quadrature { evaluations } => eprintln!("quadrature: {evaluations} evaluations"),
        OracleMeta::Metropolis { draws, burn_in, acceptance, .. } => {
            eprintln!("metropolis: {draws} draws, {burn_in} burn-in, acceptance {acceptance:.3}")
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Fit { input, out, config } => run_fit(&input, &out, &config),
        Command::Simulate { kind, n, items, seed, out } => {
            if n == 0 || items == 0 {
                bail!("--n and --items must be positive");
            }
            let sim = simulate(kind.into(), SimParams { n, items, seed });
            sim.write(&out).with_context(|| format!("writing {}", out.display()))?;
            Ok(true)
        }
        Command::Benchmark { suite, sizes, modes, out, config } => {
            let modes: Vec<Formulation> = modes.into_iter().map(Formulation::from).collect();
            let table = benchmark(suite.into(), &sizes, &modes, &config.to_config());
            print!("{}", table.to_text());
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("benchmark.csv"), table.to_csv())?;
            }
            Ok(true)
        }
        Command::Oracle { input, method, draws, seed, out } => {
            run_oracle(&input, method, draws, seed, out.as_deref())?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("warning: not all convergence checks passed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
