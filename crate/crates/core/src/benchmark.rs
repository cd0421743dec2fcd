//! Modern versus classic timing runs on simulated data.

use std::fmt::Write as _;
use std::time::Instant;

use crate::data::format_number;
use crate::fit::{fit, FitConfig, Formulation};
use crate::simulate::{simulate, SimKind, SimParams};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRow {
    pub suite: SimKind,
    pub size: usize,
    pub mode: Formulation,
    /// Wall-clock seconds of the fit, or the error that stopped it.
    pub outcome: Result<f64, String>,
    pub m: usize,
    pub n: usize,
    pub augmented: Option<usize>,
    pub field_dim: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchmarkTable {
    pub rows: Vec<BenchmarkRow>,
}

fn mode_name(mode: Formulation) -> &'static str {
    match mode {
        Formulation::Modern => "modern",
        Formulation::Classic => "classic",
    }
}

impl BenchmarkTable {
    pub fn seconds(&self, size: usize, mode: Formulation) -> Option<f64> {
        self.rows.iter().find(|r| r.size == size && r.mode == mode).and_then(|r| r.outcome.clone().ok())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("suite,size,mode,seconds,m,n,augmented,field_dim,error\n");
        for r in &self.rows {
            let (secs, err) = match &r.outcome {
                Ok(t) => (format_number(*t), String::new()),
                Err(e) => (String::new(), format!("\"{}\"", e.replace('"', "\"\""))),
            };
            let aug = r.augmented.map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{secs},{},{},{aug},{},{err}",
                r.suite.name(),
                r.size,
                mode_name(r.mode),
                r.m,
                r.n,
                r.field_dim
            );
        }
        s
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<6} {:>8} {:<8} {:>10} {:>6} {:>8} {:>10} {:>10}\n",
            "suite", "size", "mode", "seconds", "m", "n", "augmented", "field_dim"
        );
        for r in &self.rows {
            let secs = match &r.outcome {
                Ok(t) => format!("{t:.3}"),
                Err(_) => "failed".to_owned(),
            };
            let aug = r.augmented.map(|a| a.to_string()).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "{:<6} {:>8} {:<8} {:>10} {:>6} {:>8} {:>10} {:>10}",
                r.suite.name(),
                r.size,
                mode_name(r.mode),
                secs,
                r.m,
                r.n,
                aug,
                r.field_dim
            );
        }
        s
    }
}

/// Fits every size in each formulation. Failed fits are recorded, not
/// propagated.
pub fn benchmark(suite: SimKind, sizes: &[usize], modes: &[Formulation], config: &FitConfig) -> BenchmarkTable {
    let mut table = BenchmarkTable::default();
    for &size in sizes {
        let sim = simulate(suite, SimParams::new(size, config.seed));
        for &mode in modes {
            let cfg = FitConfig { mode, ..config.clone() };
            let start = Instant::now();
            let row = match fit(&sim.spec, &sim.data, &cfg) {
                Ok(r) => BenchmarkRow {
                    suite,
                    size,
                    mode,
                    outcome: Ok(start.elapsed().as_secs_f64()),
                    m: r.report.m,
                    n: r.report.n,
                    augmented: r.report.augmented,
                    field_dim: r.report.field_dim,
                },
                Err(e) => BenchmarkRow {
                    suite,
                    size,
                    mode,
                    outcome: Err(e.to_string()),
                    m: 0,
                    n: sim.data.n_rows(),
                    augmented: None,
                    field_dim: 0,
                },
            };
            log::info!("{} n={size} {}: {:?}", suite.name(), mode_name(mode), row.outcome);
            table.rows.push(row);
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::Strategy;

    #[test]
    fn latent_dimension_is_constant_in_modern_mode() {
        let config = FitConfig { strategy: Strategy::Gaussian, ..FitConfig::default() };
        let t = benchmark(SimKind::Cox, &[100, 200], &[Formulation::Modern, Formulation::Classic], &config);
        assert_eq!(t.rows.len(), 4);
        let modern: Vec<&BenchmarkRow> = t.rows.iter().filter(|r| r.mode == Formulation::Modern).collect();
        assert_eq!(modern[0].m, modern[1].m);
        assert_eq!(modern[0].field_dim, modern[0].m);
        for r in t.rows.iter().filter(|r| r.mode == Formulation::Classic) {
            assert_eq!(r.field_dim, r.m + r.augmented.unwrap());
        }
        assert!(t.rows.iter().all(|r| r.outcome.is_ok()));
        assert!(t.seconds(200, Formulation::Modern).is_some());
        assert_eq!(t.to_csv().lines().count(), 5);
        assert_eq!(t.to_text().lines().count(), 5);
    }

    #[test]
    fn failures_are_recorded() {
        let config = FitConfig { vb_nodes: Some(vec![1000]), ..FitConfig::default() };
        let t = benchmark(SimKind::Glm, &[50], &[Formulation::Modern], &config);
        assert!(t.rows[0].outcome.is_err());
        assert!(t.to_text().contains("failed"));
        assert!(t.to_csv().contains("VB node"));
    }
}
