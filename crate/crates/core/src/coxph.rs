//! Proportional-hazards survival models as Poisson regressions.
//!
//! With a baseline hazard that is constant on each bin `(s_k, s_{k+1}]`, a
//! subject observed until `t` in bin `k` contributes one Poisson pseudo
//! observation per bin it passed through: zero counts with exposure equal to
//! the bin width for the earlier bins, and the event indicator with exposure
//! `t − s_k` for the last one. The log-exposures enter as offsets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use thiserror::Error;

use crate::data::{DataError, DataTable};
use crate::lgm::ComponentKind;
use crate::model_spec::{BinPlacement, ComponentEntry, FamilyName, ModelSpec};

/// Prior key and component name of the baseline log-hazard.
pub const BASELINE: &str = "baseline";
/// Default number of baseline bins.
pub const DEFAULT_BINS: usize = 50;

/// Columns added to the augmented table.
pub const COL_Y: &str = "cox_y";
pub const COL_OFFSET: &str = "cox_offset";
pub const COL_BIN: &str = "cox_bin";
pub const COL_SUBJECT: &str = "cox_subject";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoxError {
    #[error("subject {index}: time {time} must be positive and finite")]
    NonPositiveTime { index: usize, time: f64 },
    #[error("subject {index}: event indicator {value} is not 0 or 1")]
    InvalidEvent { index: usize, value: f64 },
    #[error("subject {index}: time {time} outside the bin grid (0, {end}]")]
    OutsideGrid { index: usize, time: f64, end: f64 },
    #[error("bin cuts must start at 0 and increase strictly")]
    InvalidCuts,
    #[error("at least one bin and one subject are needed")]
    Empty,
    #[error("column lengths differ: {0}")]
    Length(String),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("model is not a coxph model")]
    NotCoxph,
    #[error("data: {0}")]
    Data(String),
}

impl From<DataError> for CoxError {
    fn from(e: DataError) -> Self {
        CoxError::Data(e.to_string())
    }
}

/// Cut points `0 = s_0 < s_1 < … < s_B`; bin `k` is `(s_k, s_{k+1}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinGrid {
    cuts: Vec<f64>,
}

impl BinGrid {
    pub fn from_cuts(cuts: Vec<f64>) -> Result<Self, CoxError> {
        if cuts.len() < 2 || cuts[0] != 0.0 || cuts.windows(2).any(|w| !(w[1] > w[0])) || cuts.iter().any(|c| !c.is_finite())
        {
            return Err(CoxError::InvalidCuts);
        }
        Ok(Self { cuts })
    }

    pub fn cuts(&self) -> &[f64] {
        &self.cuts
    }

    pub fn n_bins(&self) -> usize {
        self.cuts.len() - 1
    }

    pub fn end(&self) -> f64 {
        *self.cuts.last().expect("at least two cuts")
    }

    /// Zero-based bin containing `t`, or `None` outside `(0, s_B]`.
    pub fn bin_of(&self, t: f64) -> Option<usize> {
        if !(t > 0.0) || t > self.end() {
            return None;
        }
        // first cut >= t, minus one
        Some(self.cuts.partition_point(|&c| c < t) - 1)
    }
}

fn check_times(times: &[f64]) -> Result<f64, CoxError> {
    if times.is_empty() {
        return Err(CoxError::Empty);
    }
    let mut max = 0.0_f64;
    for (index, &time) in times.iter().enumerate() {
        if !(time > 0.0 && time.is_finite()) {
            return Err(CoxError::NonPositiveTime { index, time });
        }
        max = max.max(time);
    }
    Ok(max)
}

/// `B` equal-width bins on `[0, max t]`.
pub fn make_bins(times: &[f64], b: usize) -> Result<BinGrid, CoxError> {
    let end = check_times(times)?;
    if b == 0 {
        return Err(CoxError::Empty);
    }
    let mut cuts: Vec<f64> = (0..=b).map(|k| end * k as f64 / b as f64).collect();
    cuts[b] = end;
    BinGrid::from_cuts(cuts)
}

/// Cuts at empirical quantiles of the event times, so every bin holds at
/// least one event when there are at least `B` distinct event times. The
/// last cut is the largest observed time.
pub fn make_quantile_bins(times: &[f64], events: &[f64], b: usize) -> Result<BinGrid, CoxError> {
    let end = check_times(times)?;
    if b == 0 {
        return Err(CoxError::Empty);
    }
    let mut ev: Vec<f64> = times.iter().zip(events).filter(|(_, &e)| e == 1.0).map(|(&t, _)| t).collect();
    if ev.is_empty() {
        return make_bins(times, b);
    }
    ev.sort_by(f64::total_cmp);
    ev.dedup();
    let b = b.min(ev.len());
    let mut cuts = vec![0.0];
    for k in 1..b {
        // upper edge of the k-th group of event times
        let idx = (k * ev.len()).div_ceil(b) - 1;
        let c = ev[idx];
        if c > *cuts.last().unwrap() && c < end {
            cuts.push(c);
        }
    }
    cuts.push(end);
    BinGrid::from_cuts(cuts)
}

/// Poisson rows of the piecewise-exponential model.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedData {
    pub y: Vec<f64>,
    pub exposure: Vec<f64>,
    /// `log(exposure)`.
    pub offset: Vec<f64>,
    pub bin: Vec<usize>,
    pub subject: Vec<usize>,
    /// Subject covariates replicated per row.
    pub covariates: Vec<(String, Vec<f64>)>,
    /// Rows removed because their exposure was zero.
    pub dropped: usize,
}

impl AugmentedData {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn to_table(&self) -> Result<DataTable, CoxError> {
        let mut t = DataTable::new();
        t.push_column(COL_Y, self.y.clone())?;
        t.push_column(COL_OFFSET, self.offset.clone())?;
        t.push_column(COL_BIN, self.bin.iter().map(|&b| b as f64).collect())?;
        t.push_column(COL_SUBJECT, self.subject.iter().map(|&s| s as f64).collect())?;
        for (name, v) in &self.covariates {
            t.push_column(name.clone(), v.clone())?;
        }
        Ok(t)
    }
}

/// Expands subjects into Poisson rows ordered by (subject, bin).
pub fn augment(
    times: &[f64],
    events: &[f64],
    covariates: &[(String, Vec<f64>)],
    bins: &BinGrid,
) -> Result<AugmentedData, CoxError> {
    let n = times.len();
    if events.len() != n {
        return Err(CoxError::Length(format!("{n} times, {} events", events.len())));
    }
    if let Some((name, _)) = covariates.iter().find(|(_, v)| v.len() != n) {
        return Err(CoxError::Length(format!("covariate `{name}`")));
    }
    let cuts = bins.cuts();
    let mut out = AugmentedData {
        y: Vec::new(),
        exposure: Vec::new(),
        offset: Vec::new(),
        bin: Vec::new(),
        subject: Vec::new(),
        covariates: covariates.iter().map(|(name, _)| (name.clone(), Vec::new())).collect(),
        dropped: 0,
    };
    for i in 0..n {
        let (t, e) = (times[i], events[i]);
        if !(t > 0.0 && t.is_finite()) {
            return Err(CoxError::NonPositiveTime { index: i, time: t });
        }
        if e != 0.0 && e != 1.0 {
            return Err(CoxError::InvalidEvent { index: i, value: e });
        }
        let k = bins.bin_of(t).ok_or(CoxError::OutsideGrid { index: i, time: t, end: bins.end() })?;
        for j in 0..=k {
            let last = j == k;
            let w = if last { t - cuts[j] } else { cuts[j + 1] - cuts[j] };
            if w <= 0.0 {
                log::warn!("subject {i}: zero exposure in bin {j}; row dropped");
                out.dropped += 1;
                continue;
            }
            out.y.push(if last { e } else { 0.0 });
            out.exposure.push(w);
            out.offset.push(w.ln());
            out.bin.push(j);
            out.subject.push(i);
            for ((_, dst), (_, src)) in out.covariates.iter_mut().zip(covariates) {
                dst.push(src[i]);
            }
        }
    }
    Ok(out)
}

/// Simulated survival data.
#[derive(Debug, Clone, PartialEq)]
pub struct CoxData {
    pub time: Vec<f64>,
    pub event: Vec<f64>,
    pub x: Vec<f64>,
}

impl CoxData {
    pub fn to_table(&self) -> DataTable {
        DataTable::new()
            .with_column("time", self.time.clone())
            .and_then(|t| t.with_column("event", self.event.clone()))
            .and_then(|t| t.with_column("x", self.x.clone()))
            .expect("equal column lengths")
    }
}

/// Hazard `h(t) = 1.2 t^0.2 exp(β x)` with a standardized normal covariate.
///
/// Times come from inverting `H(t) = t^1.2 exp(β x)` at a unit exponential
/// draw. Subjects still at risk at `horizon` are censored there.
pub fn simulate_cox(n: usize, beta: f64, seed: u64, horizon: Option<f64>) -> CoxData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let x = standardize(&raw);
    let mut time = Vec::with_capacity(n);
    let mut event = Vec::with_capacity(n);
    for &xi in &x {
        let e: f64 = Exp1.sample(&mut rng);
        let t = (e / (beta * xi).exp()).powf(1.0 / 1.2);
        match horizon {
            Some(h) if t > h => {
                time.push(h);
                event.push(0.0);
            }
            _ => {
                time.push(t);
                event.push(1.0);
            }
        }
    }
    CoxData { time, event, x }
}

fn standardize(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    if v.len() < 2 {
        return vec![0.0; v.len()];
    }
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    v.iter().map(|x| (x - mean) / sd).collect()
}

/// Poisson model and augmented data equivalent to a coxph model.
#[derive(Debug, Clone)]
pub struct CoxExpansion {
    pub spec: ModelSpec,
    pub data: DataTable,
    pub augmented: AugmentedData,
    pub bins: BinGrid,
}

/// Rewrites a `coxph` model as a Poisson model on augmented data: a
/// baseline log-hazard component (`rw1` by default, sum-to-zero) on the bin
/// index, an intercept when the model has none, and every other column of
/// `data` replicated per row.
pub fn expand(spec: &ModelSpec, data: &DataTable) -> Result<CoxExpansion, CoxError> {
    if spec.model.family != FamilyName::Coxph {
        return Err(CoxError::NotCoxph);
    }
    let time_col = spec.data.time.as_deref().ok_or(CoxError::NotCoxph)?;
    let event_col = spec.data.event.as_deref().ok_or(CoxError::NotCoxph)?;
    let times = data.column(time_col).ok_or_else(|| CoxError::UnknownColumn(time_col.to_owned()))?;
    let events = data.column(event_col).ok_or_else(|| CoxError::UnknownColumn(event_col.to_owned()))?;
    let b = spec.model.bins.unwrap_or(DEFAULT_BINS);
    let bins = match spec.model.bin_placement.unwrap_or(BinPlacement::Equal) {
        BinPlacement::Equal => make_bins(times, b)?,
        BinPlacement::Quantile => make_quantile_bins(times, events, b)?,
    };
    let covariates: Vec<(String, Vec<f64>)> = data
        .names()
        .iter()
        .filter(|n| n.as_str() != time_col && n.as_str() != event_col)
        .map(|n| (n.clone(), data.column(n).expect("listed column").to_vec()))
        .collect();
    let augmented = augment(times, events, &covariates, &bins)?;
    let table = augmented.to_table()?;

    let mut out = ModelSpec::new(FamilyName::Poisson).with_response(COL_Y);
    out.model.fixed_precision = spec.model.fixed_precision;
    out.data.offset = Some(COL_OFFSET.to_owned());
    let mut baseline = ComponentEntry::new(BASELINE, spec.model.baseline.unwrap_or(ComponentKind::Rw1), Some(COL_BIN));
    baseline.size = Some(bins.n_bins().max(baseline.kind.min_size()));
    if bins.n_bins() >= baseline.kind.min_size() {
        out.components.push(baseline);
    }
    if !spec.components.iter().any(|c| c.kind == ComponentKind::Intercept) {
        out.components.push(ComponentEntry::new("intercept", ComponentKind::Intercept, None));
    }
    out.components.extend(spec.components.iter().cloned());
    out.priors = spec.priors.clone();
    if !out.components.iter().any(|c| c.name == BASELINE) {
        out.priors.remove(BASELINE);
    }
    Ok(CoxExpansion { spec: out, data: table, augmented, bins })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_width_cuts() {
        let g = make_bins(&[3.0, 10.0, 1.0], 5).unwrap();
        assert_eq!(g.cuts(), &[0.0, 2.0, 4.0, 6.0, 8.0, 10.0]);
        assert_eq!(g.bin_of(2.0), Some(0));
        assert_eq!(g.bin_of(2.0001), Some(1));
        assert_eq!(g.bin_of(10.0), Some(4));
        assert_eq!(g.bin_of(10.5), None);
        assert_eq!(make_bins(&[4.0], 1).unwrap().cuts(), &[0.0, 4.0]);
        assert!(matches!(make_bins(&[1.0, 0.0], 2), Err(CoxError::NonPositiveTime { index: 1, .. })));
    }

    #[test]
    fn single_subject_rows() {
        let g = BinGrid::from_cuts(vec![0.0, 1.0, 2.5, 4.0, 6.0]).unwrap();
        let a = augment(&[0.4], &[1.0], &[], &g).unwrap();
        assert_eq!(a.y, vec![1.0]);
        assert!((a.offset[0] - 0.4f64.ln()).abs() < 1e-15);

        let a = augment(&[3.0], &[0.0], &[], &g).unwrap();
        assert_eq!(a.y, vec![0.0, 0.0, 0.0]);
        assert_eq!(a.exposure, vec![1.0, 1.5, 0.5]);
        assert_eq!(a.bin, vec![0, 1, 2]);
    }

    #[test]
    fn exposure_is_conserved_and_rows_counted() {
        let d = simulate_cox(300, 0.1, 7, Some(2.0));
        let g = make_bins(&d.time, 50).unwrap();
        let a = augment(&d.time, &d.event, &[("x".into(), d.x.clone())], &g).unwrap();
        let total: f64 = a.offset.iter().map(|o| o.exp()).sum();
        let truth: f64 = d.time.iter().sum();
        assert!((total - truth).abs() <= 1e-12 * truth);
        let direct: f64 = a.exposure.iter().sum();
        assert!((direct - truth).abs() <= 1e-12 * truth);
        // row count by direct search over cut points
        let rows: usize = d.time.iter().map(|&t| g.cuts().iter().skip(1).position(|&c| t <= c).unwrap() + 1).sum();
        assert_eq!(a.len(), rows);
        assert_eq!(a.dropped, 0);
    }

    #[test]
    fn poisson_likelihood_matches_survival_likelihood() {
        let g = BinGrid::from_cuts(vec![0.0, 0.7, 1.5, 3.0]).unwrap();
        let times = [0.3, 1.2, 2.9, 1.5];
        let events = [1.0, 0.0, 1.0, 1.0];
        let x = [0.5, -1.0, 2.0, 0.1];
        let a = augment(&times, &events, &[("x".into(), x.to_vec())], &g).unwrap();
        let loglik = |b: &[f64; 3], beta: f64| -> (f64, f64) {
            let mut pois = 0.0;
            for r in 0..a.len() {
                let eta = b[a.bin[r]] + beta * a.covariates[0].1[r] + a.offset[r];
                pois += a.y[r] * eta - eta.exp();
            }
            // piecewise-constant hazard: −∫h + δ log h(t)
            let mut surv = 0.0;
            for i in 0..times.len() {
                let k = g.bin_of(times[i]).unwrap();
                for j in 0..=k {
                    let hi = if j == k { times[i] } else { g.cuts()[j + 1] };
                    surv -= (b[j] + beta * x[i]).exp() * (hi - g.cuts()[j]);
                }
                surv += events[i] * (b[k] + beta * x[i]);
            }
            (pois, surv)
        };
        let (p1, s1) = loglik(&[0.1, -0.4, 0.3], 0.2);
        let (p2, s2) = loglik(&[-1.0, 0.5, 0.0], -0.7);
        assert!(((p1 - s1) - (p2 - s2)).abs() < 1e-12);
    }

    #[test]
    fn quantile_bins_hold_events() {
        let d = simulate_cox(500, 0.1, 3, Some(1.5));
        let g = make_quantile_bins(&d.time, &d.event, 20).unwrap();
        let mut counts = vec![0; g.n_bins()];
        for (t, e) in d.time.iter().zip(&d.event) {
            if *e == 1.0 {
                counts[g.bin_of(*t).unwrap()] += 1;
            }
        }
        assert!(counts.iter().all(|&c| c >= 1), "{counts:?}");
    }

    #[test]
    fn simulation_is_seeded_and_weibull() {
        assert_eq!(simulate_cox(50, 0.1, 11, None), simulate_cox(50, 0.1, 11, None));
        let d = simulate_cox(100_000, 0.0, 5, None);
        let n = d.time.len() as f64;
        let mean = d.time.iter().sum::<f64>() / n;
        let var = d.time.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expected = statrs::function::gamma::gamma(1.0 + 1.0 / 1.2);
        assert!((mean - expected).abs() < 4.0 * (var / n).sqrt(), "{mean} vs {expected}");
        let xm = d.x.iter().sum::<f64>() / n;
        assert!(xm.abs() < 1e-12);
    }

    #[test]
    fn hundred_subjects_give_about_a_thousand_rows() {
        let d = simulate_cox(100, 0.1, 1, None);
        let g = make_bins(&d.time, 50).unwrap();
        let a = augment(&d.time, &d.event, &[], &g).unwrap();
        assert!((300..=3000).contains(&a.len()), "{}", a.len());
    }

    #[test]
    fn expansion_builds_a_poisson_model() {
        let d = simulate_cox(40, 0.1, 2, None);
        let spec = ModelSpec::parse(
            "[model]\nfamily = \"coxph\"\nbins = 8\n[data]\ntime = \"time\"\nevent = \"event\"\n\
             [[component]]\nname = \"beta\"\nkind = \"linear\"\ncolumn = \"x\"\n",
        )
        .unwrap();
        let ex = expand(&spec, &d.to_table()).unwrap();
        assert_eq!(ex.spec.model.family, FamilyName::Poisson);
        let names: Vec<&str> = ex.spec.components.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, vec![BASELINE, "intercept", "beta"]);
        assert_eq!(ex.data.n_rows(), ex.augmented.len());
        assert!(ex.data.column("x").is_some());
        assert!(crate::lgm::build_model(&ex.spec, &ex.data).is_ok());
    }
}
