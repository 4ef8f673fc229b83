//! Monte-Carlo studies: MISE and coverage tables, the heterogeneity-bias comparison,
//! and size/power curves of the tests. Replicates are independent, seeded by counter
//! splitting, and run in parallel; results are assembled in replicate order.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{fit_grid, fit_homogeneous, FitConfig, FitResult};
use crate::hypothesis::{run_test, Multiplier, TestKind, TestSpec};
use crate::inference::{confidence_intervals, variance_bundle};
use crate::output::{write_csv_rows, write_json};
use crate::rng::{child_seed, Domain};
use crate::simulator::{scenario, simulate, Knobs, ScenarioName, TruthBundle};
use crate::types::{linear_grid, EventLog, KernelConfig, Theta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    MiseTable,
    CoverageTable,
    BiasCompare,
    TrendPower,
    HetPower,
}

impl std::str::FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "mise_table" | "mise" => Ok(Self::MiseTable),
            "coverage_table" | "coverage" => Ok(Self::CoverageTable),
            "bias_compare" => Ok(Self::BiasCompare),
            "trend_power" => Ok(Self::TrendPower),
            "het_power" => Ok(Self::HetPower),
            other => Err(Error::Invalid(format!(
                "unknown experiment `{other}` (mise-table|coverage-table|bias-compare|trend-power|het-power)"
            ))),
        }
    }
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::MiseTable => "mise_table",
            Self::CoverageTable => "coverage_table",
            Self::BiasCompare => "bias_compare",
            Self::TrendPower => "trend_power",
            Self::HetPower => "het_power",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub experiment: ExperimentKind,
    pub n: Vec<usize>,
    pub reps: usize,
    /// Multiplier resamples per test (power experiments).
    pub resamples: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Knob values for power curves; `b` values for the bias comparison.
    pub knobs: Vec<f64>,
    pub multiplier: Multiplier,
}

impl ExperimentPlan {
    /// Desk-scale defaults: 100 replicates for MISE and bias, 200 for coverage and power, 200 resamples.
    pub fn new(experiment: ExperimentKind) -> Self {
        let (n, reps, knobs) = match experiment {
            ExperimentKind::MiseTable => (vec![100, 200], 100, vec![]),
            ExperimentKind::CoverageTable => (vec![100, 200], 200, vec![]),
            ExperimentKind::BiasCompare => (vec![200], 100, vec![0.0, 1.0 / 3.0, 0.5, 1.0]),
            ExperimentKind::TrendPower => (vec![100, 200], 200, vec![0.0, 0.25, 0.5, 1.0]),
            ExperimentKind::HetPower => (vec![100, 200], 200, vec![0.0, 0.5, 1.0, 1.5]),
        };
        Self { experiment, n, reps, resamples: 200, seed: 20240601, out: None, knobs, multiplier: Multiplier::PerEvent }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::Invalid("at least one replicate is required".into()));
        }
        if self.n.is_empty() || self.n.iter().any(|&n| n < 3) {
            return Err(Error::Invalid("every network size must be at least 3".into()));
        }
        if matches!(self.experiment, ExperimentKind::TrendPower | ExperimentKind::HetPower) && self.resamples < 100 {
            return Err(Error::Invalid(format!("at least 100 resamples are required, got {}", self.resamples)));
        }
        if matches!(self.experiment, ExperimentKind::TrendPower | ExperimentKind::HetPower | ExperimentKind::BiasCompare)
            && self.knobs.is_empty()
        {
            return Err(Error::Invalid("knob list is empty".into()));
        }
        Ok(())
    }
}

/// Seed of replicate `r` at network size `n`. Knob values share replicate seeds,
/// so power curves compare like with like.
pub fn replicate_seed(seed: u64, n: usize, r: usize) -> u64 {
    child_seed(child_seed(seed, Domain::Replicates, n as u64), Domain::Replicates, r as u64)
}

/// Tracked coordinates `α_1, α_{n/2+1}, β_1, β_{n/2+1}, γ_1` as (label, index into (α, β, γ)).
pub fn tracked_coordinates(n: usize, p: usize) -> Vec<(String, usize)> {
    let h = n / 2;
    let mut v = vec![
        ("alpha_1".to_string(), 0),
        (format!("alpha_{}", h + 1), h),
        ("beta_1".to_string(), n),
        (format!("beta_{}", h + 1), n + h),
    ];
    if p > 0 {
        v.push(("gamma_1".to_string(), 2 * n - 1));
    }
    v
}

fn coordinate_value(theta: &Theta, idx: usize) -> f64 {
    let n = theta.n();
    if idx < 2 * n - 1 {
        theta.eta(idx)
    } else {
        theta.gamma[idx - (2 * n - 1)]
    }
}

fn mean_se(values: &[f64]) -> (f64, f64) {
    let r = values.len() as f64;
    let mean = values.iter().sum::<f64>() / r;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0);
    (mean, (var / r).sqrt())
}

fn binomial_se(rate: f64, r: usize) -> f64 {
    (rate * (1.0 - rate) / r as f64).sqrt()
}

fn simulate_replicate(name: ScenarioName, n: usize, seed: u64, knobs: Knobs) -> Result<(TruthBundle, EventLog)> {
    let truth = scenario(name, n, seed, knobs)?;
    let log = simulate(&truth)?;
    Ok((truth, log))
}

/// Which part of `[0, τ]` an integrated error covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrationRange {
    /// Grid points in `[h1, τ - h1]`.
    Interior,
    /// The whole fitted grid, boundary included.
    Full,
}

/// `∫ (f̂ - f)^2 dt` by the trapezoid rule over consecutive grid points whose errors are both finite.
pub fn integrated_squared_error(grid: &[f64], errors: &[f64]) -> f64 {
    grid.windows(2)
        .zip(errors.windows(2))
        .filter(|(_, e)| e[0].is_finite() && e[1].is_finite())
        .map(|(t, e)| 0.5 * (t[1] - t[0]) * (e[0] * e[0] + e[1] * e[1]))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiseRow {
    pub n: usize,
    pub coordinate: String,
    pub range: IntegrationRange,
    pub mise: f64,
    pub se: f64,
    pub replicates: usize,
}

/// Integrated squared errors of the tracked coordinates for one replicate, per range.
fn replicate_ise(n: usize, seed: u64) -> Result<Vec<[f64; 2]>> {
    let (truth, log) = simulate_replicate(ScenarioName::Main, n, seed, Knobs::default())?;
    let kernel = KernelConfig::rule_of_thumb(n);
    let grid = linear_grid(0.0, 1.0, 0.05).into_iter().map(|t| t * truth.tau).collect::<Vec<_>>();
    let fit = fit_grid(&log, &truth.covariates, &FitConfig::new(grid.clone(), kernel))?;
    let interior: Vec<usize> = fit.diagnostics.iter().enumerate().filter(|(_, d)| d.interior).map(|(g, _)| g).collect();
    let igrid: Vec<f64> = interior.iter().map(|&g| grid[g]).collect();
    let out = tracked_coordinates(n, truth.p())
        .into_iter()
        .map(|(_, idx)| {
            let errors: Vec<f64> = grid
                .iter()
                .zip(&fit.curves.points)
                .map(|(&t, th)| coordinate_value(th, idx) - coordinate_value(&truth.theta(t), idx))
                .collect();
            let ierr: Vec<f64> = interior.iter().map(|&g| errors[g]).collect();
            [integrated_squared_error(&igrid, &ierr), integrated_squared_error(&grid, &errors)]
        })
        .collect();
    Ok(out)
}

/// MISE of `α_1, α_{n/2+1}, β_1, β_{n/2+1}, γ_1` on the main scenario, over the interior and the full grid.
pub fn run_mise(plan: &ExperimentPlan) -> Result<Vec<MiseRow>> {
    plan.validate()?;
    let mut rows = Vec::new();
    for &n in &plan.n {
        let reps: Vec<Vec<[f64; 2]>> = (0..plan.reps)
            .into_par_iter()
            .map(|r| replicate_ise(n, replicate_seed(plan.seed, n, r)).ok())
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect();
        if reps.is_empty() {
            return Err(Error::NoSuccessfulReplicates);
        }
        for (c, (label, _)) in tracked_coordinates(n, 2).into_iter().enumerate() {
            for (ri, range) in [IntegrationRange::Interior, IntegrationRange::Full].into_iter().enumerate() {
                let v: Vec<f64> = reps.iter().map(|x| x[c][ri]).collect();
                let (mise, se) = mean_se(&v);
                rows.push(MiseRow { n, coordinate: label.clone(), range, mise, se, replicates: v.len() });
            }
        }
    }
    Ok(rows)
}

/// Interval for one tracked coordinate at one time in one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRecord {
    pub coordinate: String,
    pub t: f64,
    pub truth: f64,
    pub estimate: f64,
    /// Bias-corrected estimate for homophily coordinates, the estimate otherwise.
    pub centre: f64,
    pub lower: f64,
    pub upper: f64,
    /// Standard error implied by the interval.
    pub se: f64,
}

impl IntervalRecord {
    pub fn covers(&self) -> bool {
        self.lower <= self.truth && self.truth <= self.upper
    }

    /// `(centre - truth) / se`.
    pub fn standardized(&self) -> f64 {
        (self.centre - self.truth) / self.se
    }
}

/// Times at which coverage is tabulated.
pub const COVERAGE_TIMES: [f64; 3] = [0.4, 0.6, 0.8];

/// 95% intervals for the tracked coordinates at [`COVERAGE_TIMES`] in one main-scenario replicate.
pub fn coverage_replicate(n: usize, seed: u64) -> Result<Vec<IntervalRecord>> {
    let (truth, log) = simulate_replicate(ScenarioName::Main, n, seed, Knobs::default())?;
    let kernel = KernelConfig::rule_of_thumb(n);
    let grid: Vec<f64> = COVERAGE_TIMES.iter().map(|t| t * truth.tau).collect();
    let fit = fit_grid(&log, &truth.covariates, &FitConfig::new(grid, kernel))?;
    if let Some(e) = fit.diagnostics.iter().find_map(|d| d.error.clone()) {
        return Err(Error::Invalid(e));
    }
    let bundle = variance_bundle(&log, &truth.covariates, &fit, &kernel);
    let ci = confidence_intervals(&fit, &bundle, 0.95)?;
    let coords = tracked_coordinates(n, truth.p());
    let per_t = 2 * n - 1 + truth.p();
    let mut out = Vec::new();
    for (g, &t) in fit.curves.grid.iter().enumerate() {
        let tr = truth.theta(t);
        for (label, idx) in &coords {
            let row = &ci[g * per_t + idx];
            debug_assert_eq!(&row.coordinate, label);
            let centre = row.corrected.unwrap_or(row.estimate);
            out.push(IntervalRecord {
                coordinate: label.clone(),
                t,
                truth: coordinate_value(&tr, *idx),
                estimate: row.estimate,
                centre,
                lower: row.lower,
                upper: row.upper,
                se: row.variance.sqrt(),
            });
        }
    }
    if out.iter().any(|r| !r.lower.is_finite() || !r.upper.is_finite()) {
        return Err(Error::Invalid("undefined interval".into()));
    }
    Ok(out)
}

/// Interval records of `reps` replicates at size `n`; failed replicates are dropped.
pub fn coverage_replicates(n: usize, reps: usize, seed: u64) -> Vec<Vec<IntervalRecord>> {
    (0..reps)
        .into_par_iter()
        .map(|r| coverage_replicate(n, replicate_seed(seed, n, r)).ok())
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub n: usize,
    pub coordinate: String,
    pub t: f64,
    /// Percent of intervals covering the truth.
    pub coverage: f64,
    pub coverage_se: f64,
    pub mean_length: f64,
    pub replicates: usize,
}

/// Coverage (×100) and mean length per coordinate and time.
pub fn coverage_table(n: usize, reps: &[Vec<IntervalRecord>]) -> Vec<CoverageRow> {
    let Some(first) = reps.first() else { return Vec::new() };
    (0..first.len())
        .map(|c| {
            let recs: Vec<&IntervalRecord> = reps.iter().map(|r| &r[c]).collect();
            let r = recs.len();
            let rate = recs.iter().filter(|x| x.covers()).count() as f64 / r as f64;
            CoverageRow {
                n,
                coordinate: first[c].coordinate.clone(),
                t: first[c].t,
                coverage: 100.0 * rate,
                coverage_se: 100.0 * binomial_se(rate, r),
                mean_length: recs.iter().map(|x| x.upper - x.lower).sum::<f64>() / r as f64,
                replicates: r,
            }
        })
        .collect()
}

pub fn run_coverage(plan: &ExperimentPlan) -> Result<Vec<CoverageRow>> {
    plan.validate()?;
    let mut rows = Vec::new();
    for &n in &plan.n {
        let reps = coverage_replicates(n, plan.reps, plan.seed);
        if reps.is_empty() {
            return Err(Error::NoSuccessfulReplicates);
        }
        rows.extend(coverage_table(n, &reps));
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    DegreeCorrected,
    Homogeneous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub b: f64,
    pub t: f64,
    pub interior: bool,
    pub method: Method,
    pub mean: f64,
    /// Pointwise 2.5% and 97.5% replicate quantiles of `γ̂_1(t)`.
    pub lower: f64,
    pub upper: f64,
    pub truth: f64,
    pub replicates: usize,
}

impl BiasRow {
    pub fn band_covers_truth(&self) -> bool {
        self.lower <= self.truth && self.truth <= self.upper
    }
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Bias comparison between the degree-corrected and homogeneous fits of `γ_1(t)`.
pub fn run_bias_compare(plan: &ExperimentPlan) -> Result<Vec<BiasRow>> {
    plan.validate()?;
    let n = plan.n[0];
    let kernel = KernelConfig::rule_of_thumb(n);
    let grid = linear_grid(0.05, 0.95, 0.05);
    let config = FitConfig::new(grid.clone(), kernel);
    let mut rows = Vec::new();
    for &b in &plan.knobs {
        let knobs = Knobs { b, ..Knobs::default() };
        let fits: Vec<(FitResult, FitResult)> = (0..plan.reps)
            .into_par_iter()
            .map(|r| {
                let (truth, log) =
                    simulate_replicate(ScenarioName::HeterogeneityCompare, n, replicate_seed(plan.seed, n, r), knobs).ok()?;
                let dc = fit_grid(&log, &truth.covariates, &config).ok()?;
                let hom = fit_homogeneous(&log, &truth.covariates, &config).ok()?;
                Some((dc, hom))
            })
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect();
        if fits.is_empty() {
            return Err(Error::NoSuccessfulReplicates);
        }
        let truth = scenario(ScenarioName::HeterogeneityCompare, n, plan.seed, knobs)?;
        for (g, &t) in grid.iter().enumerate() {
            for method in [Method::DegreeCorrected, Method::Homogeneous] {
                let mut v: Vec<f64> = fits
                    .iter()
                    .map(|(dc, hom)| match method {
                        Method::DegreeCorrected => dc.curves.points[g].gamma[0],
                        Method::Homogeneous => hom.curves.points[g].gamma[0],
                    })
                    .filter(|v| v.is_finite())
                    .collect();
                if v.is_empty() {
                    continue;
                }
                v.sort_by(f64::total_cmp);
                rows.push(BiasRow {
                    b,
                    t,
                    interior: fits[0].0.diagnostics[g].interior,
                    method,
                    mean: v.iter().sum::<f64>() / v.len() as f64,
                    lower: quantile(&v, 0.025),
                    upper: quantile(&v, 0.975),
                    truth: truth.gamma_at(t)[0],
                    replicates: v.len(),
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerRow {
    pub n: usize,
    pub test: TestKind,
    pub knob: String,
    pub value: f64,
    pub rejection_rate: f64,
    pub se: f64,
    pub replicates: usize,
}

/// Rejection decisions of `tests` on one simulated replicate.
fn test_replicate(
    name: ScenarioName,
    n: usize,
    knobs: Knobs,
    seed: u64,
    tests: &[TestKind],
    plan: &ExperimentPlan,
) -> Result<Vec<bool>> {
    let (truth, log) = simulate_replicate(name, n, seed, knobs)?;
    let kernel = KernelConfig::rule_of_thumb(n);
    let grid: Vec<f64> = linear_grid(0.1, 0.9, 0.1).into_iter().map(|t| t * truth.tau).collect();
    let fit = fit_grid(&log, &truth.covariates, &FitConfig::new(grid, kernel))?;
    let bundle = variance_bundle(&log, &truth.covariates, &fit, &kernel);
    tests
        .iter()
        .enumerate()
        .map(|(i, &kind)| {
            let mut spec = TestSpec::new(kind, truth.tau, child_seed(seed, Domain::Multipliers, i as u64));
            spec.resamples = plan.resamples;
            spec.multiplier = plan.multiplier;
            Ok(run_test(&log, &truth.covariates, &fit, &bundle, &spec)?.reject)
        })
        .collect()
}

fn rejection_rates(
    name: ScenarioName,
    n: usize,
    knobs: Knobs,
    tests: &[TestKind],
    plan: &ExperimentPlan,
) -> Result<(Vec<f64>, usize)> {
    let decisions: Vec<Vec<bool>> = (0..plan.reps)
        .into_par_iter()
        .map(|r| test_replicate(name, n, knobs, replicate_seed(plan.seed, n, r), tests, plan).ok())
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    if decisions.is_empty() {
        return Err(Error::NoSuccessfulReplicates);
    }
    let r = decisions.len();
    let rates = (0..tests.len()).map(|i| decisions.iter().filter(|d| d[i]).count() as f64 / r as f64).collect();
    Ok((rates, r))
}

/// Rejection rate against the knob: `c̃1` for `T_η` and `c̃2` for `T_γ` (trend power),
/// `c̃` for `D_α` and `D_β` (heterogeneity power).
pub fn run_power(plan: &ExperimentPlan) -> Result<Vec<PowerRow>> {
    plan.validate()?;
    let mut rows = Vec::new();
    let mut push = |n, test, knob: &str, value, rate: f64, r| {
        rows.push(PowerRow { n, test, knob: knob.into(), value, rejection_rate: rate, se: binomial_se(rate, r), replicates: r })
    };
    for &n in &plan.n {
        for &v in &plan.knobs {
            match plan.experiment {
                ExperimentKind::TrendPower => {
                    if v == 0.0 {
                        let (rates, r) =
                            rejection_rates(ScenarioName::TrendTest, n, Knobs::default(), &[TestKind::TrendEta, TestKind::TrendGamma], plan)?;
                        push(n, TestKind::TrendEta, "c1", v, rates[0], r);
                        push(n, TestKind::TrendGamma, "c2", v, rates[1], r);
                    } else {
                        let k1 = Knobs { c1: v, ..Knobs::default() };
                        let (rates, r) = rejection_rates(ScenarioName::TrendTest, n, k1, &[TestKind::TrendEta], plan)?;
                        push(n, TestKind::TrendEta, "c1", v, rates[0], r);
                        let k2 = Knobs { c2: v, ..Knobs::default() };
                        let (rates, r) = rejection_rates(ScenarioName::TrendTest, n, k2, &[TestKind::TrendGamma], plan)?;
                        push(n, TestKind::TrendGamma, "c2", v, rates[0], r);
                    }
                }
                ExperimentKind::HetPower => {
                    let k = Knobs { c: v, ..Knobs::default() };
                    let (rates, r) = rejection_rates(ScenarioName::HetTest, n, k, &[TestKind::HetAlpha, TestKind::HetBeta], plan)?;
                    push(n, TestKind::HetAlpha, "c", v, rates[0], r);
                    push(n, TestKind::HetBeta, "c", v, rates[1], r);
                }
                other => return Err(Error::Invalid(format!("{} is not a power experiment", other.name()))),
            }
        }
    }
    rows.sort_by(|a, b| (a.n, a.test as u8, a.value).partial_cmp(&(b.n, b.test as u8, b.value)).unwrap());
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub plan: ExperimentPlan,
    pub crate_version: &'static str,
    pub elapsed_seconds: f64,
    pub table: String,
    pub notes: Vec<String>,
}

/// Run `plan`, write `<experiment>.csv` and `manifest.json` into `plan.out` (if set), return the manifest.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<Manifest> {
    let start = Instant::now();
    let table = format!("{}.csv", plan.experiment.name());
    let dir = plan.out.clone();
    let write = |rows: &dyn Fn(&Path) -> Result<()>| -> Result<()> {
        if let Some(d) = &dir {
            std::fs::create_dir_all(d)?;
            rows(&d.join(&table))?;
        }
        Ok(())
    };
    let mut notes = Vec::new();
    match plan.experiment {
        ExperimentKind::MiseTable => {
            let rows = run_mise(plan)?;
            notes.push("MISE uses the trapezoid rule over the grid 0, 0.05, ..., 1; `interior` keeps points in [h1, tau - h1], `full` keeps all".into());
            write(&|p| write_csv_rows(p, &rows))?;
        }
        ExperimentKind::CoverageTable => {
            let rows = run_coverage(plan)?;
            notes.push("homophily intervals are centred at the bias-corrected estimate".into());
            write(&|p| write_csv_rows(p, &rows))?;
        }
        ExperimentKind::BiasCompare => {
            let rows = run_bias_compare(plan)?;
            notes.push("bands are pointwise 2.5%/97.5% replicate quantiles; knobs are the heterogeneity strengths b".into());
            write(&|p| write_csv_rows(p, &rows))?;
        }
        ExperimentKind::TrendPower | ExperimentKind::HetPower => {
            let rows = run_power(plan)?;
            notes.push(format!("level 0.05, grid 0.1..0.9, multipliers {:?}", plan.multiplier));
            write(&|p| write_csv_rows(p, &rows))?;
        }
    }
    let manifest = Manifest {
        plan: plan.clone(),
        crate_version: env!("CARGO_PKG_VERSION"),
        elapsed_seconds: start.elapsed().as_secs_f64(),
        table,
        notes,
    };
    if let Some(d) = &dir {
        write_json(&d.join("manifest.json"), &manifest)?;
    }
    Ok(manifest)
}
