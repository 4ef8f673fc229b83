//! Event simulation from the model intensity and the four simulation scenarios.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Domain};
use crate::types::{pair_nodes, CovariateSet, Event, EventLog, Theta};

/// Points of the grid used to bound each pair's intensity from above.
pub const ENVELOPE_GRID: usize = 2048;
/// Safety factor applied to the grid maximum.
pub const ENVELOPE_MARGIN: f64 = 1.05;

/// `level + sin * sin(2πt) + cos * cos(2πt) + slope * t`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Curve {
    pub level: f64,
    #[serde(default)]
    pub sin: f64,
    #[serde(default)]
    pub cos: f64,
    #[serde(default)]
    pub slope: f64,
}

impl Curve {
    pub fn constant(level: f64) -> Self {
        Self { level, ..Self::default() }
    }

    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        let mut v = self.level + self.slope * t;
        if self.sin != 0.0 {
            v += self.sin * (2.0 * PI * t).sin();
        }
        if self.cos != 0.0 {
            v += self.cos * (2.0 * PI * t).cos();
        }
        v
    }

    fn scaled(self, b: f64) -> Self {
        Self { level: b * self.level, sin: b * self.sin, cos: b * self.cos, slope: b * self.slope }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioName {
    Main,
    HeterogeneityCompare,
    TrendTest,
    HetTest,
}

impl std::str::FromStr for ScenarioName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "main" => Ok(Self::Main),
            "heterogeneity_compare" => Ok(Self::HeterogeneityCompare),
            "trend_test" => Ok(Self::TrendTest),
            "het_test" => Ok(Self::HetTest),
            _ => Err(Error::UnknownScenario(s.to_string())),
        }
    }
}

/// Scenario knobs; each scenario reads only its own.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Knobs {
    /// Sparsity coefficient of `main`.
    pub c0: f64,
    /// Heterogeneity strength of `heterogeneity_compare`.
    pub b: f64,
    /// Trend level of the degree parameters in `trend_test`.
    pub c1: f64,
    /// Trend level of the homophily coefficient in `trend_test`.
    pub c2: f64,
    /// Offset of node n's out-degree in `het_test`.
    pub c: f64,
}

impl Default for Knobs {
    fn default() -> Self {
        Self { c0: 0.5, b: 1.0, c1: 0.0, c2: 0.0, c: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: ScenarioName,
    pub n: usize,
    pub knobs: Knobs,
    pub seed: u64,
}

/// True curves and covariates from which events are drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthBundle {
    pub scenario: Option<ScenarioSpec>,
    pub tau: f64,
    pub seed: u64,
    /// `α_i*`, one per node.
    pub alpha: Vec<Curve>,
    /// `β_j*`, one per node; the last entry is identically zero.
    pub beta: Vec<Curve>,
    pub gamma: Vec<Curve>,
    pub covariates: CovariateSet,
}

/// Serializable description of a [`TruthBundle`] without its covariates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthFile {
    pub scenario: Option<ScenarioSpec>,
    pub n_nodes: usize,
    pub tau: f64,
    pub seed: u64,
    pub alpha: Vec<Curve>,
    pub beta: Vec<Curve>,
    pub gamma: Vec<Curve>,
}

impl TruthBundle {
    /// Custom truth; `beta` lists receivers `1..n-1` and the anchor is appended.
    pub fn new(alpha: Vec<Curve>, beta: Vec<Curve>, gamma: Vec<Curve>, covariates: CovariateSet, seed: u64) -> Result<Self> {
        let n = covariates.n_nodes();
        if alpha.len() != n || beta.len() + 1 != n || gamma.len() != covariates.p() {
            return Err(Error::Invalid(format!(
                "truth dimensions do not match covariates (n={n}, p={})",
                covariates.p()
            )));
        }
        let mut beta = beta;
        beta.push(Curve::default());
        Ok(Self { scenario: None, tau: covariates.tau(), seed, alpha, beta, gamma, covariates })
    }

    pub fn n(&self) -> usize {
        self.alpha.len()
    }

    pub fn p(&self) -> usize {
        self.gamma.len()
    }

    pub fn gamma_at(&self, t: f64) -> Vec<f64> {
        self.gamma.iter().map(|g| g.eval(t)).collect()
    }

    /// `log λ_ij(t)`.
    pub fn log_intensity(&self, i: usize, j: usize, t: f64) -> f64 {
        let z = self.covariates.evaluate(i, j, t);
        self.alpha[i].eval(t) + self.beta[j].eval(t) + z.iter().zip(&self.gamma).map(|(a, g)| a * g.eval(t)).sum::<f64>()
    }

    /// `λ_ij(t)`.
    pub fn intensity(&self, i: usize, j: usize, t: f64) -> f64 {
        self.log_intensity(i, j, t).exp()
    }

    /// The true parameter vector at `t` in estimator layout.
    pub fn theta(&self, t: f64) -> Theta {
        let n = self.n();
        let mut th = Theta::zeros(n, self.p());
        for i in 0..n {
            th.alpha[i] = self.alpha[i].eval(t);
        }
        for j in 0..n - 1 {
            th.beta[j] = self.beta[j].eval(t);
        }
        th.gamma = self.gamma_at(t);
        th
    }

    pub fn to_file(&self) -> TruthFile {
        TruthFile {
            scenario: self.scenario,
            n_nodes: self.n(),
            tau: self.tau,
            seed: self.seed,
            alpha: self.alpha.clone(),
            beta: self.beta[..self.n() - 1].to_vec(),
            gamma: self.gamma.clone(),
        }
    }
}

/// Build the named scenario with `τ = 1`. Node conditions such as `i < n/2` use 1-based ids.
pub fn scenario(name: ScenarioName, n: usize, seed: u64, knobs: Knobs) -> Result<TruthBundle> {
    if n < 2 {
        return Err(Error::Invalid(format!("scenario needs n >= 2, got {n}")));
    }
    let tau = 1.0;
    let nf = n as f64;
    let lower_half = |i: usize| ((i + 1) as f64) < nf / 2.0;
    let log_n = nf.ln();
    let (alpha, beta, gamma, covariates): (Vec<Curve>, Vec<Curve>, Vec<Curve>, CovariateSet) = match name {
        ScenarioName::Main => {
            let q = -knobs.c0 * log_n;
            let alpha = (0..n)
                .map(|i| {
                    if lower_half(i) {
                        Curve { level: q + 2.5, sin: 1.0, ..Curve::default() }
                    } else {
                        Curve { level: q + 1.5, slope: 0.5, ..Curve::default() }
                    }
                })
                .collect();
            let beta = (0..n)
                .map(|j| {
                    if j + 1 == n {
                        Curve::default()
                    } else if lower_half(j) {
                        Curve { level: q + 2.5, cos: 1.0, ..Curve::default() }
                    } else {
                        Curve { level: q + 1.5, slope: 0.5, ..Curve::default() }
                    }
                })
                .collect();
            let g = Curve { sin: 1.0 / 3.0, ..Curve::default() };
            (alpha, beta, vec![g, g], normal_covariates(n, tau, 2, seed)?)
        }
        ScenarioName::HeterogeneityCompare => {
            let base = Curve { level: -0.5 * log_n + 3.0, slope: 0.5, ..Curve::default() }.scaled(knobs.b);
            let curves: Vec<Curve> = (0..n).map(|i| if lower_half(i) { base } else { Curve::default() }).collect();
            let mut beta = curves.clone();
            beta[n - 1] = Curve::default();
            let values = (0..n * (n - 1))
                .map(|k| {
                    let (i, j) = pair_nodes(n, k);
                    if i + 1 <= 4 && (j + 1) as f64 <= nf / 3.0 {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            let g = Curve { sin: 1.0 / 3.0, ..Curve::default() };
            (curves, beta, vec![g], CovariateSet::constant(n, tau, 1, values)?)
        }
        ScenarioName::TrendTest => {
            let c = Curve { level: -0.5 * log_n + 2.5, sin: knobs.c1, ..Curve::default() };
            let mut beta = vec![c; n];
            beta[n - 1] = Curve::default();
            let g = Curve { sin: knobs.c2 / 3.0, ..Curve::default() };
            (vec![c; n], beta, vec![g], normal_covariates(n, tau, 1, seed)?)
        }
        ScenarioName::HetTest => {
            let a = Curve { slope: 0.5, ..Curve::default() };
            let mut alpha = vec![a; n];
            alpha[n - 1].level += knobs.c;
            let mut beta = vec![a; n];
            beta[n - 1] = Curve::default();
            let g = Curve { sin: 1.0 / 3.0, ..Curve::default() };
            (alpha, beta, vec![g], normal_covariates(n, tau, 1, seed)?)
        }
    };
    Ok(TruthBundle {
        scenario: Some(ScenarioSpec { name, n, knobs, seed }),
        tau,
        seed,
        alpha,
        beta,
        gamma,
        covariates,
    })
}

/// I.i.d. standard normal, time-constant pair covariates; pair `k` draws from its own substream.
pub fn normal_covariates(n: usize, tau: f64, p: usize, seed: u64) -> Result<CovariateSet> {
    let values = (0..n * (n - 1))
        .flat_map(|k| {
            let mut rng = substream(seed, Domain::Covariates, k as u64);
            (0..p).map(move |_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>()
        })
        .collect();
    CovariateSet::constant(n, tau, p, values)
}

/// Curve values on a shared time grid, so envelope maxima cost additions only.
struct CurveTable {
    m: usize,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    gamma: Vec<f64>,
}

impl CurveTable {
    fn new(truth: &TruthBundle, times: &[f64]) -> Self {
        let table = |cs: &[Curve]| cs.iter().flat_map(|c| times.iter().map(move |&t| c.eval(t))).collect();
        Self { m: times.len(), alpha: table(&truth.alpha), beta: table(&truth.beta), gamma: table(&truth.gamma) }
    }
}

/// Draw one pair's events by Lewis–Shedler thinning.
fn simulate_pair(truth: &TruthBundle, table: &CurveTable, times: &[f64], k: usize) -> Result<Vec<Event>> {
    let n = truth.n();
    let (i, j) = pair_nodes(n, k);
    let cov = &truth.covariates;
    let m = table.m;
    let (a, b) = (&table.alpha[i * m..(i + 1) * m], &table.beta[j * m..(j + 1) * m]);
    let mut log_max = f64::NEG_INFINITY;
    for (g, &t) in times.iter().enumerate() {
        let z = cov.evaluate_pair(k, t);
        let zg: f64 = z.iter().enumerate().map(|(c, zc)| zc * table.gamma[c * m + g]).sum();
        log_max = log_max.max(a[g] + b[g] + zg);
    }
    // piecewise covariates can jump between grid points; check every segment start too
    if !cov.is_constant() {
        for s in cov.segments(k) {
            let t = cov.segment_interval(s).0;
            log_max = log_max.max(truth.log_intensity(i, j, t));
        }
    }
    let bound = ENVELOPE_MARGIN * log_max.exp();
    if !bound.is_finite() {
        return Err(Error::NonFiniteIntensity { sender: i + 1, receiver: j + 1 });
    }
    let mut events = Vec::new();
    if bound <= 0.0 {
        return Ok(events);
    }
    let mut rng = substream(truth.seed, Domain::PairEvents, k as u64);
    let gap = Exp::new(bound).expect("positive rate");
    let mut t = 0.0;
    loop {
        t += gap.sample(&mut rng);
        if t > truth.tau {
            break;
        }
        let u: f64 = rng.random();
        if u * bound <= truth.intensity(i, j, t) {
            events.push(Event { sender: i, receiver: j, time: t });
        }
    }
    Ok(events)
}

/// Simulate every ordered pair independently as an inhomogeneous Poisson process.
pub fn simulate(truth: &TruthBundle) -> Result<EventLog> {
    let n = truth.n();
    let last = (ENVELOPE_GRID - 1) as f64;
    let times: Vec<f64> = (0..ENVELOPE_GRID).map(|g| truth.tau * g as f64 / last).collect();
    let table = CurveTable::new(truth, &times);
    let per_pair = (0..n * (n - 1))
        .into_par_iter()
        .map(|k| simulate_pair(truth, &table, &times, k))
        .collect::<Result<Vec<_>>>()?;
    EventLog::new(n, truth.tau, per_pair.into_iter().flatten().collect())
}
