//! Trend tests for `η(t)` and `γ(t)` and degree-heterogeneity tests, calibrated by a
//! Gaussian-multiplier resampling of the kernel-weighted martingale terms.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::FitResult;
use crate::inference::{within_block_zeta, GammaInference, PointInference, VarianceBundle};
use crate::kernel::{weighted_sum, Kernel};
use crate::rng::{substream, Domain};
use crate::types::{linear_grid, pair_nodes, CovariateSet, EventLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    TrendEta,
    TrendGamma,
    HetAlpha,
    HetBeta,
}

impl std::str::FromStr for TestKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "trend_eta" => Ok(TestKind::TrendEta),
            "trend_gamma" => Ok(TestKind::TrendGamma),
            "het_alpha" => Ok(TestKind::HetAlpha),
            "het_beta" => Ok(TestKind::HetBeta),
            other => Err(Error::Invalid(format!("unknown test `{other}` (trend-eta|trend-gamma|het-alpha|het-beta)"))),
        }
    }
}

/// How multipliers perturb the counting processes in a resample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Multiplier {
    /// One `G` per event: `dÑ_ij = G_e dN_ij`. Its conditional variance is exactly `∫K² dN`.
    #[default]
    PerEvent,
    /// One `G_ij` per ordered pair: `Ñ_ij = N_ij G_ij`. Also counts the squared compensator as noise.
    PerPair,
}

impl std::str::FromStr for Multiplier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "per_event" => Ok(Multiplier::PerEvent),
            "per_pair" => Ok(Multiplier::PerPair),
            other => Err(Error::Invalid(format!("unknown multiplier scheme `{other}` (per-event|per-pair)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSpec {
    pub test: TestKind,
    pub grid: Vec<f64>,
    pub level: f64,
    pub resamples: usize,
    pub seed: u64,
    pub multiplier: Multiplier,
}

impl TestSpec {
    /// Grid `0.1, 0.2, ..., 0.9` (scaled by `tau`), level 0.05, 1000 resamples.
    pub fn new(test: TestKind, tau: f64, seed: u64) -> Self {
        let grid = linear_grid(0.1, 0.9, 0.1).into_iter().map(|t| t * tau).collect();
        Self { test, grid, level: 0.05, resamples: 1000, seed, multiplier: Multiplier::PerEvent }
    }

    pub fn validate(&self, h1: f64, tau: f64) -> Result<()> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Invalid(format!("level must lie in (0, 1), got {}", self.level)));
        }
        if self.resamples < 100 {
            return Err(Error::Invalid(format!("at least 100 resamples are required, got {}", self.resamples)));
        }
        if self.grid.is_empty() {
            return Err(Error::Invalid("test grid is empty".into()));
        }
        if let Some(&t) = self.grid.iter().find(|&&t| t < h1 - 1e-12 || t > tau - h1 + 1e-12) {
            return Err(Error::Invalid(format!("test grid time {t} lies outside the interior [{h1}, {}]", tau - h1)));
        }
        if matches!(self.test, TestKind::TrendEta | TestKind::TrendGamma) && self.grid.len() < 2 {
            return Err(Error::NeedTwoGridTimes);
        }
        Ok(())
    }
}

/// Where the observed statistic attains its maximum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Argmax {
    pub coordinate: String,
    /// Second node of the pair for heterogeneity tests.
    pub other: Option<String>,
    pub t1: f64,
    /// Second time for trend tests.
    pub t2: Option<f64>,
}

/// Largest standardized contrast attained by one coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub coordinate: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub test: TestKind,
    pub statistic: f64,
    pub critical_value: f64,
    pub p_value: f64,
    pub reject: bool,
    pub level: f64,
    pub resamples: usize,
    pub seed: u64,
    pub coordinates_tested: usize,
    pub argmax: Argmax,
    pub contributions: Vec<Contribution>,
}

/// Empirical `q`-quantile as an order statistic: the `ceil(q B)`-th smallest value.
pub fn upper_quantile(sorted: &[f64], q: f64) -> f64 {
    let b = sorted.len();
    let idx = ((q * b as f64).ceil() as usize).clamp(1, b) - 1;
    sorted[idx]
}

fn coordinate_name(n: usize, k: usize) -> String {
    if k < n {
        format!("alpha_{}", k + 1)
    } else if k < 2 * n - 1 {
        format!("beta_{}", k - n + 1)
    } else {
        format!("gamma_{}", k + 2 - 2 * n)
    }
}

/// Grid points of the test, each with its fit index and its inference (if available).
struct TestPoint<'a> {
    t: f64,
    g: usize,
    inference: Option<&'a PointInference>,
}

fn locate<'a>(fit: &FitResult, bundle: &'a VarianceBundle, spec: &TestSpec) -> Result<Vec<TestPoint<'a>>> {
    spec.grid
        .iter()
        .map(|&t| {
            let g = fit
                .curves
                .grid_position(t)
                .ok_or_else(|| Error::Invalid(format!("test grid time {t} is not on the fitted grid")))?;
            Ok(TestPoint { t, g, inference: bundle.at(g) })
        })
        .collect()
}

fn multipliers(seed: u64, b: usize, m: usize) -> Vec<f64> {
    let mut rng = substream(seed, Domain::Multipliers, b as u64);
    (0..m).map(|_| rng.sample(StandardNormal)).collect()
}

fn multiplier_count(log: &EventLog, scheme: Multiplier) -> usize {
    match scheme {
        Multiplier::PerEvent => log.len(),
        Multiplier::PerPair => log.n_pairs(),
    }
}

/// Kernel weights linking multipliers to pairs at one time:
/// the resampled `∫K_h(u - t) dÑ_k(u)` is `Σ w G_m` over the entries of pair `k`.
struct Incidence {
    entries: Vec<(usize, usize, f64)>,
    /// `(x index of the sender, x index of the receiver or usize::MAX for the anchor)` per entry.
    targets: Vec<(u32, u32)>,
}

impl Incidence {
    fn new(log: &EventLog, t: f64, h: f64, kernel: Kernel, scheme: Multiplier) -> Self {
        let n = log.n_nodes();
        let mut entries = Vec::new();
        let mut offset = 0;
        // weights this far below the peak cannot move a double-precision sum
        let negligible = 1e-18 * kernel.weight(0.0, h);
        for k in 0..log.n_pairs() {
            let times = log.pair_times_by_index(k);
            match scheme {
                Multiplier::PerEvent => {
                    for (e, &s) in times.iter().enumerate() {
                        let w = kernel.weight(s - t, h);
                        if w > negligible {
                            entries.push((k, offset + e, w));
                        }
                    }
                }
                Multiplier::PerPair => {
                    let w = weighted_sum(times, t, h, kernel, false);
                    if w > 0.0 {
                        entries.push((k, k, w));
                    }
                }
            }
            offset += times.len();
        }
        let targets = entries
            .iter()
            .map(|&(k, _, _)| {
                let (i, j) = pair_nodes(n, k);
                (i as u32, if j < n - 1 { (n + j) as u32 } else { u32::MAX })
            })
            .collect();
        Self { entries, targets }
    }

    #[cfg(test)]
    /// Resampled counts per pair.
    fn counts(&self, g: &[f64], n_pairs: usize) -> Vec<f64> {
        let mut c = vec![0.0; n_pairs];
        for &(k, m, w) in &self.entries {
            c[k] += w * g[m];
        }
        c
    }

    /// [`degree_sums`] of the resampled counts without the per-pair pass.
    fn degree_sums(&self, g: &[f64], n: usize) -> Vec<f64> {
        let mut x = vec![0.0; 2 * n - 1];
        for (&(_, m, w), &(i, col)) in self.entries.iter().zip(&self.targets) {
            let v = w * g[m];
            x[i as usize] += v;
            if col != u32::MAX {
                x[col as usize] += v;
            }
        }
        x
    }
}

/// `x_i = Σ_j c_ij`, `x_{n+j} = Σ_i c_ij` (j < n-1).
#[cfg(test)]
fn degree_sums(n: usize, c: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; 2 * n - 1];
    for i in 0..n {
        for r in 0..n - 1 {
            let j = if r < i { r } else { r + 1 };
            let v = c[i * (n - 1) + r];
            x[i] += v;
            if j < n - 1 {
                x[n + j] += v;
            }
        }
    }
    x
}

fn finish(
    spec: &TestSpec,
    statistic: f64,
    resampled: Vec<f64>,
    coordinates_tested: usize,
    argmax: Argmax,
    contributions: Vec<Contribution>,
) -> Result<TestReport> {
    if coordinates_tested == 0 || !statistic.is_finite() {
        return Err(Error::NoTestableCoordinates);
    }
    let mut sorted = resampled;
    sorted.sort_by(f64::total_cmp);
    let critical_value = upper_quantile(&sorted, 1.0 - spec.level);
    let exceed = sorted.iter().filter(|&&v| v >= statistic).count();
    Ok(TestReport {
        test: spec.test,
        statistic,
        critical_value,
        p_value: exceed as f64 / sorted.len() as f64,
        reject: statistic > critical_value,
        level: spec.level,
        resamples: spec.resamples,
        seed: spec.seed,
        coordinates_tested,
        argmax,
        contributions,
    })
}

/// Trend test `H0: η(t)` constant: `T_η = max_i sup_{t1<t2} √(nh1)|η̂_i(t1) - η̂_i(t2)| / (σ̂_ii(t1) + σ̂_ii(t2))^{1/2}`.
pub fn trend_test_eta(log: &EventLog, fit: &FitResult, bundle: &VarianceBundle, spec: &TestSpec) -> Result<TestReport> {
    let kernel = bundle.kernel;
    spec.validate(kernel.h1, log.tau())?;
    let n = bundle.n;
    let m = 2 * n - 1;
    let points = locate(fit, bundle, spec)?;

    // per-grid standardization (σ̂_kk, NaN where undefined)
    let sig: Vec<Vec<f64>> = points
        .iter()
        .map(|p| match p.inference {
            Some(pi) => (0..m).map(|k| if pi.s.active[k] { pi.sigma_eta[k] } else { f64::NAN }).collect(),
            None => vec![f64::NAN; m],
        })
        .collect();
    let scale = (n as f64 * kernel.h1).sqrt();
    let mut statistic = f64::NEG_INFINITY;
    let mut argmax = None;
    let mut contributions = Vec::new();
    let mut tested = vec![false; m];
    for (k, tested_k) in tested.iter_mut().enumerate() {
        let mut best = f64::NEG_INFINITY;
        for a in 0..points.len() {
            for b in a + 1..points.len() {
                let den = (sig[a][k] + sig[b][k]).sqrt();
                if !(den > 0.0) {
                    continue;
                }
                let num = fit.curves.points[points[a].g].eta(k) - fit.curves.points[points[b].g].eta(k);
                let v = scale * num.abs() / den;
                *tested_k = true;
                if v > best {
                    best = v;
                }
                if v > statistic {
                    statistic = v;
                    argmax = Some(Argmax { coordinate: coordinate_name(n, k), other: None, t1: points[a].t, t2: Some(points[b].t) });
                }
            }
        }
        if best.is_finite() {
            contributions.push(Contribution { coordinate: coordinate_name(n, k), value: best });
        }
    }
    let coordinates_tested = tested.iter().filter(|&&b| b).count();
    let Some(argmax) = argmax else {
        return Err(Error::NoTestableCoordinates);
    };

    let incidence: Vec<Incidence> =
        points.iter().map(|p| Incidence::new(log, p.t, kernel.h1, kernel.kernel, spec.multiplier)).collect();
    let rscale = (kernel.h1 / n as f64).sqrt();
    let n_mult = multiplier_count(log, spec.multiplier);
    let resampled: Vec<f64> = (0..spec.resamples)
        .into_par_iter()
        .map(|b| {
            let g = multipliers(spec.seed, b, n_mult);
            let y: Vec<Option<Vec<f64>>> = points
                .iter()
                .zip(&incidence)
                .map(|(p, inc)| {
                    p.inference.map(|pi| {
                        let x = inc.degree_sums(&g, n);
                        pi.s.apply(&x).into_iter().map(|v| v * rscale).collect()
                    })
                })
                .collect();
            let mut best = 0.0f64;
            for a in 0..points.len() {
                let Some(ya) = &y[a] else { continue };
                for bb in a + 1..points.len() {
                    let Some(yb) = &y[bb] else { continue };
                    for k in 0..m {
                        let den = (sig[a][k] + sig[bb][k]).sqrt();
                        if den > 0.0 {
                            best = best.max((ya[k] - yb[k]).abs() / den);
                        }
                    }
                }
            }
            best
        })
        .collect();
    finish(spec, statistic, resampled, coordinates_tested, argmax, contributions)
}

/// Trend test `H0: γ(t)` constant, on bias-corrected estimates with bandwidth `h2`.
pub fn trend_test_gamma(
    log: &EventLog,
    cov: &CovariateSet,
    fit: &FitResult,
    bundle: &VarianceBundle,
    spec: &TestSpec,
) -> Result<TestReport> {
    let kernel = bundle.kernel;
    spec.validate(kernel.h1, log.tau())?;
    let (n, p) = (bundle.n, bundle.p);
    if p == 0 {
        return Err(Error::NoTestableCoordinates);
    }
    let points = locate(fit, bundle, spec)?;
    let gam: Vec<Option<(&crate::inference::GammaInference, usize)>> =
        points.iter().map(|pt| pt.inference.and_then(|pi| pi.gamma.as_ref().map(|gi| (gi, pi.n_active_pairs)))).collect();

    let mut statistic = f64::NEG_INFINITY;
    let mut argmax = None;
    let mut contributions = Vec::new();
    let mut tested = 0;
    for c in 0..p {
        let mut best = f64::NEG_INFINITY;
        for a in 0..points.len() {
            let Some((ga, na)) = gam[a] else { continue };
            for b in a + 1..points.len() {
                let Some((gb, _)) = gam[b] else { continue };
                let den = (ga.psi[(c, c)] + gb.psi[(c, c)]).sqrt();
                if !(den > 0.0) {
                    continue;
                }
                let v = (na as f64 * kernel.h2).sqrt() * (ga.gamma_tilde[c] - gb.gamma_tilde[c]).abs() / den;
                best = best.max(v);
                if v > statistic {
                    statistic = v;
                    argmax = Some(Argmax { coordinate: coordinate_name(n, 2 * n - 1 + c), other: None, t1: points[a].t, t2: Some(points[b].t) });
                }
            }
        }
        if best.is_finite() {
            tested += 1;
            contributions.push(Contribution { coordinate: coordinate_name(n, 2 * n - 1 + c), value: best });
        }
    }
    let Some(argmax) = argmax else {
        return Err(Error::NoTestableCoordinates);
    };

    // per usable grid point: residual covariates r_k(t) of the pairs near t, flattened `N × p`
    struct Prepared<'a> {
        gi: &'a GammaInference,
        residual: Vec<f64>,
        incidence: Incidence,
        scale: f64,
    }
    let prepared: Vec<Option<Prepared>> = points
        .iter()
        .zip(&gam)
        .map(|(pt, gi)| {
            gi.map(|(gi, na)| {
                let incidence = Incidence::new(log, pt.t, kernel.h2, kernel.kernel, spec.multiplier);
                let theta = &fit.curves.points[pt.g];
                let mut residual = vec![0.0; log.n_pairs() * p];
                let mut done = vec![false; log.n_pairs()];
                for &(k, _, _) in &incidence.entries {
                    if done[k] {
                        continue;
                    }
                    done[k] = true;
                    let (i, j) = pair_nodes(n, k);
                    if theta.alpha_defined[i] && theta.beta_full_defined(j) {
                        let r = gi.residual(n, i, j, cov.evaluate_pair(k, pt.t));
                        residual[k * p..(k + 1) * p].copy_from_slice(&r);
                    }
                }
                Prepared { gi, residual, incidence, scale: (kernel.h2 / na as f64).sqrt() }
            })
        })
        .collect();

    let n_mult = multiplier_count(log, spec.multiplier);
    let resampled: Vec<f64> = (0..spec.resamples)
        .into_par_iter()
        .map(|b| {
            let g = multipliers(spec.seed, b, n_mult);
            let y: Vec<Option<Vec<f64>>> = prepared
                .iter()
                .map(|pr| {
                    let pr = pr.as_ref()?;
                    let mut acc = vec![0.0; p];
                    for &(k, m, w) in &pr.incidence.entries {
                        let wg = w * g[m];
                        for (slot, r) in acc.iter_mut().zip(&pr.residual[k * p..(k + 1) * p]) {
                            *slot += r * wg;
                        }
                    }
                    Some((0..p).map(|a| pr.scale * (0..p).map(|c| pr.gi.hq_inv[(a, c)] * acc[c]).sum::<f64>()).collect())
                })
                .collect();
            let mut best = 0.0f64;
            for a in 0..points.len() {
                let (Some(ya), Some((ga, _))) = (&y[a], gam[a]) else { continue };
                for bb in a + 1..points.len() {
                    let (Some(yb), Some((gb, _))) = (&y[bb], gam[bb]) else { continue };
                    for c in 0..p {
                        let den = (ga.psi[(c, c)] + gb.psi[(c, c)]).sqrt();
                        if den > 0.0 {
                            best = best.max((ya[c] - yb[c]).abs() / den);
                        }
                    }
                }
            }
            best
        })
        .collect();
    finish(spec, statistic, resampled, tested, argmax, contributions)
}

/// Heterogeneity test `H0: α_1(t) = ... = α_n(t)` (or the same for `β_1..β_{n-1}`):
/// `D = max_{i≠j} sup_t √(nh1)|η̂_i(t) - η̂_j(t)| / ζ̂_ij(t)^{1/2}`.
pub fn het_test(log: &EventLog, fit: &FitResult, bundle: &VarianceBundle, spec: &TestSpec) -> Result<TestReport> {
    let kernel = bundle.kernel;
    spec.validate(kernel.h1, log.tau())?;
    let n = bundle.n;
    let block: Vec<usize> = match spec.test {
        TestKind::HetAlpha => (0..n).collect(),
        TestKind::HetBeta => (n..2 * n - 1).collect(),
        other => return Err(Error::Invalid(format!("het_test cannot run {other:?}"))),
    };
    let points = locate(fit, bundle, spec)?;
    let scale = (n as f64 * kernel.h1).sqrt();

    let mut statistic = f64::NEG_INFINITY;
    let mut argmax = None;
    let mut per_node = vec![f64::NEG_INFINITY; block.len()];
    for pt in &points {
        let Some(pi) = pt.inference else { continue };
        let theta = &fit.curves.points[pt.g];
        for (a, &k) in block.iter().enumerate() {
            if !pi.s.active[k] {
                continue;
            }
            for (b, &l) in block.iter().enumerate().skip(a + 1) {
                if !pi.s.active[l] {
                    continue;
                }
                let zeta = within_block_zeta(&pi.s, &pi.omega, k, l);
                if !(zeta > 0.0) {
                    continue;
                }
                let v = scale * (theta.eta(k) - theta.eta(l)).abs() / zeta.sqrt();
                per_node[a] = per_node[a].max(v);
                per_node[b] = per_node[b].max(v);
                if v > statistic {
                    statistic = v;
                    argmax = Some(Argmax {
                        coordinate: coordinate_name(n, k),
                        other: Some(coordinate_name(n, l)),
                        t1: pt.t,
                        t2: None,
                    });
                }
            }
        }
    }
    let contributions: Vec<Contribution> = block
        .iter()
        .zip(&per_node)
        .filter(|(_, v)| v.is_finite())
        .map(|(&k, &value)| Contribution { coordinate: coordinate_name(n, k), value })
        .collect();
    let Some(argmax) = argmax else {
        return Err(Error::NoTestableCoordinates);
    };

    // per grid point: a_k, ω_kk and the defined coordinates of the block
    struct Prepared {
        incidence: Incidence,
        a: Vec<f64>,
        w: Vec<f64>,
        active: Vec<bool>,
    }
    let prepared: Vec<Option<Prepared>> = points
        .iter()
        .map(|pt| {
            pt.inference.map(|pi| Prepared {
                incidence: Incidence::new(log, pt.t, kernel.h1, kernel.kernel, spec.multiplier),
                a: block.iter().map(|&k| pi.s.inv_diag(k)).collect(),
                w: block.iter().map(|&k| pi.omega.diag[k]).collect(),
                active: block.iter().map(|&k| pi.s.active[k]).collect(),
            })
        })
        .collect();
    let rscale = (kernel.h1 / n as f64).sqrt();
    let n_mult = multiplier_count(log, spec.multiplier);
    let resampled: Vec<f64> = (0..spec.resamples)
        .into_par_iter()
        .map(|b| {
            let g = multipliers(spec.seed, b, n_mult);
            let mut best = 0.0f64;
            for pr in prepared.iter().flatten() {
                let x = pr.incidence.degree_sums(&g, n);
                let u: Vec<f64> = block.iter().zip(&pr.a).map(|(&k, a)| rscale * a * x[k]).collect();
                let var: Vec<f64> = pr.a.iter().zip(&pr.w).map(|(a, w)| a * a * w).collect();
                for i in 0..block.len() {
                    if !pr.active[i] {
                        continue;
                    }
                    for j in i + 1..block.len() {
                        let zeta = var[i] + var[j];
                        if pr.active[j] && zeta > 0.0 {
                            let d = u[i] - u[j];
                            if d * d > best * best * zeta {
                                best = d.abs() / zeta.sqrt();
                            }
                        }
                    }
                }
            }
            best
        })
        .collect();
    let tested = contributions.len();
    finish(spec, statistic, resampled, tested, argmax, contributions)
}

/// Dispatch on `spec.test`.
pub fn run_test(
    log: &EventLog,
    cov: &CovariateSet,
    fit: &FitResult,
    bundle: &VarianceBundle,
    spec: &TestSpec,
) -> Result<TestReport> {
    match spec.test {
        TestKind::TrendEta => trend_test_eta(log, fit, bundle, spec),
        TestKind::TrendGamma => trend_test_gamma(log, cov, fit, bundle, spec),
        TestKind::HetAlpha | TestKind::HetBeta => het_test(log, fit, bundle, spec),
    }
}
