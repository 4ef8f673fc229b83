//! Local estimating equations solved by alternating fixed-point and Newton updates.
//!
//! At each time `t` the unknowns are `α(t) ∈ R^n`, `β(t) ∈ R^{n-1}` (with
//! `β_n ≡ 0`) and `γ(t) ∈ R^p`. Step 1 solves the degree equations `F = 0`
//! for `α, β` in closed form given `γ`; Step 2 solves `Q(γ) = 0` by damped
//! Newton given `α, β`; the two alternate until the sup-norm changes add up
//! to at most `tol`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{weighted_sum, OVERFLOW_GUARD};
use crate::types::{pair_index, CovariateSet, EventLog, KernelConfig, ParameterCurves, Theta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// Each block uses the freshest values from the current sweep.
    #[default]
    GaussSeidel,
    /// Every block uses the previous sweep's values.
    Literal,
}

impl std::str::FromStr for UpdateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "gauss_seidel" => Ok(Self::GaussSeidel),
            "literal" => Ok(Self::Literal),
            _ => Err(Error::Invalid(format!("unknown update mode `{s}` (gauss-seidel|literal)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub grid: Vec<f64>,
    pub kernel: KernelConfig,
    pub tol: f64,
    pub max_iter: usize,
    /// Smallest Newton step fraction tried before giving up.
    pub damping_floor: f64,
    pub mode: UpdateMode,
    /// After each Step 1, solve the anchor column exactly along the direction
    /// `(α + δ, β - δ)`, which leaves every other pair rate unchanged.
    pub rebalance: bool,
    /// Weighted event mass below which a node is undefined at `t`.
    pub min_exposure: f64,
    pub warm_start: bool,
}

impl FitConfig {
    pub fn new(grid: Vec<f64>, kernel: KernelConfig) -> Self {
        Self {
            grid,
            kernel,
            tol: 1e-3,
            max_iter: 500,
            damping_floor: 1.0 / 64.0,
            mode: UpdateMode::GaussSeidel,
            rebalance: true,
            min_exposure: 1e-8,
            warm_start: true,
        }
    }

    pub fn validate(&self, tau: f64) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Invalid(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::Invalid("max_iter must be at least 1".into()));
        }
        if !(self.damping_floor > 0.0 && self.damping_floor <= 1.0) {
            return Err(Error::Invalid("damping floor must lie in (0, 1]".into()));
        }
        if self.grid.is_empty() {
            return Err(Error::Invalid("grid is empty".into()));
        }
        if self.grid.iter().any(|&t| !(0.0..=tau).contains(&t)) {
            return Err(Error::Invalid(format!("grid times must lie in [0, {tau}]")));
        }
        if self.grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid("grid must be strictly increasing".into()));
        }
        KernelConfig::new(self.kernel.kernel, self.kernel.h1, self.kernel.h2).map(|_| ())
    }
}

/// Per-time-point solver report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointDiagnostics {
    pub t: f64,
    pub iterations: usize,
    pub epsilon: f64,
    pub converged: bool,
    /// `‖F‖∞` over defined coordinates.
    pub f_residual: f64,
    /// `‖Q‖∞`.
    pub q_residual: f64,
    /// `‖F‖∞` relative to the fitted exposure of each equation.
    pub f_residual_scaled: f64,
    /// `‖Q‖∞` relative to the fitted covariate-weighted exposure.
    pub q_residual_scaled: f64,
    /// `t ∈ [h1, τ - h1]`.
    pub interior: bool,
    pub undefined_nodes: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult {
    pub curves: ParameterCurves,
    pub diagnostics: Vec<PointDiagnostics>,
}

/// Kernel-weighted data at one time point, shared by the solver and inference.
#[derive(Debug, Clone)]
pub struct LocalData<'a> {
    pub t: f64,
    pub n: usize,
    pub p: usize,
    pub cov: &'a CovariateSet,
    /// `∫ K_{h1}(s - t) dN_k(s)` per pair.
    pub c1: Vec<f64>,
    /// `Σ_k ∫ K_{h2}(s - t) Z_k(s) dN_k(s)`.
    pub qc: Vec<f64>,
    /// `∫_seg K_{h1}(s - t) ds` per covariate segment.
    pub w1: Vec<f64>,
    /// `∫_seg K_{h2}(s - t) ds` per covariate segment.
    pub w2: Vec<f64>,
    pub sender_active: Vec<bool>,
    /// Receivers `0..n`; the anchor `n - 1` is always active.
    pub receiver_active: Vec<bool>,
}

impl<'a> LocalData<'a> {
    pub fn new(log: &EventLog, cov: &'a CovariateSet, t: f64, kernel: &KernelConfig, min_exposure: f64) -> Result<Self> {
        let n = log.n_nodes();
        if cov.n_nodes() != n {
            return Err(Error::Invalid(format!(
                "covariates describe {} nodes, events {n}",
                cov.n_nodes()
            )));
        }
        let p = cov.p();
        let (k, h1, h2) = (kernel.kernel, kernel.h1, kernel.h2);
        let n_pairs = n * (n - 1);
        let mut c1 = vec![0.0; n_pairs];
        let mut qc = vec![0.0; p];
        let reach = k.support_radius() * h2;
        for (pk, c) in c1.iter_mut().enumerate() {
            let times = log.pair_times_by_index(pk);
            *c = weighted_sum(times, t, h1, k, false);
            if p > 0 && !times.is_empty() {
                let lo = times.partition_point(|&s| s < t - reach);
                let hi = times.partition_point(|&s| s <= t + reach);
                for &s in &times[lo..hi] {
                    let w = k.weight(s - t, h2);
                    for (q, z) in qc.iter_mut().zip(cov.evaluate_pair(pk, s)) {
                        *q += w * z;
                    }
                }
            }
        }
        let mut w1 = vec![0.0; cov.n_segments()];
        let mut w2 = vec![0.0; cov.n_segments()];
        for s in 0..cov.n_segments() {
            let (lo, hi) = cov.segment_interval(s);
            w1[s] = k.mass((lo - t) / h1, (hi - t) / h1);
            w2[s] = k.mass((lo - t) / h2, (hi - t) / h2);
        }
        let mut data = Self {
            t,
            n,
            p,
            cov,
            c1,
            qc,
            w1,
            w2,
            sender_active: vec![true; n],
            receiver_active: vec![true; n],
        };
        data.mark_undefined(min_exposure);
        Ok(data)
    }

    /// Drop nodes whose kernel-weighted event mass over active pairs falls below `eps`, until stable.
    fn mark_undefined(&mut self, eps: f64) {
        let n = self.n;
        loop {
            let mut changed = false;
            let mut row = vec![0.0; n];
            let mut col = vec![0.0; n];
            for i in 0..n {
                for j in (0..n).filter(|&j| j != i) {
                    if self.pair_active(i, j) {
                        let c = self.c1[pair_index(n, i, j)];
                        row[i] += c;
                        col[j] += c;
                    }
                }
            }
            for i in 0..n {
                if self.sender_active[i] && row[i] < eps {
                    self.sender_active[i] = false;
                    changed = true;
                }
            }
            for j in 0..n - 1 {
                if self.receiver_active[j] && col[j] < eps {
                    self.receiver_active[j] = false;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
    }

    #[inline]
    pub fn pair_active(&self, i: usize, j: usize) -> bool {
        self.sender_active[i] && self.receiver_active[j]
    }

    pub fn n_active_pairs(&self) -> usize {
        let s = self.sender_active.iter().filter(|&&a| a).count();
        let mut total = 0;
        for i in (0..self.n).filter(|&i| self.sender_active[i]) {
            total += (0..self.n).filter(|&j| j != i && self.receiver_active[j]).count();
        }
        debug_assert!(total <= s * (self.n - 1));
        total
    }

    /// Row sums `Σ_j c1_ij` and column sums `Σ_i c1_ij` over active pairs.
    pub fn degree_counts(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.n;
        let mut row = vec![0.0; n];
        let mut col = vec![0.0; n];
        for i in 0..n {
            for j in (0..n).filter(|&j| j != i && self.pair_active(i, j)) {
                let c = self.c1[pair_index(n, i, j)];
                row[i] += c;
                col[j] += c;
            }
        }
        (row, col)
    }

    #[inline]
    fn zdot(&self, s: usize, gamma: &[f64]) -> f64 {
        self.cov.segment_value(s).iter().zip(gamma).map(|(a, b)| a * b).sum()
    }

    /// `∫ K_{h1}(s - t) exp{Z_k(s)^T γ} ds`.
    pub fn exposure1(&self, k: usize, gamma: &[f64]) -> f64 {
        self.cov.segments(k).map(|s| self.w1[s] * self.zdot(s, gamma).exp()).sum()
    }

    /// `∫ K_{h1}(s - t) Z_k(s) exp{Z_k(s)^T γ} ds`, accumulated into `out` with weight `scale`.
    pub fn add_exposure1_z(&self, k: usize, gamma: &[f64], scale: f64, out: &mut [f64]) {
        for s in self.cov.segments(k) {
            let w = scale * self.w1[s] * self.zdot(s, gamma).exp();
            for (o, z) in out.iter_mut().zip(self.cov.segment_value(s)) {
                *o += w * z;
            }
        }
    }

    /// Accumulate `e^{a} ∫ K_{h2} m(Z) e^{Z^T γ}` for `m = 1, Z, Z Z^T` into the given buffers.
    fn add_exposure2(&self, k: usize, a: f64, gamma: &[f64], plain: &mut f64, z_out: &mut [f64], zz_out: &mut [f64]) -> Result<()> {
        let p = self.p;
        for s in self.cov.segments(k) {
            let expo = a + self.zdot(s, gamma);
            if expo > OVERFLOW_GUARD {
                return Err(Error::IntensityOverflow { exponent: expo });
            }
            let w = self.w2[s] * expo.exp();
            if w == 0.0 {
                continue;
            }
            *plain += w;
            let z = self.cov.segment_value(s);
            for r in 0..p {
                let wz = w * z[r];
                z_out[r] += wz;
                for c in 0..=r {
                    zz_out[r * p + c] += wz * z[c];
                }
            }
        }
        Ok(())
    }

    /// `Σ_k e^{a_k} ∫ K_{h2} Z e^{Zγ}`, its `Z Z^T` analogue (full symmetric) and
    /// `Σ_k e^{a_k} ∫ K_{h2} e^{Zγ}` over active pairs.
    pub fn q_moments(&self, theta: &Theta, gamma: &[f64]) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let (n, p) = (self.n, self.p);
        let mut z = vec![0.0; p];
        let mut zz = vec![0.0; p * p];
        let mut plain = 0.0;
        for i in (0..n).filter(|&i| self.sender_active[i]) {
            for j in (0..n).filter(|&j| j != i && self.receiver_active[j]) {
                let a = theta.alpha[i] + theta.beta_full(j);
                self.add_exposure2(pair_index(n, i, j), a, gamma, &mut plain, &mut z, &mut zz)?;
            }
        }
        for r in 0..p {
            for c in r + 1..p {
                zz[r * p + c] = zz[c * p + r];
            }
        }
        Ok((z, zz, plain))
    }
}

/// Stacked residual `(F_1..F_{2n-1}, Q_1..Q_p)` at `theta`; undefined coordinates give 0.
pub fn stacked_residual(data: &LocalData, theta: &Theta) -> Result<Vec<f64>> {
    let (n, p) = (data.n, data.p);
    let nm1 = (n - 1) as f64;
    let mut f = vec![0.0; 2 * n - 1 + p];
    for i in (0..n).filter(|&i| data.sender_active[i]) {
        for j in (0..n).filter(|&j| j != i && data.receiver_active[j]) {
            let k = pair_index(n, i, j);
            let r = data.c1[k] - (theta.alpha[i] + theta.beta_full(j)).exp() * data.exposure1(k, &theta.gamma);
            f[i] += r / nm1;
            if j < n - 1 {
                f[n + j] += r / nm1;
            }
        }
    }
    if p > 0 {
        let big_n = data.n_active_pairs().max(1) as f64;
        let (z, _, _) = data.q_moments(theta, &theta.gamma)?;
        for c in 0..p {
            f[2 * n - 1 + c] = (data.qc[c] - z[c]) / big_n;
        }
    }
    Ok(f)
}

/// Analytic Jacobian of [`stacked_residual`] with respect to `(α, β, γ)`.
pub fn stacked_jacobian(data: &LocalData, theta: &Theta) -> Result<DMatrix<f64>> {
    let (n, p) = (data.n, data.p);
    let m = 2 * n - 1 + p;
    let nm1 = (n - 1) as f64;
    let big_n = data.n_active_pairs().max(1) as f64;
    let qrow = 2 * n - 1;
    let mut jac = DMatrix::zeros(m, m);
    let mut ez = vec![0.0; p];
    for i in (0..n).filter(|&i| data.sender_active[i]) {
        for j in (0..n).filter(|&j| j != i && data.receiver_active[j]) {
            let k = pair_index(n, i, j);
            let a = theta.alpha[i] + theta.beta_full(j);
            let e1 = a.exp() * data.exposure1(k, &theta.gamma);
            ez.iter_mut().for_each(|v| *v = 0.0);
            data.add_exposure1_z(k, &theta.gamma, a.exp(), &mut ez);
            let mut plain = 0.0;
            let mut z2 = vec![0.0; p];
            let mut zz2 = vec![0.0; p * p];
            data.add_exposure2(k, a, &theta.gamma, &mut plain, &mut z2, &mut zz2)?;
            // F_i row
            jac[(i, i)] -= e1 / nm1;
            if j < n - 1 {
                jac[(i, n + j)] -= e1 / nm1;
                jac[(n + j, i)] -= e1 / nm1;
                jac[(n + j, n + j)] -= e1 / nm1;
            }
            for c in 0..p {
                jac[(i, qrow + c)] -= ez[c] / nm1;
                if j < n - 1 {
                    jac[(n + j, qrow + c)] -= ez[c] / nm1;
                }
                jac[(qrow + c, i)] -= z2[c] / big_n;
                if j < n - 1 {
                    jac[(qrow + c, n + j)] -= z2[c] / big_n;
                }
                for d in 0..=c {
                    jac[(qrow + c, qrow + d)] -= zz2[c * p + d] / big_n;
                    if d != c {
                        jac[(qrow + d, qrow + c)] -= zz2[c * p + d] / big_n;
                    }
                }
            }
        }
    }
    Ok(jac)
}

/// Residual norms `(‖F‖∞, ‖Q‖∞, scaled ‖F‖∞, scaled ‖Q‖∞)` at a defined solution.
pub fn residual_norms(data: &LocalData, theta: &Theta) -> Result<(f64, f64, f64, f64)> {
    let (n, p) = (data.n, data.p);
    let res = stacked_residual(data, theta)?;
    let nm1 = (n - 1) as f64;
    let mut row_exp = vec![0.0; n];
    let mut col_exp = vec![0.0; n];
    for i in (0..n).filter(|&i| data.sender_active[i]) {
        for j in (0..n).filter(|&j| j != i && data.receiver_active[j]) {
            let k = pair_index(n, i, j);
            let e = (theta.alpha[i] + theta.beta_full(j)).exp() * data.exposure1(k, &theta.gamma);
            row_exp[i] += e;
            col_exp[j] += e;
        }
    }
    let mut f_abs = 0.0f64;
    let mut f_rel = 0.0f64;
    for i in (0..n).filter(|&i| data.sender_active[i]) {
        f_abs = f_abs.max(res[i].abs());
        f_rel = f_rel.max(res[i].abs() * nm1 / row_exp[i]);
    }
    for j in (0..n - 1).filter(|&j| data.receiver_active[j]) {
        f_abs = f_abs.max(res[n + j].abs());
        f_rel = f_rel.max(res[n + j].abs() * nm1 / col_exp[j]);
    }
    let (mut q_abs, mut q_rel) = (0.0f64, 0.0f64);
    if p > 0 {
        let big_n = data.n_active_pairs().max(1) as f64;
        // scale: covariate-weighted exposure Σ e^{π} ∫K_{h2}|Z|
        let mut scale = vec![0.0; p];
        for i in (0..n).filter(|&i| data.sender_active[i]) {
            for j in (0..n).filter(|&j| j != i && data.receiver_active[j]) {
                let k = pair_index(n, i, j);
                let a = theta.alpha[i] + theta.beta_full(j);
                for s in data.cov.segments(k) {
                    let w = data.w2[s] * (a + data.zdot(s, &theta.gamma)).exp();
                    for (sc, z) in scale.iter_mut().zip(data.cov.segment_value(s)) {
                        *sc += w * z.abs();
                    }
                }
            }
        }
        for c in 0..p {
            let q = res[2 * n - 1 + c];
            q_abs = q_abs.max(q.abs());
            let denom = scale[c] / big_n;
            q_rel = q_rel.max(if denom > 0.0 { q.abs() / denom } else { q.abs() });
        }
    }
    Ok((f_abs, q_abs, f_rel, q_rel))
}

/// Moments of `e^{α_i + β_j} ∫ K_{h2}(s - t) m(Z) e^{Z^T γ} ds` summed over active pairs,
/// plus the per-segment factors `e^{Z^T γ}` reused by Step 1.
struct GammaPass {
    gamma: Vec<f64>,
    plain: f64,
    z: Vec<f64>,
    zz: Vec<f64>,
    ez: Vec<f64>,
}

impl GammaPass {
    fn new(data: &LocalData, alpha: &[f64], beta: &Theta, gamma: &[f64]) -> Result<Self> {
        let (n, p) = (data.n, data.p);
        let cov = data.cov;
        let mut out = Self {
            gamma: gamma.to_vec(),
            plain: 0.0,
            z: vec![0.0; p],
            zz: vec![0.0; p * p],
            ez: vec![0.0; cov.n_segments()],
        };
        let lb: Vec<f64> = (0..n).map(|j| beta.beta_full(j)).collect();
        let eb: Vec<f64> = lb.iter().map(|b| b.exp()).collect();
        if cov.is_constant() {
            match p {
                1 => return Self::constant_pass::<1>(data, alpha, &lb, &eb, out),
                2 => return Self::constant_pass::<2>(data, alpha, &lb, &eb, out),
                3 => return Self::constant_pass::<3>(data, alpha, &lb, &eb, out),
                _ => {}
            }
        }
        let mut z = vec![0.0; p];
        let mut zz = vec![0.0; p * p];
        let mut plain = 0.0;
        let mut add = |w: f64, zs: &[f64]| {
            plain += w;
            for a in 0..p {
                let wz = w * zs[a];
                z[a] += wz;
                for b in 0..=a {
                    zz[a * p + b] += wz * zs[b];
                }
            }
        };
        let values = cov.segment_values_flat();
        let constant = cov.is_constant();
        for i in (0..n).filter(|&i| data.sender_active[i]) {
            let base = i * (n - 1);
            let ea = alpha[i].exp();
            for r in 0..n - 1 {
                let j = if r < i { r } else { r + 1 };
                if !data.receiver_active[j] {
                    continue;
                }
                let a_ij = alpha[i] + lb[j];
                let e_ij = ea * eb[j];
                let k = base + r;
                let segs = if constant { k..k + 1 } else { cov.segments(k) };
                for s in segs {
                    let zs = &values[s * p..s * p + p];
                    let lin: f64 = zs.iter().zip(gamma).map(|(a, b)| a * b).sum();
                    let expo = a_ij + lin;
                    if expo > OVERFLOW_GUARD || lin > OVERFLOW_GUARD {
                        return Err(Error::IntensityOverflow { exponent: expo.max(lin) });
                    }
                    let ez = lin.exp();
                    out.ez[s] = ez;
                    add(data.w2[s] * e_ij * ez, zs);
                }
            }
        }
        out.plain = plain;
        out.z = z;
        out.zz = zz;
        for a in 0..p {
            for b in a + 1..p {
                out.zz[a * p + b] = out.zz[b * p + a];
            }
        }
        Ok(out)
    }

    /// Unrolled pass for single-segment covariates of small fixed dimension.
    fn constant_pass<const P: usize>(data: &LocalData, alpha: &[f64], lb: &[f64], eb: &[f64], mut out: Self) -> Result<Self> {
        let n = data.n;
        let values = data.cov.segment_values_flat();
        let mut g = [0.0; P];
        g.copy_from_slice(&out.gamma);
        let mut plain = 0.0;
        let mut z = [0.0; P];
        let mut zz = [[0.0; P]; P];
        let mut worst = f64::NEG_INFINITY;
        for i in (0..n).filter(|&i| data.sender_active[i]) {
            let base = i * (n - 1);
            let ea = alpha[i].exp();
            for r in 0..n - 1 {
                let j = if r < i { r } else { r + 1 };
                if !data.receiver_active[j] {
                    continue;
                }
                let k = base + r;
                let zs: &[f64; P] = values[k * P..k * P + P].try_into().expect("segment width");
                let mut lin = 0.0;
                for a in 0..P {
                    lin += zs[a] * g[a];
                }
                worst = worst.max(lin.max(alpha[i] + lb[j] + lin));
                let ez = lin.exp();
                out.ez[k] = ez;
                let w = data.w2[k] * ea * eb[j] * ez;
                plain += w;
                for a in 0..P {
                    let wz = w * zs[a];
                    z[a] += wz;
                    for b in 0..=a {
                        zz[a][b] += wz * zs[b];
                    }
                }
            }
        }
        if worst > OVERFLOW_GUARD {
            return Err(Error::IntensityOverflow { exponent: worst });
        }
        out.plain = plain;
        out.z.copy_from_slice(&z);
        for a in 0..P {
            for b in 0..P {
                out.zz[a * P + b] = if b <= a { zz[a][b] } else { zz[b][a] };
            }
        }
        Ok(out)
    }

    /// Concave objective whose gradient is `N · Q(γ)`.
    fn objective(&self, qc: &[f64]) -> f64 {
        qc.iter().zip(&self.gamma).map(|(a, b)| a * b).sum::<f64>() - self.plain
    }
}

/// Largest sup-norm change of `γ` in one Newton step.
const MAX_NEWTON_STEP: f64 = 1.0;

/// Largest scaled residual `‖F‖∞`, `‖Q‖∞` accepted at a converged point.
pub const RESIDUAL_CERTIFICATE: f64 = 1e-4;

/// Step 2: solve `Q(γ) = 0` for fixed `α, β` by damped Newton from `start`.
fn solve_gamma(data: &LocalData, alpha: &[f64], beta: &Theta, start: &[f64], floor: f64) -> Result<GammaPass> {
    let p = data.p;
    let t = data.t;
    let mut cur = GammaPass::new(data, alpha, beta, start)?;
    let mut obj = cur.objective(&data.qc);
    for _ in 0..100 {
        let grad = DVector::from_iterator(p, data.qc.iter().zip(&cur.z).map(|(a, b)| a - b));
        let hess = DMatrix::from_row_slice(p, p, &cur.zz);
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => hess.lu().solve(&grad).ok_or(Error::GammaSolveFailed { t })?,
        };
        if step.iter().any(|v| !v.is_finite()) {
            return Err(Error::GammaSolveFailed { t });
        }
        let size = step.amax();
        if size <= 1e-11 * (1.0 + cur.gamma.iter().map(|g| g.abs()).fold(0.0, f64::max)) {
            return Ok(cur);
        }
        // far from the root the exponential curvature makes raw Newton steps huge
        let start = if size > MAX_NEWTON_STEP { MAX_NEWTON_STEP / size } else { 1.0 };
        let mut frac = start;
        let next = loop {
            let trial: Vec<f64> = cur.gamma.iter().zip(step.iter()).map(|(g, d)| g + frac * d).collect();
            match GammaPass::new(data, alpha, beta, &trial) {
                Ok(pass) if pass.objective(&data.qc) >= obj - 1e-13 * obj.abs().max(1.0) => break Some(pass),
                Ok(_) | Err(Error::IntensityOverflow { .. }) => {}
                Err(e) => return Err(e),
            }
            frac *= 0.5;
            if frac < start * floor {
                break None;
            }
        };
        let Some(next) = next else {
            // no ascent at the damping floor: accept if already stationary to rounding
            if size <= 1e-8 * (1.0 + cur.gamma.iter().map(|g| g.abs()).fold(0.0, f64::max)) {
                return Ok(cur);
            }
            return Err(Error::GammaSolveFailed { t });
        };
        obj = next.objective(&data.qc);
        cur = next;
        // a full Newton step this short leaves an error of its square
        if frac == 1.0 && size <= 1e-6 {
            return Ok(cur);
        }
    }
    Ok(cur)
}

/// Pair exposures `∫ K_{h1}(s - t) e^{Z^T γ} ds` from cached segment factors.
fn fill_exposure1(data: &LocalData, ez: &[f64], e1: &mut [f64]) {
    for (k, e) in e1.iter_mut().enumerate() {
        *e = data.cov.segments(k).map(|s| data.w1[s] * ez[s]).sum();
    }
}

/// Step 1 update of `α` given `β` and the pair exposures `e1`.
fn update_alpha(data: &LocalData, row: &[f64], e1: &[f64], beta: &Theta, out: &mut [f64]) {
    let n = data.n;
    let eb: Vec<f64> = (0..n).map(|j| if data.receiver_active[j] { beta.beta_full(j).exp() } else { 0.0 }).collect();
    for i in (0..n).filter(|&i| data.sender_active[i]) {
        let base = i * (n - 1);
        let mut denom = 0.0;
        for r in 0..n - 1 {
            let j = if r < i { r } else { r + 1 };
            denom += eb[j] * e1[base + r];
        }
        out[i] = (row[i] / denom).ln();
    }
}

/// Step 1 update of `β` given `α` and the pair exposures `e1`.
fn update_beta(data: &LocalData, col: &[f64], e1: &[f64], alpha: &[f64], out: &mut [f64]) {
    let n = data.n;
    let mut denom = vec![0.0; n];
    for i in (0..n).filter(|&i| data.sender_active[i]) {
        let ea = alpha[i].exp();
        let base = i * (n - 1);
        for r in 0..n - 1 {
            let j = if r < i { r } else { r + 1 };
            denom[j] += ea * e1[base + r];
        }
    }
    for j in (0..n - 1).filter(|&j| data.receiver_active[j]) {
        out[j] = (col[j] / denom[j]).ln();
    }
}

/// Shift `α` up and `β` down by the `δ` that solves the anchor receiver's equation.
///
/// Plain Step 1 moves along this direction only by `O(1/n)` per sweep.
fn rebalance_anchor(data: &LocalData, col: &[f64], e1: &[f64], theta: &mut Theta) {
    let n = data.n;
    let anchor = n - 1;
    let denom: f64 = (0..n - 1)
        .filter(|&i| data.sender_active[i])
        .map(|i| theta.alpha[i].exp() * e1[i * (n - 1) + anchor - 1])
        .sum();
    let delta = (col[anchor] / denom).ln();
    if !delta.is_finite() {
        return;
    }
    for i in (0..n).filter(|&i| data.sender_active[i]) {
        theta.alpha[i] += delta;
    }
    for j in (0..n - 1).filter(|&j| data.receiver_active[j]) {
        theta.beta[j] -= delta;
    }
}

fn max_abs_diff(a: &[f64], b: &[f64], mask: &[bool]) -> f64 {
    a.iter()
        .zip(b)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((x, y), _)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn empty_diagnostics(t: f64) -> PointDiagnostics {
    PointDiagnostics {
        t,
        iterations: 0,
        epsilon: f64::INFINITY,
        converged: false,
        f_residual: f64::NAN,
        q_residual: f64::NAN,
        f_residual_scaled: f64::NAN,
        q_residual_scaled: f64::NAN,
        interior: false,
        undefined_nodes: 0,
        error: None,
    }
}

/// Alternate degree and homophily updates on prepared local data until convergence.
pub fn solve_local(data: &LocalData, config: &FitConfig, warm: Option<&Theta>) -> Result<(Theta, PointDiagnostics)> {
    let (n, p) = (data.n, data.p);
    let (row, col) = data.degree_counts();
    let mut theta = Theta::zeros(n, p);
    if let Some(w) = warm {
        for i in 0..n {
            if w.alpha_defined[i] && w.alpha[i].is_finite() {
                theta.alpha[i] = w.alpha[i];
            }
        }
        for j in 0..n - 1 {
            if w.beta_defined[j] && w.beta[j].is_finite() {
                theta.beta[j] = w.beta[j];
            }
        }
        if w.gamma_defined && w.gamma.iter().all(|g| g.is_finite()) {
            theta.gamma.clone_from(&w.gamma);
        }
    }
    // undefined nodes carry zero intensity and are excluded everywhere
    for i in 0..n {
        theta.alpha_defined[i] = data.sender_active[i];
        if !data.sender_active[i] {
            theta.alpha[i] = f64::NEG_INFINITY;
        }
    }
    for j in 0..n - 1 {
        theta.beta_defined[j] = data.receiver_active[j];
        if !data.receiver_active[j] {
            theta.beta[j] = f64::NEG_INFINITY;
        }
    }
    let mut diag = empty_diagnostics(data.t);
    diag.undefined_nodes = data.sender_active.iter().chain(&data.receiver_active).filter(|&&a| !a).count();
    if !data.sender_active.iter().any(|&a| a) {
        return Err(Error::UndefinedFit { t: data.t });
    }
    let mut e1 = vec![0.0; n * (n - 1)];
    for (k, e) in e1.iter_mut().enumerate() {
        *e = data.exposure1(k, &theta.gamma);
    }
    for iter in 1..=config.max_iter {
        let prev = theta.clone();
        let mut next = theta.clone();
        update_alpha(data, &row, &e1, &prev, &mut next.alpha);
        let alpha_src = match config.mode {
            UpdateMode::GaussSeidel => next.alpha.clone(),
            UpdateMode::Literal => prev.alpha.clone(),
        };
        update_beta(data, &col, &e1, &alpha_src, &mut next.beta);
        if config.rebalance {
            rebalance_anchor(data, &col, &e1, &mut next);
        }
        if p > 0 {
            let pass = match config.mode {
                UpdateMode::GaussSeidel => solve_gamma(data, &next.alpha, &next, &prev.gamma, config.damping_floor)?,
                UpdateMode::Literal => solve_gamma(data, &prev.alpha, &prev, &prev.gamma, config.damping_floor)?,
            };
            fill_exposure1(data, &pass.ez, &mut e1);
            next.gamma = pass.gamma;
        }
        let eps = max_abs_diff(&next.alpha, &prev.alpha, &data.sender_active)
            + max_abs_diff(&next.beta, &prev.beta, &data.receiver_active[..n - 1])
            + next.gamma.iter().zip(&prev.gamma).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        theta = next;
        diag.iterations = iter;
        diag.epsilon = eps;
        if eps <= config.tol {
            // the step criterion alone can stop while the equations are still visibly off
            let (_, _, fr, qr) = residual_norms(data, &theta)?;
            if fr <= RESIDUAL_CERTIFICATE && qr <= RESIDUAL_CERTIFICATE {
                diag.converged = true;
                break;
            }
        }
    }
    let (fa, qa, fr, qr) = residual_norms(data, &theta)?;
    diag.f_residual = fa;
    diag.q_residual = qa;
    diag.f_residual_scaled = fr;
    diag.q_residual_scaled = qr;
    for i in 0..n {
        if !theta.alpha_defined[i] {
            theta.alpha[i] = f64::NAN;
        }
    }
    for j in 0..n - 1 {
        if !theta.beta_defined[j] {
            theta.beta[j] = f64::NAN;
        }
    }
    Ok((theta, diag))
}

fn is_interior(t: f64, h1: f64, tau: f64) -> bool {
    t >= h1 - 1e-12 && t <= tau - h1 + 1e-12
}

/// Solve the local estimating equations at a single time point.
pub fn fit_at_time(
    log: &EventLog,
    cov: &CovariateSet,
    t: f64,
    config: &FitConfig,
    warm_start: Option<&Theta>,
) -> Result<(Theta, PointDiagnostics)> {
    config.validate(log.tau())?;
    let data = LocalData::new(log, cov, t, &config.kernel, config.min_exposure)?;
    let (theta, mut diag) = solve_local(&data, config, warm_start)?;
    diag.interior = is_interior(t, config.kernel.h1, log.tau());
    Ok((theta, diag))
}

fn failed_point(t: f64, n: usize, p: usize, interior: bool, err: &Error) -> (Theta, PointDiagnostics) {
    (
        Theta::undefined(n, p),
        PointDiagnostics {
            t,
            iterations: 0,
            epsilon: f64::NAN,
            converged: false,
            f_residual: f64::NAN,
            q_residual: f64::NAN,
            f_residual_scaled: f64::NAN,
            q_residual_scaled: f64::NAN,
            interior,
            undefined_nodes: 2 * n - 1,
            error: Some(err.to_string()),
        },
    )
}

/// Fit every grid point, warm-starting from the left neighbour. Failures are recorded, never fatal.
pub fn fit_grid(log: &EventLog, cov: &CovariateSet, config: &FitConfig) -> Result<FitResult> {
    config.validate(log.tau())?;
    if cov.n_nodes() != log.n_nodes() {
        return Err(Error::Invalid(format!(
            "covariates describe {} nodes, events {}",
            cov.n_nodes(),
            log.n_nodes()
        )));
    }
    let (n, p) = (log.n_nodes(), cov.p());
    let mut points = Vec::with_capacity(config.grid.len());
    let mut diagnostics = Vec::with_capacity(config.grid.len());
    let mut warm: Option<Theta> = None;
    for &t in &config.grid {
        let interior = is_interior(t, config.kernel.h1, log.tau());
        let result = LocalData::new(log, cov, t, &config.kernel, config.min_exposure)
            .and_then(|data| solve_local(&data, config, if config.warm_start { warm.as_ref() } else { None }));
        let (theta, mut diag) = match result {
            Ok(r) => r,
            Err(e) => failed_point(t, n, p, interior, &e),
        };
        diag.interior = interior;
        if diag.error.is_none() {
            warm = Some(theta.clone());
        }
        points.push(theta);
        diagnostics.push(diag);
    }
    Ok(FitResult { curves: ParameterCurves { grid: config.grid.clone(), points }, diagnostics })
}

/// Restricted fit with one intercept `μ(t) = α(t) + β(t)` shared by all pairs.
///
/// The intercept is reported as `α_i(t) = μ(t)` for every sender with `β ≡ 0`.
/// With no node effects to profile out, all equations share the bandwidth `h1`.
pub fn fit_homogeneous(log: &EventLog, cov: &CovariateSet, config: &FitConfig) -> Result<FitResult> {
    config.validate(log.tau())?;
    let kernel = KernelConfig { h2: config.kernel.h1, ..config.kernel };
    let (n, p) = (log.n_nodes(), cov.p());
    let mut points = Vec::with_capacity(config.grid.len());
    let mut diagnostics = Vec::with_capacity(config.grid.len());
    let mut warm: Option<(f64, Vec<f64>)> = None;
    for &t in &config.grid {
        let interior = is_interior(t, config.kernel.h1, log.tau());
        let start = if config.warm_start { warm.clone() } else { None };
        let result = LocalData::new(log, cov, t, &kernel, 0.0)
            .and_then(|mut data| {
                // pooled model: every pair stays in
                data.sender_active.iter_mut().for_each(|a| *a = true);
                data.receiver_active.iter_mut().for_each(|a| *a = true);
                solve_homogeneous(&data, config, start)
            });
        let (theta, mut diag) = match result {
            Ok(r) => r,
            Err(e) => failed_point(t, n, p, interior, &e),
        };
        diag.interior = interior;
        if diag.error.is_none() {
            warm = Some((theta.alpha[0], theta.gamma.clone()));
        }
        points.push(theta);
        diagnostics.push(diag);
    }
    Ok(FitResult { curves: ParameterCurves { grid: config.grid.clone(), points }, diagnostics })
}

fn solve_homogeneous(data: &LocalData, config: &FitConfig, warm: Option<(f64, Vec<f64>)>) -> Result<(Theta, PointDiagnostics)> {
    let (n, p) = (data.n, data.p);
    let total: f64 = data.c1.iter().sum();
    if !(total > 0.0) {
        return Err(Error::UndefinedFit { t: data.t });
    }
    let (mut mu, mut gamma) = warm.unwrap_or((0.0, vec![0.0; p]));
    let make_theta = |mu: f64, gamma: &[f64]| {
        let mut th = Theta::zeros(n, p);
        th.alpha.iter_mut().for_each(|a| *a = mu);
        th.gamma = gamma.to_vec();
        th
    };
    let mut diag = empty_diagnostics(data.t);
    let n_pairs = n * (n - 1);
    for iter in 1..=config.max_iter {
        let exposure: f64 = (0..n_pairs).map(|k| data.exposure1(k, &gamma)).sum();
        let mu_next = (total / exposure).ln();
        let src = match config.mode {
            UpdateMode::GaussSeidel => mu_next,
            UpdateMode::Literal => mu,
        };
        let gamma_next = if p > 0 {
            let th = make_theta(src, &gamma);
            solve_gamma(data, &th.alpha, &th, &gamma, config.damping_floor)?.gamma
        } else {
            Vec::new()
        };
        let eps = (mu_next - mu).abs() + gamma_next.iter().zip(&gamma).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        mu = mu_next;
        gamma = gamma_next;
        diag.iterations = iter;
        diag.epsilon = eps;
        if eps <= config.tol {
            let (_, fr, _, qr) = homogeneous_residuals(data, &make_theta(mu, &gamma), total)?;
            if fr <= RESIDUAL_CERTIFICATE && qr <= RESIDUAL_CERTIFICATE {
                diag.converged = true;
                break;
            }
        }
    }
    let theta = make_theta(mu, &gamma);
    (diag.f_residual, diag.f_residual_scaled, diag.q_residual, diag.q_residual_scaled) = homogeneous_residuals(data, &theta, total)?;
    Ok((theta, diag))
}

/// `(|F|, scaled |F|, ‖Q‖∞, scaled ‖Q‖∞)` of the pooled equations, averaged over pairs.
fn homogeneous_residuals(data: &LocalData, theta: &Theta, total: f64) -> Result<(f64, f64, f64, f64)> {
    let n_pairs = data.n * (data.n - 1);
    let mu = theta.alpha[0];
    let exposure: f64 = (0..n_pairs).map(|k| data.exposure1(k, &theta.gamma)).sum();
    let f = total - mu.exp() * exposure;
    let (mut q_abs, mut q_rel) = (0.0, 0.0);
    if data.p > 0 {
        let (z, _, _) = data.q_moments(theta, &theta.gamma)?;
        let q = data.qc.iter().zip(&z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let scale = z.iter().map(|v| v.abs()).fold(0.0, f64::max);
        q_abs = q / n_pairs as f64;
        q_rel = if scale > 0.0 { q / scale } else { q };
    }
    Ok((f.abs() / n_pairs as f64, f.abs() / (mu.exp() * exposure), q_abs, q_rel))
}
