//! Sandwich variances, bias correction for `γ̂` and pointwise confidence intervals.
//!
//! `V̂(t)` is the `(2n-1)`-square curvature of the degree equations. Its
//! approximate inverse `Ŝ = diag(1/v̂) + c s s^T` (with `c = 1/v̂_{2n,2n}` and
//! `s = +1` on the α block, `-1` on the β block) is kept implicit, so every
//! product below costs `O(n^2)` at most.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimator::FitResult;
use crate::kernel::{weighted_sum, Kernel};
use crate::types::{CovariateSet, EventLog, KernelConfig, Theta};

/// Implicit `Ŝ(t)` on the defined coordinates of `η = (α, β)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StructuredSMatrix {
    pub t: f64,
    pub n: usize,
    /// `v̂_{k,k}`, `k < 2n - 1`; undefined coordinates hold 0.
    pub diag: Vec<f64>,
    pub active: Vec<bool>,
    /// `v̂_{2n,2n} = Σ_i v̂_ii - Σ_i Σ_{j≠i} v̂_ij`, the scaled column sum of the anchor receiver.
    pub corner: f64,
}

impl StructuredSMatrix {
    pub fn dim(&self) -> usize {
        2 * self.n - 1
    }

    /// `1 / v̂_kk`, or 0 for undefined coordinates.
    #[inline]
    pub fn inv_diag(&self, k: usize) -> f64 {
        if self.active[k] {
            1.0 / self.diag[k]
        } else {
            0.0
        }
    }

    /// Block sign: `+1` for α, `-1` for β, 0 when undefined.
    #[inline]
    pub fn sign(&self, k: usize) -> f64 {
        match (self.active[k], k < self.n) {
            (false, _) => 0.0,
            (true, true) => 1.0,
            (true, false) => -1.0,
        }
    }

    #[inline]
    pub fn c(&self) -> f64 {
        1.0 / self.corner
    }

    pub fn entry(&self, k: usize, l: usize) -> f64 {
        let d = if k == l { self.inv_diag(k) } else { 0.0 };
        d + self.c() * self.sign(k) * self.sign(l)
    }

    /// `Ŝ x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let sx: f64 = (0..self.dim()).map(|k| self.sign(k) * x[k]).sum();
        let c = self.c();
        (0..self.dim()).map(|k| self.inv_diag(k) * x[k] + c * self.sign(k) * sx).collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let m = self.dim();
        DMatrix::from_fn(m, m, |k, l| self.entry(k, l))
    }
}

/// Fitted rates `λ̂_ij(t) = exp{α̂_i + β̂_j + Z_ij(t)^T γ̂}` per pair; 0 for pairs touching undefined nodes.
pub fn pair_rates(theta: &Theta, cov: &CovariateSet, t: f64) -> Vec<f64> {
    let n = theta.n();
    let mut lam = vec![0.0; n * (n - 1)];
    for i in 0..n {
        for r in 0..n - 1 {
            let j = if r < i { r } else { r + 1 };
            if theta.alpha_defined[i] && theta.beta_full_defined(j) {
                let k = i * (n - 1) + r;
                lam[k] = theta.log_intensity(i, j, cov.evaluate_pair(k, t)).exp();
            }
        }
    }
    lam
}

/// `Ŝ(t)` from a fitted parameter vector.
pub fn s_matrix(theta: &Theta, cov: &CovariateSet, t: f64) -> Result<StructuredSMatrix> {
    s_matrix_from_rates(theta, &pair_rates(theta, cov, t), t)
}

fn s_matrix_from_rates(theta: &Theta, lam: &[f64], t: f64) -> Result<StructuredSMatrix> {
    let n = theta.n();
    let nm1 = (n - 1) as f64;
    let mut diag = vec![0.0; 2 * n - 1];
    let mut corner = 0.0;
    for i in 0..n {
        for r in 0..n - 1 {
            let j = if r < i { r } else { r + 1 };
            let l = lam[i * (n - 1) + r] / nm1;
            diag[i] += l;
            if j < n - 1 {
                diag[n + j] += l;
            } else {
                corner += l;
            }
        }
    }
    let active: Vec<bool> = (0..2 * n - 1).map(|k| theta.eta_defined(k) && diag[k] > 0.0).collect();
    if !(corner > 0.0) || !corner.is_finite() {
        return Err(Error::DegenerateSMatrix { t });
    }
    Ok(StructuredSMatrix { t, n, diag, active, corner })
}

/// Dense `V̂(t)` on the defined coordinates (for checks and small networks).
pub fn v_matrix_dense(theta: &Theta, cov: &CovariateSet, t: f64) -> DMatrix<f64> {
    let n = theta.n();
    let lam = pair_rates(theta, cov, t);
    let nm1 = (n - 1) as f64;
    let mut v = DMatrix::zeros(2 * n - 1, 2 * n - 1);
    for i in 0..n {
        for r in 0..n - 1 {
            let j = if r < i { r } else { r + 1 };
            let l = lam[i * (n - 1) + r] / nm1;
            v[(i, i)] += l;
            if j < n - 1 {
                v[(n + j, n + j)] += l;
                v[(i, n + j)] += l;
                v[(n + j, i)] += l;
            }
        }
    }
    v
}

/// Kernel-weighted counts per pair at one time point.
#[derive(Debug, Clone)]
pub struct PairCounts {
    /// `∫ K_h(s - t) dN_k(s)`.
    pub first: Vec<f64>,
    /// `∫ K_h(s - t)^2 dN_k(s)`.
    pub squared: Vec<f64>,
}

impl PairCounts {
    pub fn new(log: &EventLog, t: f64, h: f64, kernel: Kernel) -> Self {
        let m = log.n_pairs();
        let mut first = vec![0.0; m];
        let mut squared = vec![0.0; m];
        for k in 0..m {
            let times = log.pair_times_by_index(k);
            if !times.is_empty() {
                first[k] = weighted_sum(times, t, h, kernel, false);
                squared[k] = weighted_sum(times, t, h, kernel, true);
            }
        }
        Self { first, squared }
    }
}

/// The `Ω̂(t)` pieces needed for `Ŝ Ω̂ Ŝ`: its diagonal, `Ω̂ s` and `s^T Ω̂ s`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OmegaSummary {
    pub diag: Vec<f64>,
    pub omega_s: Vec<f64>,
    pub s_omega_s: f64,
}

/// `ω̂_ii = (h1/n) Σ_j ∫K²dN_ij`, `ω̂_{n+j,n+j} = (h1/n) Σ_i ∫K²dN_ij`, `ω̂_{i,n+j} = (h1/n) ∫K²dN_ij`.
pub fn omega_summary(s: &StructuredSMatrix, k2: &[f64], h1: f64) -> OmegaSummary {
    let n = s.n;
    let scale = h1 / n as f64;
    let m = 2 * n - 1;
    let mut diag = vec![0.0; m];
    let mut cross_row = vec![0.0; m];
    for i in (0..n).filter(|&i| s.active[i]) {
        for r in 0..n - 1 {
            let j = if r < i { r } else { r + 1 };
            let w = scale * k2[i * (n - 1) + r];
            if j == n - 1 {
                diag[i] += w;
            } else if s.active[n + j] {
                diag[i] += w;
                diag[n + j] += w;
                cross_row[i] += w;
                cross_row[n + j] += w;
            }
        }
    }
    // (Ω s)_k = s_k ω_kk + Σ_l ω_kl s_l, and cross entries always join opposite blocks
    let omega_s: Vec<f64> = (0..m).map(|k| s.sign(k) * (diag[k] - cross_row[k])).collect();
    let s_omega_s = (0..m).map(|k| s.sign(k) * omega_s[k]).sum();
    OmegaSummary { diag, omega_s, s_omega_s }
}

/// Dense `Ω̂(t)` (for checks and small networks).
pub fn omega_dense(n: usize, active: &[bool], k2: &[f64], h1: f64) -> DMatrix<f64> {
    let scale = h1 / n as f64;
    let mut o = DMatrix::zeros(2 * n - 1, 2 * n - 1);
    for i in (0..n).filter(|&i| active[i]) {
        for r in 0..n - 1 {
            let j = if r < i { r } else { r + 1 };
            let w = scale * k2[i * (n - 1) + r];
            if j == n - 1 {
                o[(i, i)] += w;
            } else if active[n + j] {
                o[(i, i)] += w;
                o[(n + j, n + j)] += w;
                o[(i, n + j)] += w;
                o[(n + j, i)] += w;
            }
        }
    }
    o
}

/// Diagonal of `Ŝ Ω̂ Ŝ`: `a_k² ω_kk + 2 c a_k s_k (Ω̂s)_k + c² s^TΩ̂s`; NaN when undefined.
pub fn sandwich_diagonal(s: &StructuredSMatrix, omega: &OmegaSummary) -> Vec<f64> {
    let c = s.c();
    (0..s.dim())
        .map(|k| {
            if !s.active[k] {
                return f64::NAN;
            }
            let a = s.inv_diag(k);
            (a * a * omega.diag[k] + 2.0 * c * a * s.sign(k) * omega.omega_s[k] + c * c * omega.s_omega_s).max(0.0)
        })
        .collect()
}

/// `σ̂_kk(t)` for every coordinate of `η`.
pub fn eta_variance(s: &StructuredSMatrix, log: &EventLog, t: f64, h1: f64, kernel: Kernel) -> Vec<f64> {
    let counts = PairCounts::new(log, t, h1, kernel);
    sandwich_diagonal(s, &omega_summary(s, &counts.squared, h1))
}

/// `e_{k,l}^T Ŝ Ω̂ Ŝ e_{k,l}` for two coordinates of the same block: `a_k² ω_kk + a_l² ω_ll`.
#[inline]
pub fn within_block_zeta(s: &StructuredSMatrix, omega: &OmegaSummary, k: usize, l: usize) -> f64 {
    let (a, b) = (s.inv_diag(k), s.inv_diag(l));
    a * a * omega.diag[k] + b * b * omega.diag[l]
}

/// Bias-corrected homophily estimate and its sandwich covariance at one time point.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaInference {
    pub gamma_hat: Vec<f64>,
    /// `γ̃ = γ̂ - Ĥ_Q^{-1} b̂`.
    pub gamma_tilde: Vec<f64>,
    /// `Ĥ_Q^{-1} b̂`.
    pub bias: Vec<f64>,
    pub b: Vec<f64>,
    pub hq: DMatrix<f64>,
    pub hq_inv: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    /// `U V̂^{-1}` (or `U Ŝ`), `p × (2n-1)`, used to project covariates onto the node effects.
    pub u_s: DMatrix<f64>,
}

impl GammaInference {
    /// `Z_ij(t) - (UŜ ι_ij) / (n - 1)`; column `n + j` is skipped for the anchor receiver.
    pub fn residual(&self, n: usize, i: usize, j: usize, z: &[f64]) -> Vec<f64> {
        let nm1 = (n - 1) as f64;
        (0..z.len())
            .map(|c| {
                let mut proj = self.u_s[(c, i)];
                if j < n - 1 {
                    proj += self.u_s[(c, n + j)];
                }
                z[c] - proj / nm1
            })
            .collect()
    }
}

/// How covariates are projected onto the node effects in `Ĥ_Q` and `Σ̂`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    /// `U V̂^{-1}` by a Schur-complement solve on the receiver block.
    #[default]
    Exact,
    /// `U Ŝ` with the structured approximate inverse.
    Structured,
}

impl std::str::FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "structured" => Ok(Self::Structured),
            other => Err(Error::Invalid(format!("unknown projection `{other}` (exact|structured)"))),
        }
    }
}

/// `U V̂^{-1}` (`p × (2n-1)`, with `V̂` scaled by `1/(n-1)`), zero on undefined coordinates.
///
/// The sender block of `V̂` is diagonal, so eliminating it leaves an `(n-1)`-square
/// positive definite system on the receivers.
fn exact_projection(u: &DMatrix<f64>, lam: &[f64], active: &[bool], n: usize, t: f64) -> Result<DMatrix<f64>> {
    let p = u.nrows();
    let m = 2 * n - 1;
    let nm1 = (n - 1) as f64;
    let mut d_a = vec![0.0; n];
    let mut d_b = vec![0.0; n - 1];
    let pair = |i: usize, j: usize| if active[i] && active_receiver(active, n, j) { lam[i * (n - 1) + if j < i { j } else { j - 1 }] } else { 0.0 };
    let mut b = DMatrix::zeros(n, n - 1);
    for i in 0..n {
        for j in 0..n {
            if j == i {
                continue;
            }
            let l = pair(i, j);
            d_a[i] += l;
            if j < n - 1 {
                d_b[j] += l;
                b[(i, j)] = l;
            }
        }
    }
    let inv_a: Vec<f64> = d_a.iter().map(|&d| if d > 0.0 { 1.0 / d } else { 0.0 }).collect();
    let recv: Vec<usize> = (0..n - 1).filter(|&j| d_b[j] > 0.0).collect();
    let r = recv.len();
    // Schur complement D_b - B^T D_a^{-1} B on the defined receivers
    let mut schur = DMatrix::zeros(r, r);
    for (x, &j) in recv.iter().enumerate() {
        schur[(x, x)] = d_b[j];
        for (y, &k) in recv.iter().enumerate() {
            let mut acc = 0.0;
            for i in 0..n {
                acc += b[(i, j)] * b[(i, k)] * inv_a[i];
            }
            schur[(x, y)] -= acc;
        }
    }
    let chol = schur.cholesky().ok_or(Error::HqNotInvertible { t })?;
    let mut out = DMatrix::zeros(p, m);
    for a in 0..p {
        let ra: Vec<f64> = (0..n).map(|i| u[(a, i)]).collect();
        let rhs = DVector::from_fn(r, |x, _| {
            let j = recv[x];
            u[(a, n + j)] - (0..n).map(|i| b[(i, j)] * inv_a[i] * ra[i]).sum::<f64>()
        });
        let y = chol.solve(&rhs);
        for (x, &j) in recv.iter().enumerate() {
            out[(a, n + j)] = nm1 * y[x];
        }
        for i in 0..n {
            let by: f64 = recv.iter().enumerate().map(|(x, &j)| b[(i, j)] * y[x]).sum();
            out[(a, i)] = nm1 * inv_a[i] * (ra[i] - by);
        }
    }
    Ok(out)
}

fn active_receiver(active: &[bool], n: usize, j: usize) -> bool {
    j == n - 1 || active[n + j]
}

/// `b̂`, `Ĥ_Q`, `Σ̂`, `Ψ̂` and `γ̃` at `t`.
///
/// `k2_h1` and `k2_h2` are the per-pair `∫K²dN` at the two bandwidths.
pub fn gamma_inference(
    theta: &Theta,
    s: &StructuredSMatrix,
    cov: &CovariateSet,
    t: f64,
    h1: f64,
    h2: f64,
    k2_h1: &[f64],
    k2_h2: &[f64],
    projection: Projection,
) -> Result<GammaInference> {
    let (n, p) = (theta.n(), theta.p());
    let m = 2 * n - 1;
    let lam = pair_rates(theta, cov, t);
    let active_pair = |i: usize, j: usize| theta.alpha_defined[i] && theta.beta_full_defined(j);
    let big_n = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && active_pair(i, j)).count())
        .sum::<usize>()
        .max(1) as f64;

    let mut u: DMatrix<f64> = DMatrix::zeros(p, m);
    let mut zz: DMatrix<f64> = DMatrix::zeros(p, p);
    let mut row_zk = DMatrix::zeros(p, n);
    let mut col_zk = DMatrix::zeros(p, n);
    let mut row_lam = vec![0.0; n];
    let mut col_lam = vec![0.0; n];
    for i in 0..n {
        for r in 0..n - 1 {
            let j = if r < i { r } else { r + 1 };
            if !active_pair(i, j) {
                continue;
            }
            let k = i * (n - 1) + r;
            let z = cov.evaluate_pair(k, t);
            let l = lam[k];
            row_lam[i] += l;
            col_lam[j] += l;
            for a in 0..p {
                let zl = z[a] * l;
                u[(a, i)] += zl;
                if j < n - 1 {
                    u[(a, n + j)] += zl;
                }
                row_zk[(a, i)] += z[a] * k2_h1[k];
                col_zk[(a, j)] += z[a] * k2_h1[k];
                for b in 0..p {
                    zz[(a, b)] += zl * z[b];
                }
            }
        }
    }
    let u_s = match projection {
        Projection::Exact => exact_projection(&u, &lam, &s.active, n, t)?,
        Projection::Structured => {
            // U Ŝ = U A + c (U s) s^T
            let us: DVector<f64> = DVector::from_fn(p, |a, _| (0..m).map(|k| u[(a, k)] * s.sign(k)).sum());
            let c = s.c();
            DMatrix::from_fn(p, m, |a, k| u[(a, k)] * s.inv_diag(k) + c * us[a] * s.sign(k))
        }
    };
    let nf = n as f64;
    let hq: DMatrix<f64> = &zz / big_n - (&u_s * u.transpose()) * (nf / (big_n * big_n));
    let hq = (&hq + hq.transpose()) * 0.5;

    let mut b = DVector::zeros(p);
    for i in 0..n {
        if row_lam[i] > 0.0 {
            b += row_zk.column(i) / row_lam[i];
        }
        if col_lam[i] > 0.0 {
            b += col_zk.column(i) / col_lam[i];
        }
    }
    b *= h1 / (2.0 * big_n);

    let hq_inv = hq.clone().try_inverse().filter(|inv| inv.iter().all(|v| v.is_finite())).ok_or(Error::HqNotInvertible { t })?;
    if hq.clone().cholesky().is_none() {
        return Err(Error::HqNotInvertible { t });
    }

    let mut gi = GammaInference {
        gamma_hat: theta.gamma.clone(),
        gamma_tilde: Vec::new(),
        bias: Vec::new(),
        b: b.iter().copied().collect(),
        hq,
        hq_inv,
        sigma: DMatrix::zeros(p, p),
        psi: DMatrix::zeros(p, p),
        u_s,
    };
    let mut sigma = DMatrix::zeros(p, p);
    for i in 0..n {
        for r in 0..n - 1 {
            let j = if r < i { r } else { r + 1 };
            let k = i * (n - 1) + r;
            if !active_pair(i, j) || k2_h2[k] == 0.0 {
                continue;
            }
            let res = DVector::from_vec(gi.residual(n, i, j, cov.evaluate_pair(k, t)));
            sigma += &res * res.transpose() * k2_h2[k];
        }
    }
    sigma *= h2 / big_n;
    let psi = &gi.hq_inv * &sigma * &gi.hq_inv;
    let psi = (&psi + psi.transpose()) * 0.5;
    let bias = &gi.hq_inv * &b;
    gi.gamma_tilde = theta.gamma.iter().zip(bias.iter()).map(|(g, d)| g - d).collect();
    gi.bias = bias.iter().copied().collect();
    gi.sigma = sigma;
    gi.psi = psi;
    Ok(gi)
}

/// Everything inference needs at one grid time.
#[derive(Debug, Clone)]
pub struct PointInference {
    pub t: f64,
    pub s: StructuredSMatrix,
    pub omega: OmegaSummary,
    /// `σ̂_kk(t)`, NaN on undefined coordinates.
    pub sigma_eta: Vec<f64>,
    pub gamma: Option<GammaInference>,
    pub n_active_pairs: usize,
}

/// Inference for a whole fit. Points whose fit failed or whose matrices degenerate hold the error text.
#[derive(Debug, Clone)]
pub struct VarianceBundle {
    pub n: usize,
    pub p: usize,
    pub kernel: KernelConfig,
    pub points: Vec<std::result::Result<PointInference, String>>,
}

impl VarianceBundle {
    pub fn at(&self, g: usize) -> Option<&PointInference> {
        self.points[g].as_ref().ok()
    }
}

/// Inference at one fitted time point.
pub fn infer_at_time(
    log: &EventLog,
    cov: &CovariateSet,
    theta: &Theta,
    t: f64,
    kernel: &KernelConfig,
    projection: Projection,
) -> Result<PointInference> {
    if !theta.alpha_defined.iter().any(|&d| d) {
        return Err(Error::UndefinedFit { t });
    }
    let s = s_matrix(theta, cov, t)?;
    let c1 = PairCounts::new(log, t, kernel.h1, kernel.kernel);
    let omega = omega_summary(&s, &c1.squared, kernel.h1);
    let sigma_eta = sandwich_diagonal(&s, &omega);
    let gamma = if theta.p() > 0 && theta.gamma_defined {
        let c2 = PairCounts::new(log, t, kernel.h2, kernel.kernel);
        Some(gamma_inference(theta, &s, cov, t, kernel.h1, kernel.h2, &c1.squared, &c2.squared, projection)?)
    } else {
        None
    };
    let n = theta.n();
    let n_active_pairs = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && theta.alpha_defined[i] && theta.beta_full_defined(j)).count())
        .sum();
    Ok(PointInference { t, s, omega, sigma_eta, gamma, n_active_pairs })
}

/// Inference at every grid point of a fit, with the exact covariate projection.
pub fn variance_bundle(log: &EventLog, cov: &CovariateSet, fit: &FitResult, kernel: &KernelConfig) -> VarianceBundle {
    variance_bundle_with(log, cov, fit, kernel, Projection::Exact)
}

pub fn variance_bundle_with(
    log: &EventLog,
    cov: &CovariateSet,
    fit: &FitResult,
    kernel: &KernelConfig,
    projection: Projection,
) -> VarianceBundle {
    let points = fit
        .curves
        .grid
        .iter()
        .zip(&fit.curves.points)
        .zip(&fit.diagnostics)
        .map(|((&t, theta), diag)| match &diag.error {
            Some(e) => Err(e.clone()),
            None => infer_at_time(log, cov, theta, t, kernel, projection).map_err(|e| e.to_string()),
        })
        .collect();
    VarianceBundle { n: log.n_nodes(), p: cov.p(), kernel: *kernel, points }
}

/// Two-sided standard normal quantile `z_{(1-level)/2}` for a confidence level in (0, 1).
pub fn normal_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Invalid(format!("confidence level must lie in (0, 1), got {level}")));
    }
    Ok(Normal::standard().inverse_cdf(0.5 + level / 2.0))
}

/// One row of the confidence-interval table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CiRow {
    pub t: f64,
    pub coordinate: String,
    pub estimate: f64,
    /// Bias-corrected estimate (homophily coefficients only).
    pub corrected: Option<f64>,
    pub lower: f64,
    pub upper: f64,
    /// Estimated variance of the (corrected) estimator.
    pub variance: f64,
}

/// Interval for `η_k`: `η̂_k ± (n h1)^{-1/2} z σ̂_kk^{1/2}`.
pub fn eta_interval(estimate: f64, sigma: f64, n: usize, h1: f64, z: f64) -> (f64, f64) {
    let half = z * (sigma / (n as f64 * h1)).sqrt();
    (estimate - half, estimate + half)
}

/// Interval for `γ_c`: `γ̃_c ± (N h2)^{-1/2} z ψ̂_cc^{1/2}`.
pub fn gamma_interval(corrected: f64, psi: f64, n_pairs: usize, h2: f64, z: f64) -> (f64, f64) {
    let half = z * (psi / (n_pairs as f64 * h2)).sqrt();
    (corrected - half, corrected + half)
}

/// Pointwise intervals for every coordinate at every grid point; undefined coordinates give NaN rows.
pub fn confidence_intervals(fit: &FitResult, bundle: &VarianceBundle, level: f64) -> Result<Vec<CiRow>> {
    let z = normal_quantile(level)?;
    let (n, p) = (bundle.n, bundle.p);
    let (h1, h2) = (bundle.kernel.h1, bundle.kernel.h2);
    let mut rows = Vec::new();
    for (g, (&t, theta)) in fit.curves.grid.iter().zip(&fit.curves.points).enumerate() {
        let point = bundle.at(g);
        for k in 0..2 * n - 1 {
            let name = if k < n { format!("alpha_{}", k + 1) } else { format!("beta_{}", k - n + 1) };
            let est = theta.eta(k);
            let sigma = point.map_or(f64::NAN, |pi| pi.sigma_eta[k]);
            let (lower, upper) =
                if est.is_finite() && sigma.is_finite() { eta_interval(est, sigma, n, h1, z) } else { (f64::NAN, f64::NAN) };
            let variance = sigma / (n as f64 * h1);
            rows.push(CiRow { t, coordinate: name, estimate: est, corrected: None, lower, upper, variance });
        }
        for c in 0..p {
            let gi = point.and_then(|pi| pi.gamma.as_ref().map(|gi| (gi, pi.n_active_pairs)));
            let (corr, lower, upper, variance) = match gi {
                Some((gi, np)) => {
                    let (lo, hi) = gamma_interval(gi.gamma_tilde[c], gi.psi[(c, c)], np, h2, z);
                    (gi.gamma_tilde[c], lo, hi, gi.psi[(c, c)] / (np as f64 * h2))
                }
                None => (f64::NAN, f64::NAN, f64::NAN, f64::NAN),
            };
            rows.push(CiRow {
                t,
                coordinate: format!("gamma_{}", c + 1),
                estimate: theta.gamma[c],
                corrected: Some(corr),
                lower,
                upper,
                variance,
            });
        }
    }
    Ok(rows)
}

/// Write CI rows as CSV: `t,coordinate,estimate,corrected,lower,upper,variance`.
pub fn write_ci_csv<W: Write>(rows: &[CiRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t", "coordinate", "estimate", "corrected", "lower", "upper", "variance"])?;
    for r in rows {
        w.write_record([
            format!("{}", r.t),
            r.coordinate.clone(),
            format!("{}", r.estimate),
            r.corrected.map_or(String::new(), |v| format!("{v}")),
            format!("{}", r.lower),
            format!("{}", r.upper),
            format!("{}", r.variance),
        ])?;
    }
    w.flush()?;
    Ok(())
}
