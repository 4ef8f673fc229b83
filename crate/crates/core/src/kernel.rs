//! Smoothing kernels and the kernel-weighted integrals behind every estimating equation.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::types::{CovariateSet, EventLog};

/// Largest exponent accepted in `exp{offset + Z^T gamma}`.
pub const OVERFLOW_GUARD: f64 = 700.0;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Beyond this many bandwidths the Gaussian weight underflows to zero.
const GAUSSIAN_CUTOFF: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    #[default]
    Gaussian,
    Epanechnikov,
}

impl std::str::FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" => Ok(Kernel::Gaussian),
            "epanechnikov" => Ok(Kernel::Epanechnikov),
            other => Err(Error::Invalid(format!("unknown kernel `{other}` (gaussian|epanechnikov)"))),
        }
    }
}

/// Standard normal distribution function, accurate in both tails.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

impl Kernel {
    /// `K(x)`.
    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Kernel::Gaussian => INV_SQRT_2PI * (-0.5 * x * x).exp(),
            Kernel::Epanechnikov => {
                if x.abs() <= 1.0 {
                    0.75 * (1.0 - x * x)
                } else {
                    0.0
                }
            }
        }
    }

    /// `mu0 = ∫ K(u)^2 du`.
    pub fn mu0(self) -> f64 {
        match self {
            Kernel::Gaussian => 0.5 / std::f64::consts::PI.sqrt(),
            Kernel::Epanechnikov => 0.6,
        }
    }

    /// Half-width of the support in units of `h` (effective for the Gaussian).
    pub fn support_radius(self) -> f64 {
        match self {
            Kernel::Gaussian => GAUSSIAN_CUTOFF,
            Kernel::Epanechnikov => 1.0,
        }
    }

    /// `∫_{-∞}^x K(u) du`.
    #[inline]
    pub fn cdf(self, x: f64) -> f64 {
        match self {
            Kernel::Gaussian => norm_cdf(x),
            Kernel::Epanechnikov => {
                if x <= -1.0 {
                    0.0
                } else if x >= 1.0 {
                    1.0
                } else {
                    0.5 + 0.75 * (x - x * x * x / 3.0)
                }
            }
        }
    }

    /// `∫_a^b K(u) du`, computed from the nearer tail to keep relative accuracy.
    #[inline]
    pub fn mass(self, a: f64, b: f64) -> f64 {
        if a >= 0.0 {
            // upper tail: 1 - F(a) - (1 - F(b))
            self.cdf(-a) - self.cdf(-b)
        } else {
            self.cdf(b) - self.cdf(a)
        }
    }

    /// `K_h(u) = K(u / h) / h`.
    #[inline]
    pub fn weight(self, u: f64, h: f64) -> f64 {
        self.eval(u / h) / h
    }
}

/// `K_h(u)`; see [`Kernel::weight`].
pub fn kernel_weight(u: f64, h: f64, kernel: Kernel) -> f64 {
    kernel.weight(u, h)
}

/// Kernel-weighted sum over sorted event times: `Σ_e K_h(t_e - t)` or, when `squared`, `Σ_e K_h(t_e - t)^2`.
pub fn weighted_sum(times: &[f64], t: f64, h: f64, kernel: Kernel, squared: bool) -> f64 {
    let r = kernel.support_radius() * h;
    let lo = times.partition_point(|&s| s < t - r);
    let hi = times.partition_point(|&s| s <= t + r);
    times[lo..hi]
        .iter()
        .map(|&s| {
            let w = kernel.weight(s - t, h);
            if squared {
                w * w
            } else {
                w
            }
        })
        .sum()
}

/// `∫ K_h(s - t) dN_ij(s)` (or with `K_h^2`).
pub fn weighted_count(log: &EventLog, i: usize, j: usize, t: f64, h: f64, kernel: Kernel, squared: bool) -> f64 {
    weighted_sum(log.pair_times(i, j), t, h, kernel, squared)
}

/// Which moment of the covariate the exposure integral carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Moment {
    Plain,
    Z,
    ZZ,
}

/// Kernel mass `∫_{lo}^{hi} K_h(s - t) ds` of each covariate segment of pair `k`.
pub fn segment_masses<'a>(
    cov: &'a CovariateSet,
    k: usize,
    t: f64,
    h: f64,
    kernel: Kernel,
) -> impl Iterator<Item = (usize, f64)> + 'a {
    cov.segments(k).map(move |s| {
        let (lo, hi) = cov.segment_interval(s);
        (s, kernel.mass((lo - t) / h, (hi - t) / h))
    })
}

/// `∫_0^τ K_h(s - t) m(Z_ij(s)) exp{offset + Z_ij(s)^T γ} ds` with `m = 1`, `Z` or `Z Z^T`.
///
/// Returns a vector of length 1, `p` or `p * p` (row-major) respectively.
#[allow(clippy::too_many_arguments)]
pub fn weighted_exposure(
    cov: &CovariateSet,
    i: usize,
    j: usize,
    t: f64,
    h: f64,
    kernel: Kernel,
    offset: f64,
    gamma: &[f64],
    moment: Moment,
) -> Result<Vec<f64>> {
    let p = cov.p();
    if gamma.len() != p {
        return Err(Error::Invalid(format!("gamma has length {}, covariates have p={p}", gamma.len())));
    }
    let k = crate::types::pair_index(cov.n_nodes(), i, j);
    let mut out = vec![
        0.0;
        match moment {
            Moment::Plain => 1,
            Moment::Z => p,
            Moment::ZZ => p * p,
        }
    ];
    for (s, mass) in segment_masses(cov, k, t, h, kernel) {
        let z = cov.segment_value(s);
        let expo = offset + z.iter().zip(gamma).map(|(a, b)| a * b).sum::<f64>();
        if expo > OVERFLOW_GUARD {
            return Err(Error::IntensityOverflow { exponent: expo });
        }
        let w = mass * expo.exp();
        match moment {
            Moment::Plain => out[0] += w,
            Moment::Z => out.iter_mut().zip(z).for_each(|(o, zk)| *o += w * zk),
            Moment::ZZ => {
                for a in 0..p {
                    for b in 0..p {
                        out[a * p + b] += w * z[a] * z[b];
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{CovariatePath, Event};
    use approx::assert_relative_eq;

    #[test]
    fn weights_match_direct_formula() {
        assert_relative_eq!(kernel_weight(0.0, 0.1, Kernel::Gaussian), 3.989423, epsilon = 1e-6);
        assert_eq!(kernel_weight(0.2, 0.1, Kernel::Epanechnikov), 0.0);
        assert_relative_eq!(kernel_weight(0.05, 0.1, Kernel::Epanechnikov), 5.625, epsilon = 1e-12);
    }

    #[test]
    fn mu0_constants() {
        assert_relative_eq!(Kernel::Gaussian.mu0(), 0.2820948, epsilon = 1e-7);
        assert_eq!(Kernel::Epanechnikov.mu0(), 0.6);
    }

    #[test]
    fn counts_at_the_kernel_center_and_shoulders() {
        let log = EventLog::new(2, 1.0, vec![]).unwrap();
        assert_eq!(weighted_count(&log, 0, 1, 0.5, 0.1, Kernel::Gaussian, false), 0.0);
        let log = EventLog::new(2, 1.0, vec![Event { sender: 0, receiver: 1, time: 0.5 }]).unwrap();
        assert_relative_eq!(weighted_count(&log, 0, 1, 0.5, 0.1, Kernel::Gaussian, false), 3.989423, epsilon = 1e-6);
        for h in [0.05, 0.1, 0.2] {
            let events = vec![
                Event { sender: 0, receiver: 1, time: 0.5 - h },
                Event { sender: 0, receiver: 1, time: 0.5 + h },
            ];
            let log = EventLog::new(2, 1.0, events).unwrap();
            let got = weighted_count(&log, 0, 1, 0.5, h, Kernel::Gaussian, false);
            assert_relative_eq!(got, 2.0 * 0.2419707 / h, max_relative = 1e-6);
        }
    }

    #[test]
    fn tail_mass_keeps_relative_precision() {
        let far = Kernel::Gaussian.mass(9.0, 10.0);
        let reference = 0.5 * erfc(9.0 / std::f64::consts::SQRT_2) - 0.5 * erfc(10.0 / std::f64::consts::SQRT_2);
        assert_relative_eq!(far, reference, max_relative = 1e-12);
        assert!(far > 0.0);
    }

    #[test]
    fn exposure_two_segments() {
        let paths = vec![
            CovariatePath { breaks: vec![0.0, 0.5, 1.0], values: vec![vec![0.0], vec![1.0]] },
            CovariatePath { breaks: vec![0.0, 1.0], values: vec![vec![0.0]] },
        ];
        let cov = CovariateSet::from_paths(2, 1.0, 1, paths).unwrap();
        let got = weighted_exposure(&cov, 0, 1, 0.5, 0.1, Kernel::Gaussian, 0.0, &[1.0], Moment::Plain).unwrap();
        let expect = (0.5 - norm_cdf(-5.0)) + 1f64.exp() * (norm_cdf(5.0) - 0.5);
        assert_relative_eq!(got[0], expect, max_relative = 1e-14);
        assert_relative_eq!(got[0], 0.5 + 1.3591, epsilon = 1e-4);
    }

    #[test]
    fn exposure_scales_with_offset() {
        let cov = CovariateSet::none(2, 1.0);
        let one = weighted_exposure(&cov, 0, 1, 0.5, 0.05, Kernel::Gaussian, 0.0, &[], Moment::Plain).unwrap()[0];
        let two = weighted_exposure(&cov, 0, 1, 0.5, 0.05, Kernel::Gaussian, 2f64.ln(), &[], Moment::Plain).unwrap()[0];
        assert_relative_eq!(one, 1.0, epsilon = 1e-12);
        assert_relative_eq!(two, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn exposure_overflow_guard() {
        let cov = CovariateSet::none(2, 1.0);
        let err = weighted_exposure(&cov, 0, 1, 0.5, 0.05, Kernel::Gaussian, 701.0, &[], Moment::Plain).unwrap_err();
        assert!(err.to_string().starts_with("intensity overflow"));
    }

    #[test]
    fn epanechnikov_cdf_endpoints() {
        let k = Kernel::Epanechnikov;
        assert_eq!(k.cdf(-1.0), 0.0);
        assert_eq!(k.cdf(1.0), 1.0);
        assert_relative_eq!(k.cdf(0.0), 0.5);
        assert_relative_eq!(k.mass(-1.0, 1.0), 1.0);
    }
}
