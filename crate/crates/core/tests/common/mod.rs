#![allow(dead_code)]

use dyncox::simulator::{simulate, Curve, TruthBundle};
use dyncox::types::{CovariateSet, EventLog};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Gaussian `K_h(u)` written out independently of the crate.
pub fn gauss_kh(u: f64, h: f64) -> f64 {
    (-(u / h).powi(2) / 2.0).exp() / ((2.0 * std::f64::consts::PI).sqrt() * h)
}

/// Composite Simpson rule with `m` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, m: usize) -> f64 {
    let h = (b - a) / m as f64;
    let mut s = f(a) + f(b);
    for k in 1..m {
        s += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// A small network with constant curves, constant covariates and its simulated events.
pub struct Instance {
    pub truth: TruthBundle,
    pub log: EventLog,
}

/// Random constant-parameter instance with `n` nodes and `p` covariates.
pub fn random_instance(n: usize, p: usize, level: f64, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |s: f64| s * rng.sample::<f64, _>(StandardNormal);
    let alpha: Vec<Curve> = (0..n).map(|_| Curve::constant(level + normal(0.3))).collect();
    let beta: Vec<Curve> = (0..n - 1).map(|_| Curve::constant(normal(0.3))).collect();
    let gamma: Vec<Curve> = (0..p).map(|_| Curve::constant(normal(0.4))).collect();
    let z: Vec<f64> = (0..n * (n - 1) * p).map(|_| normal(1.0)).collect();
    let cov = CovariateSet::constant(n, 1.0, p, z).unwrap();
    let truth = TruthBundle::new(alpha, beta, gamma, cov, seed).unwrap();
    let log = simulate(&truth).unwrap();
    Instance { truth, log }
}
