//! Numerical properties of the kernel, simulator, solver and variance estimates.

mod common;

use common::{random_instance, simpson};
use dyncox::estimator::{fit_at_time, fit_grid, stacked_jacobian, stacked_residual, FitConfig, LocalData, UpdateMode};
use dyncox::hypothesis::{run_test, TestKind, TestSpec};
use dyncox::inference::variance_bundle;
use dyncox::kernel::{weighted_exposure, Kernel, Moment};
use dyncox::simulator::{scenario, simulate, Curve, Knobs, ScenarioName, TruthBundle};
use dyncox::types::{linear_grid, pair_index, CovariatePath, CovariateSet, KernelConfig, Theta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
pub fn kernels_integrate_to_one() {
    for h in [0.01, 0.1, 0.5, 2.0] {
        let g = simpson(|u| Kernel::Gaussian.weight(u, h), -14.0 * h, 14.0 * h, 20_000);
        assert!((g - 1.0).abs() < 1e-10, "gaussian h={h}: {g}");
        let e = simpson(|u| Kernel::Epanechnikov.weight(u, h), -h, h, 2_000);
        assert!((e - 1.0).abs() < 1e-10, "epanechnikov h={h}: {e}");
        for k in [Kernel::Gaussian, Kernel::Epanechnikov] {
            assert!((k.mass(-40.0, 40.0) - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
pub fn exposure_matches_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let (n, p) = (3, 2);
        let paths: Vec<CovariatePath> = (0..n * (n - 1))
            .map(|_| {
                let cut = rng.random_range(0.2..0.8);
                CovariatePath {
                    breaks: vec![0.0, cut, 1.0],
                    values: (0..2).map(|_| (0..p).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
                }
            })
            .collect();
        let cov = CovariateSet::from_paths(n, 1.0, p, paths).unwrap();
        let t = rng.random_range(0.0..1.0);
        let h = rng.random_range(0.02..0.3);
        let offset = rng.random_range(-1.0..1.0);
        let gamma: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (i, j) = (1, 2);
        let k = pair_index(n, i, j);
        let path = cov.path(k);
        let mut expected = 0.0;
        for (s, z) in path.values.iter().enumerate() {
            let rate = (offset + z.iter().zip(&gamma).map(|(a, b)| a * b).sum::<f64>()).exp();
            expected += simpson(|x| Kernel::Gaussian.weight(x - t, h) * rate, path.breaks[s], path.breaks[s + 1], 40_000);
        }
        let got = weighted_exposure(&cov, i, j, t, h, Kernel::Gaussian, offset, &gamma, Moment::Plain).unwrap()[0];
        assert!((got - expected).abs() <= 1e-8 * expected, "{got} vs {expected}");
    }
}

#[test]
pub fn jacobian_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let kernel = KernelConfig::new(Kernel::Gaussian, 0.2, 0.25).unwrap();
    for n in 3..=5 {
        for rep in 0..4u64 {
            let p = 1 + rep as usize % 2;
            let inst = random_instance(n, p, 1.5, 500 + 10 * n as u64 + rep);
            let data = LocalData::new(&inst.log, &inst.truth.covariates, 0.5, &kernel, 1e-8).unwrap();
            let mut theta = inst.truth.theta(0.5);
            theta.alpha.iter_mut().chain(theta.beta.iter_mut()).chain(theta.gamma.iter_mut()).for_each(|x| *x += rng.random_range(-0.3..0.3));
            let jac = stacked_jacobian(&data, &theta).unwrap();
            let m = jac.nrows();
            let scale = jac.abs().max();
            let step = 1e-5;
            for c in 0..m {
                let shifted = |d: f64| {
                    let mut th = theta.clone();
                    *coordinate(&mut th, c) += d;
                    stacked_residual(&data, &th).unwrap()
                };
                let (hi, lo) = (shifted(step), shifted(-step));
                for r in 0..m {
                    let fd = (hi[r] - lo[r]) / (2.0 * step);
                    let a = jac[(r, c)];
                    assert!((a - fd).abs() <= 1e-5 * fd.abs().max(1e-4 * scale), "n={n} ({r},{c}): {a} vs {fd}");
                }
            }
        }
    }
}

fn coordinate(theta: &mut Theta, c: usize) -> &mut f64 {
    let n = theta.n();
    if c < n {
        &mut theta.alpha[c]
    } else if c < 2 * n - 1 {
        &mut theta.beta[c - n]
    } else {
        &mut theta.gamma[c + 1 - 2 * n]
    }
}

#[test]
pub fn homophily_covariances_are_psd_on_the_grid() {
    let truth = scenario(ScenarioName::Main, 60, 3, Knobs::default()).unwrap();
    let log = simulate(&truth).unwrap();
    let config = FitConfig::new(linear_grid(0.05, 0.95, 0.05), KernelConfig::rule_of_thumb(60));
    let fit = fit_grid(&log, &truth.covariates, &config).unwrap();
    let bundle = variance_bundle(&log, &truth.covariates, &fit, &config.kernel);
    let mut checked = 0;
    for g in 0..config.grid.len() {
        let Some(gi) = bundle.at(g).and_then(|pi| pi.gamma.as_ref()) else { continue };
        for m in [&gi.psi, &gi.sigma] {
            assert!(m.clone().symmetric_eigenvalues().min() >= -1e-10, "t={}: {m}", config.grid[g]);
            assert!((m - m.transpose()).abs().max() < 1e-12);
        }
        checked += 1;
    }
    assert!(checked >= 15, "only {checked} grid points had homophily inference");
}

/// Every `α_i` up by `c`, every `β_j` (anchor included) down by `c`.
fn shifted(truth: &TruthBundle, c: f64) -> TruthBundle {
    let mut out = truth.clone();
    out.alpha.iter_mut().for_each(|a| a.level += c);
    out.beta.iter_mut().for_each(|b| b.level -= c);
    out
}

fn eta_and_gamma(theta: &Theta) -> Vec<f64> {
    let n = theta.n();
    let mut v: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| theta.alpha[i] + theta.beta_full(j))
        .collect();
    v.extend(&theta.gamma);
    v
}

#[test]
pub fn node_effect_shift_leaves_fitted_rates_unchanged() {
    let n = 30;
    let truth = scenario(ScenarioName::Main, n, 17, Knobs::default()).unwrap();
    let moved = shifted(&truth, 0.7);
    for (i, j) in [(0, 1), (4, n - 1), (n - 1, 2)] {
        assert!((truth.log_intensity(i, j, 0.3) - moved.log_intensity(i, j, 0.3)).abs() < 1e-12);
    }
    let log = simulate(&truth).unwrap();
    let log_moved = simulate(&moved).unwrap();
    // identical draws; only the last bits of the envelope rate may differ
    assert_eq!(log.len(), log_moved.len());
    for (a, b) in log.events().iter().zip(log_moved.events()) {
        assert_eq!((a.sender, a.receiver), (b.sender, b.receiver));
        assert!((a.time - b.time).abs() < 1e-12);
    }

    let mut config = FitConfig::new(vec![0.5], KernelConfig::rule_of_thumb(n));
    config.tol = 1e-10;
    config.max_iter = 20_000;
    let (base, _) = fit_at_time(&log, &truth.covariates, 0.5, &config, None).unwrap();
    let (other, _) = fit_at_time(&log_moved, &moved.covariates, 0.5, &config, None).unwrap();
    // a start with the node effects moved in opposite directions reaches the same rates
    let mut start = base.clone();
    start.alpha.iter_mut().for_each(|a| *a += 0.7);
    start.beta.iter_mut().for_each(|b| *b -= 0.7);
    let (restarted, diag) = fit_at_time(&log, &truth.covariates, 0.5, &config, Some(&start)).unwrap();
    assert!(diag.converged);
    for fit in [&other, &restarted] {
        for (a, b) in eta_and_gamma(fit).iter().zip(eta_and_gamma(&base)) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
pub fn thinning_matches_integrated_intensity() {
    const REPS: u64 = 5000;
    let z_crit = 3.2905; // two-sided 0.001
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    for case in 0..20 {
        let n = 2;
        let curve = |rng: &mut ChaCha8Rng, level: f64| Curve {
            level,
            sin: rng.random_range(-1.0..1.0),
            cos: rng.random_range(-1.0..1.0),
            slope: rng.random_range(-1.0..1.0),
        };
        let levels: [f64; 2] = [rng.random_range(0.0..2.0), rng.random_range(0.0..2.0)];
        let alpha = vec![curve(&mut rng, levels[0]), curve(&mut rng, levels[1])];
        let beta = vec![curve(&mut rng, 0.0)];
        let gamma = vec![curve(&mut rng, 0.5)];
        let paths = (0..2)
            .map(|_| CovariatePath {
                breaks: vec![0.0, rng.random_range(0.1..0.9), 1.0],
                values: vec![vec![rng.random_range(-1.0..1.0)], vec![rng.random_range(-1.0..1.0)]],
            })
            .collect();
        let cov = CovariateSet::from_paths(n, 1.0, 1, paths).unwrap();
        let truth = TruthBundle::new(alpha, beta, gamma, cov, 0).unwrap();
        let mut mean = 0.0;
        for (i, j) in [(0, 1), (1, 0)] {
            let path = truth.covariates.path(pair_index(n, i, j));
            for s in 0..path.values.len() {
                mean += simpson(|t| truth.intensity(i, j, t), path.breaks[s], path.breaks[s + 1], 4000);
            }
        }
        let total: usize = (0..REPS)
            .map(|r| {
                let mut tr = truth.clone();
                tr.seed = 1_000_000 * case + r;
                simulate(&tr).unwrap().len()
            })
            .sum();
        let z = (total as f64 / REPS as f64 - mean) / (mean / REPS as f64).sqrt();
        assert!(z.abs() < z_crit, "case {case}: mean {mean}, z = {z}");
    }
}

#[test]
pub fn main_scenario_event_count_matches_quadrature() {
    let n = 100;
    let truth = scenario(ScenarioName::Main, n, 2024, Knobs::default()).unwrap();
    let mut mean = 0.0;
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            mean += simpson(|t| truth.intensity(i, j, t), 0.0, 1.0, 200);
        }
    }
    let count = simulate(&truth).unwrap().len() as f64;
    assert!((count - mean).abs() < 3.0 * mean.sqrt(), "{count} events, expected {mean}");
}

/// `−c0 log n` enters both `α_i` and `β_j`, so the expected count grows like `n^{2 - 2 c0}`.
#[test]
pub fn event_counts_follow_the_sparsity_exponent() {
    for c0 in [0.25, 0.5] {
        let points: Vec<(f64, f64)> = [50usize, 100, 200]
            .iter()
            .map(|&n| {
                let truth = scenario(ScenarioName::Main, n, 31, Knobs { c0, ..Knobs::default() }).unwrap();
                ((n as f64).ln(), (simulate(&truth).unwrap().len() as f64).ln())
            })
            .collect();
        let mx = points.iter().map(|p| p.0).sum::<f64>() / 3.0;
        let my = points.iter().map(|p| p.1).sum::<f64>() / 3.0;
        let slope = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
            / points.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        assert!((slope - (2.0 - 2.0 * c0)).abs() < 0.2, "c0={c0}: slope {slope}");
    }
}

#[test]
pub fn reruns_are_byte_identical() {
    let truth = scenario(ScenarioName::Main, 40, 8, Knobs::default()).unwrap();
    let csv = |log: &dyncox::types::EventLog| {
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        buf
    };
    let (a, b) = (simulate(&truth).unwrap(), simulate(&truth).unwrap());
    assert_eq!(csv(&a), csv(&b));

    let config = FitConfig::new(linear_grid(0.1, 0.9, 0.1), KernelConfig::rule_of_thumb(40));
    let curves = || {
        let fit = fit_grid(&a, &truth.covariates, &config).unwrap();
        let mut buf = Vec::new();
        fit.curves.write_csv(&mut buf).unwrap();
        (fit, buf)
    };
    let ((fit, c1), (_, c2)) = (curves(), curves());
    assert_eq!(c1, c2);

    let bundle = variance_bundle(&a, &truth.covariates, &fit, &config.kernel);
    let mut spec = TestSpec::new(TestKind::HetAlpha, 1.0, 4);
    spec.resamples = 200;
    let report = || serde_json::to_vec(&run_test(&a, &truth.covariates, &fit, &bundle, &spec).unwrap()).unwrap();
    assert_eq!(report(), report());
}

fn certify(diag: &dyncox::estimator::PointDiagnostics) {
    assert!(diag.converged, "{diag:?}");
    assert!(diag.f_residual_scaled <= 1e-4 && diag.q_residual_scaled <= 1e-4, "{diag:?}");
}

fn small_config(mode: UpdateMode) -> FitConfig {
    let mut config = FitConfig::new(vec![0.5], KernelConfig::new(Kernel::Gaussian, 0.2, 0.25).unwrap());
    config.tol = 1e-9;
    config.max_iter = 20_000;
    config.mode = mode;
    config
}

#[test]
pub fn update_orders_reach_the_same_fixed_point_without_covariates() {
    for (n, seed) in [(5, 1u64), (8, 2), (12, 3), (20, 4)] {
        let inst = random_instance(n, 0, 2.0 - 0.08 * n as f64, 700 + seed);
        let cov = &inst.truth.covariates;
        let (gs, d1) = fit_at_time(&inst.log, cov, 0.5, &small_config(UpdateMode::GaussSeidel), None).unwrap();
        let (lit, d2) = fit_at_time(&inst.log, cov, 0.5, &small_config(UpdateMode::Literal), None).unwrap();
        certify(&d1);
        certify(&d2);
        assert_eq!(gs.defined_mask(), lit.defined_mask());
        for (a, b) in eta_and_gamma(&gs).iter().zip(eta_and_gamma(&lit)).filter(|(a, _)| a.is_finite()) {
            assert!((a - b).abs() < 1e-6, "n={n}: {a} vs {b}");
        }
    }
}

/// With covariates the printed update order (every block from the previous sweep) can diverge;
/// it must then say so rather than report a solution.
#[test]
pub fn literal_order_never_certifies_a_wrong_answer() {
    for (n, seed) in [(5, 1u64), (8, 2), (12, 3), (20, 4)] {
        let inst = random_instance(n, 1, 2.0 - 0.08 * n as f64, 700 + seed);
        let cov = &inst.truth.covariates;
        let (gs, d1) = fit_at_time(&inst.log, cov, 0.5, &small_config(UpdateMode::GaussSeidel), None).unwrap();
        certify(&d1);
        if let Ok((lit, d2)) = fit_at_time(&inst.log, cov, 0.5, &small_config(UpdateMode::Literal), None) {
            if d2.converged {
                certify(&d2);
                for (a, b) in eta_and_gamma(&gs).iter().zip(eta_and_gamma(&lit)).filter(|(a, _)| a.is_finite()) {
                    assert!((a - b).abs() < 1e-5, "n={n}: {a} vs {b}");
                }
            }
        }
    }
}

#[test]
pub fn warm_start_does_not_change_the_solution() {
    let truth = scenario(ScenarioName::Main, 50, 12, Knobs::default()).unwrap();
    let log = simulate(&truth).unwrap();
    let mut config = FitConfig::new(linear_grid(0.1, 0.9, 0.1), KernelConfig::rule_of_thumb(50));
    config.tol = 1e-9;
    config.max_iter = 5_000;
    let warm = fit_grid(&log, &truth.covariates, &config).unwrap();
    config.warm_start = false;
    let cold = fit_grid(&log, &truth.covariates, &config).unwrap();
    for (g, (a, b)) in warm.curves.points.iter().zip(&cold.curves.points).enumerate() {
        if warm.diagnostics[g].error.is_some() {
            assert!(cold.diagnostics[g].error.is_some());
            continue;
        }
        certify(&warm.diagnostics[g]);
        certify(&cold.diagnostics[g]);
        let diff = eta_and_gamma(a)
            .iter()
            .zip(eta_and_gamma(b))
            .filter(|(x, _)| x.is_finite())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-6, "t={}: {diff}", config.grid[g]);
    }
    let total = |f: &dyncox::estimator::FitResult| f.diagnostics.iter().map(|d| d.iterations).sum::<usize>();
    assert!(total(&warm) < total(&cold), "{} vs {}", total(&warm), total(&cold));
}

#[test]
pub fn converged_grid_points_certify_their_residuals() {
    let truth = scenario(ScenarioName::Main, 100, 77, Knobs::default()).unwrap();
    let log = simulate(&truth).unwrap();
    let config = FitConfig::new(linear_grid(0.05, 0.95, 0.05), KernelConfig::rule_of_thumb(100));
    let fit = fit_grid(&log, &truth.covariates, &config).unwrap();
    for d in fit.diagnostics.iter().filter(|d| d.converged) {
        assert!(d.epsilon <= config.tol);
        assert!(d.f_residual_scaled <= 1e-4 && d.q_residual_scaled <= 1e-4, "{d:?}");
    }
    assert!(fit.diagnostics.iter().filter(|d| d.interior).all(|d| d.converged));
}
