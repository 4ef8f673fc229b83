//! Properties of the multiplier-bootstrap tests.

use dyncox::estimator::{fit_grid, FitConfig, FitResult};
use dyncox::hypothesis::{run_test, TestKind, TestReport, TestSpec};
use dyncox::inference::variance_bundle;
use dyncox::simulator::{scenario, simulate, Knobs, ScenarioName, TruthBundle};
use dyncox::types::{linear_grid, pair_index, CovariateSet, Event, EventLog, KernelConfig};

struct Prepared {
    log: EventLog,
    cov: CovariateSet,
    fit: FitResult,
    config: FitConfig,
}

fn prepare(log: EventLog, cov: CovariateSet) -> Prepared {
    let config = FitConfig::new(linear_grid(0.1, 0.9, 0.1), KernelConfig::rule_of_thumb(log.n_nodes()));
    let fit = fit_grid(&log, &cov, &config).unwrap();
    Prepared { log, cov, fit, config }
}

fn report(d: &Prepared, spec: &TestSpec) -> TestReport {
    let bundle = variance_bundle(&d.log, &d.cov, &d.fit, &d.config.kernel);
    run_test(&d.log, &d.cov, &d.fit, &bundle, spec).unwrap()
}

fn null_data(name: ScenarioName, n: usize, seed: u64) -> Prepared {
    let truth = scenario(name, n, seed, Knobs::default()).unwrap();
    prepare(simulate(&truth).unwrap(), truth.covariates)
}

#[test]
fn decisions_are_consistent_with_quantiles() {
    let d = null_data(ScenarioName::TrendTest, 40, 3);
    for test in [TestKind::TrendEta, TestKind::TrendGamma, TestKind::HetAlpha, TestKind::HetBeta] {
        let mut last = f64::INFINITY;
        for level in [0.01, 0.05, 0.1, 0.5] {
            let mut spec = TestSpec::new(test, 1.0, 9);
            spec.resamples = 200;
            spec.level = level;
            let r = report(&d, &spec);
            assert!((0.0..=1.0).contains(&r.p_value));
            assert_eq!(r.reject, r.statistic > r.critical_value);
            if r.reject {
                assert!(r.p_value <= level + 1.0 / 200.0, "{test:?}: p={} at level {level}", r.p_value);
            } else {
                assert!(r.p_value > level - 1.0 / 200.0, "{test:?}: p={} at level {level}", r.p_value);
            }
            assert!(r.critical_value <= last, "{test:?}: critical value grew as the level rose");
            last = r.critical_value;
        }
    }
}

/// Swap node labels within `0..n-1`, keeping the anchor receiver in place.
fn relabelled(truth: &TruthBundle, log: &EventLog, perm: &[usize]) -> (EventLog, CovariateSet) {
    let n = log.n_nodes();
    let events = log.events().iter().map(|e| Event { sender: perm[e.sender], receiver: perm[e.receiver], time: e.time }).collect();
    let mut paths = vec![None; n * (n - 1)];
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            paths[pair_index(n, perm[i], perm[j])] = Some(truth.covariates.path(pair_index(n, i, j)));
        }
    }
    let cov = CovariateSet::from_paths(n, 1.0, truth.p(), paths.into_iter().map(Option::unwrap).collect()).unwrap();
    (EventLog::new(n, 1.0, events).unwrap(), cov)
}

#[test]
fn relabelling_nodes_permutes_contributions() {
    let n = 30;
    let truth = scenario(ScenarioName::HetTest, n, 5, Knobs { c: 1.0, ..Knobs::default() }).unwrap();
    let log = simulate(&truth).unwrap();
    let perm: Vec<usize> = (0..n - 1).rev().chain([n - 1]).collect();
    let original = prepare(log.clone(), truth.covariates.clone());
    let (log2, cov2) = relabelled(&truth, &log, &perm);
    let moved = prepare(log2, cov2);
    for test in [TestKind::HetAlpha, TestKind::TrendEta] {
        let mut spec = TestSpec::new(test, 1.0, 2);
        spec.resamples = 100;
        let (a, b) = (report(&original, &spec), report(&moved, &spec));
        assert!((a.statistic - b.statistic).abs() <= 1e-6 * a.statistic, "{test:?}: {} vs {}", a.statistic, b.statistic);
        assert_eq!(a.coordinates_tested, b.coordinates_tested);
        let value = |r: &TestReport, name: &str| r.contributions.iter().find(|c| c.coordinate == name).map(|c| c.value);
        for i in 0..n {
            let (from, to) = (format!("alpha_{}", i + 1), format!("alpha_{}", perm[i] + 1));
            match (value(&a, &from), value(&b, &to)) {
                (Some(x), Some(y)) => assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0), "{test:?} {from}: {x} vs {y}"),
                (x, y) => assert_eq!(x.is_some(), y.is_some()),
            }
        }
    }
}

#[test]
fn null_p_values_are_close_to_uniform() {
    let reps = 200;
    let mut p: Vec<f64> = (0..reps)
        .map(|r| {
            let d = null_data(ScenarioName::HetTest, 50, 10_000 + r);
            let mut spec = TestSpec::new(TestKind::HetAlpha, 1.0, r);
            spec.resamples = 200;
            report(&d, &spec).p_value
        })
        .collect();
    p.sort_by(f64::total_cmp);
    let m = p.len() as f64;
    let ks = p
        .iter()
        .enumerate()
        .map(|(k, &v)| (v - k as f64 / m).abs().max(((k + 1) as f64 / m - v).abs()))
        .fold(0.0, f64::max);
    assert!(ks <= 0.12, "Kolmogorov-Smirnov distance {ks}");
}
