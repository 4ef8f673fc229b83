//! Command-line front end: `simulate`, `fit`, `test` and `reproduce`.
//!
//! Every option can also come from a JSON config file (`--config`). Explicit flags
//! win over the file, which wins over the built-in defaults. Exit codes: 0 on
//! success, 1 for invalid input, 2 for numerical failure.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::estimator::{fit_grid, FitConfig, PointDiagnostics, UpdateMode};
use crate::experiments::{run_experiment, ExperimentKind, ExperimentPlan};
use crate::hypothesis::{run_test, Multiplier, TestKind, TestSpec};
use crate::inference::{confidence_intervals, variance_bundle_with, write_ci_csv, Projection};
use crate::kernel::Kernel;
use crate::output::{write_atomic, write_json};
use crate::simulator::{scenario, simulate, Knobs, ScenarioName};
use crate::types::{
    build_pair_covariates, ingest_events, linear_grid, max_node_id, CovariateSet, EventLog, KernelConfig, NodeFeatureSet,
    PairRule,
};

#[derive(Debug, Parser)]
#[command(name = "dyncox", version, about = "Degree-corrected Cox model for continuous-time directed networks")]
pub struct Cli {
    /// JSON file with option values; keys are option names, optionally nested under the subcommand name.
    /// Explicit flags take precedence over the file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads [default: available parallelism]
    #[arg(long, global = true, env = "DYNCOX_THREADS")]
    pub threads: Option<usize>,
    /// Progress messages on stderr (repeat for more)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a scenario; writes the event CSV, `<stem>.truth.json` and `<stem>.covariates.json`
    Simulate(SimulateArgs),
    /// Estimate the curves on a time grid; writes a curves CSV and `<stem>.diagnostics.json`
    Fit(FitArgs),
    /// Multiplier-bootstrap trend or heterogeneity test; prints or writes a JSON report
    Test(TestArgs),
    /// Run a Monte-Carlo study; writes a CSV table and manifest.json into a directory
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateArgs {
    /// main | heterogeneity-compare | trend-test | het-test [default: main]
    #[arg(long)]
    pub scenario: Option<String>,
    /// Number of nodes [default: 100]
    #[arg(long)]
    pub n: Option<usize>,
    /// Random seed [default: 1]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sparsity coefficient of `main`, q_n = -c0 log n [default: 0.5]
    #[arg(long)]
    pub c0: Option<f64>,
    /// Heterogeneity strength of `heterogeneity-compare` [default: 1]
    #[arg(long)]
    pub b: Option<f64>,
    /// Degree trend level of `trend-test` [default: 0]
    #[arg(long)]
    pub c1: Option<f64>,
    /// Homophily trend level of `trend-test` [default: 0]
    #[arg(long)]
    pub c2: Option<f64>,
    /// Out-degree offset of node n in `het-test` [default: 0]
    #[arg(long)]
    pub c: Option<f64>,
    /// Event CSV to write (required)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Input data shared by `fit` and `test`.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct DataArgs {
    /// Event CSV with header `sender,receiver,time` and 1-based node ids (required)
    #[arg(long)]
    pub events: Option<PathBuf>,
    /// Number of nodes [default: largest node id in the events]
    #[arg(long)]
    pub n: Option<usize>,
    /// Observation window end; event times lie in (0, tau] [default: 1]
    #[arg(long)]
    pub tau: Option<f64>,
    /// Covariate JSON as written by `simulate` [default: no covariates unless --features is given]
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    /// Node-feature CSV (`node,x1,...,xd`) turned into pair covariates by --rule
    #[arg(long, conflicts_with = "covariates")]
    pub features: Option<PathBuf>,
    /// inner-product | l2-distance | kronecker [default: inner-product]
    #[arg(long)]
    pub rule: Option<String>,
}

/// Kernel, bandwidths and solver settings shared by `fit` and `test`.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimationArgs {
    /// gaussian | epanechnikov [default: gaussian]
    #[arg(long)]
    pub kernel: Option<String>,
    /// Bandwidth for the degree parameters [default: 0.1 * n^(-1/5)]
    #[arg(long)]
    pub h1: Option<f64>,
    /// Bandwidth for the homophily coefficients [default: 0.015 * n^(-2/5)]
    #[arg(long)]
    pub h2: Option<f64>,
    /// gauss-seidel | literal update order [default: gauss-seidel]
    #[arg(long)]
    pub mode: Option<String>,
    /// Stopping tolerance on the sup-norm change between sweeps [default: 0.001]
    #[arg(long)]
    pub tol: Option<f64>,
    /// Maximum sweeps per grid time [default: 500]
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Skip the exact anchor-column rebalancing after each degree update
    #[arg(long)]
    pub no_rebalance: bool,
    /// Start every grid time from zero instead of the previous solution
    #[arg(long)]
    pub no_warm_start: bool,
    /// exact | structured covariate projection in the homophily covariance [default: exact]
    #[arg(long)]
    pub projection: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct FitArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub estimation: EstimationArgs,
    /// `start:step:stop` or a comma list, in units of tau [default: 0.05:0.05:0.95]
    #[arg(long)]
    pub grid: Option<String>,
    /// Curves CSV to write (required)
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write pointwise confidence intervals to this CSV
    #[arg(long)]
    pub ci: Option<PathBuf>,
    /// Confidence level of --ci [default: 0.95]
    #[arg(long)]
    pub level: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct TestArgs {
    /// trend-eta | trend-gamma | het-alpha | het-beta (required)
    #[arg(long)]
    pub test: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub estimation: EstimationArgs,
    /// `start:step:stop` or a comma list, in units of tau; must lie in [h1, tau - h1] [default: 0.1:0.1:0.9]
    #[arg(long)]
    pub grid: Option<String>,
    /// Significance level [default: 0.05]
    #[arg(long)]
    pub level: Option<f64>,
    /// Multiplier resamples, at least 100 [default: 1000]
    #[arg(long)]
    pub resamples: Option<usize>,
    /// Multiplier seed [default: 1]
    #[arg(long)]
    pub seed: Option<u64>,
    /// per-event | per-pair multipliers [default: per-event]
    #[arg(long)]
    pub multiplier: Option<String>,
    /// JSON report to write [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct ReproduceArgs {
    /// mise-table | coverage-table | bias-compare | trend-power | het-power (required)
    #[arg(long)]
    pub experiment: Option<String>,
    /// Network sizes, comma separated [default: 100,200; bias-compare: 200]
    #[arg(long, value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
    /// Replicates per setting [default: 100 for mise-table and bias-compare, 200 otherwise]
    #[arg(long)]
    pub reps: Option<usize>,
    /// Multiplier resamples per test [default: 200]
    #[arg(long)]
    pub resamples: Option<usize>,
    /// Master seed [default: 20240601]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Knob values, comma separated [default: trend-power 0,0.25,0.5,1; het-power 0,0.5,1,1.5;
    /// bias-compare b = 0,1/3,1/2,1]
    #[arg(long, value_delimiter = ',')]
    pub knobs: Option<Vec<f64>>,
    /// per-event | per-pair multipliers [default: per-event]
    #[arg(long)]
    pub multiplier: Option<String>,
    /// Output directory (required)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Fill options not given on the command line from a config section.
fn merge_config<T: Serialize + DeserializeOwned>(flags: T, section: Option<&Value>, name: &str) -> Result<T> {
    let Some(section) = section else { return Ok(flags) };
    let Value::Object(section) = section else {
        return Err(Error::Invalid(format!("config section for `{name}` must be a JSON object")));
    };
    let mut value = serde_json::to_value(&flags)?;
    let Value::Object(fields) = &mut value else { unreachable!("argument structs serialize to objects") };
    for (key, v) in section {
        let key = key.replace('-', "_");
        match fields.get(&key) {
            None => return Err(Error::Invalid(format!("unknown config key `{key}` for `{name}`"))),
            Some(Value::Null) | Some(Value::Bool(false)) => {
                fields.insert(key, v.clone());
            }
            Some(_) => {}
        }
    }
    serde_json::from_value(value).map_err(|e| Error::Invalid(format!("config for `{name}`: {e}")))
}

/// The subcommand's section of the config file: `config[name]` if present, otherwise the top level.
fn config_section<'a>(config: &'a Option<Value>, name: &str) -> Option<&'a Value> {
    let config = config.as_ref()?;
    Some(config.get(name).unwrap_or(config))
}

fn parse<T: std::str::FromStr<Err = Error>>(value: &Option<String>, default: T) -> Result<T> {
    value.as_deref().map_or(Ok(default), str::parse)
}

fn required<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T> {
    value.as_ref().ok_or_else(|| Error::Invalid(format!("missing --{flag}")))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Invalid(format!("cannot open {}: {e}", path.display())))
}

/// `start:step:stop` or `a,b,c`, multiplied by `tau`.
pub fn parse_grid(spec: &str, tau: f64) -> Result<Vec<f64>> {
    let bad = || Error::Invalid(format!("cannot parse grid `{spec}` (start:step:stop or a comma list)"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    let grid = if spec.contains(':') {
        let parts: Vec<f64> = spec.split(':').map(num).collect::<Result<_>>()?;
        let [start, step, stop] = parts[..] else { return Err(bad()) };
        if !(step > 0.0) || stop < start {
            return Err(bad());
        }
        linear_grid(start, stop, step)
    } else {
        spec.split(',').map(num).collect::<Result<_>>()?
    };
    Ok(grid.into_iter().map(|t| t * tau).collect())
}

/// Sibling path `<dir>/<stem>.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    path.with_file_name(format!("{stem}.{suffix}"))
}

struct Loaded {
    log: EventLog,
    cov: CovariateSet,
}

fn load_data(args: &DataArgs) -> Result<Loaded> {
    let events = required(&args.events, "events")?;
    let tau = args.tau.unwrap_or(1.0);
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Invalid(format!("tau must be positive, got {tau}")));
    }
    let n = match args.n {
        Some(n) => n,
        None => max_node_id(open(events)?)?,
    };
    if n < 2 {
        return Err(Error::Invalid(format!("need at least 2 nodes, got {n}")));
    }
    let log = ingest_events(open(events)?, n, tau)?;
    let cov = match (&args.covariates, &args.features) {
        (Some(path), _) => CovariateSet::read_json(open(path)?)?,
        (None, Some(path)) => {
            let rule: PairRule = parse(&args.rule, PairRule::InnerProduct)?;
            build_pair_covariates(&NodeFeatureSet::read_csv(open(path)?, n)?, rule, tau)?
        }
        (None, None) => CovariateSet::none(n, tau),
    };
    if cov.n_nodes() != n || (cov.tau() - tau).abs() > 1e-12 {
        return Err(Error::Invalid(format!(
            "covariates describe n={} on [0, {}] but the events use n={n} on [0, {tau}]",
            cov.n_nodes(),
            cov.tau()
        )));
    }
    Ok(Loaded { log, cov })
}

fn fit_config(args: &EstimationArgs, grid: Vec<f64>, n: usize) -> Result<FitConfig> {
    let rot = KernelConfig::rule_of_thumb(n);
    let kernel = KernelConfig::new(
        parse::<Kernel>(&args.kernel, Kernel::Gaussian)?,
        args.h1.unwrap_or(rot.h1),
        args.h2.unwrap_or(rot.h2),
    )?;
    let mut config = FitConfig::new(grid, kernel);
    config.mode = parse::<UpdateMode>(&args.mode, UpdateMode::GaussSeidel)?;
    if let Some(tol) = args.tol {
        config.tol = tol;
    }
    if let Some(m) = args.max_iter {
        config.max_iter = m;
    }
    config.rebalance = !args.no_rebalance;
    config.warm_start = !args.no_warm_start;
    Ok(config)
}

#[derive(Serialize)]
struct DiagnosticsFile<'a> {
    n: usize,
    p: usize,
    tau: f64,
    events: usize,
    config: &'a FitConfig,
    points: &'a [PointDiagnostics],
}

fn log_line(verbosity: u8, msg: impl FnOnce() -> String) {
    if verbosity > 0 {
        eprintln!("{}", msg());
    }
}

fn run_simulate(args: SimulateArgs, verbosity: u8) -> Result<()> {
    let out = required(&args.out, "out")?.clone();
    let name: ScenarioName = parse(&args.scenario, ScenarioName::Main)?;
    let d = Knobs::default();
    let knobs = Knobs {
        c0: args.c0.unwrap_or(d.c0),
        b: args.b.unwrap_or(d.b),
        c1: args.c1.unwrap_or(d.c1),
        c2: args.c2.unwrap_or(d.c2),
        c: args.c.unwrap_or(d.c),
    };
    let n = args.n.unwrap_or(100);
    let truth = scenario(name, n, args.seed.unwrap_or(1), knobs)?;
    let log = simulate(&truth)?;
    write_atomic(&out, |w| log.write_csv(w))?;
    write_json(&sibling(&out, "truth.json"), &truth.to_file())?;
    write_atomic(&sibling(&out, "covariates.json"), |w| truth.covariates.write_json(w))?;
    log_line(verbosity, || format!("simulated {} events on {n} nodes into {}", log.len(), out.display()));
    Ok(())
}

fn run_fit(args: FitArgs, verbosity: u8) -> Result<()> {
    let out = required(&args.out, "out")?.clone();
    let data = load_data(&args.data)?;
    let (n, tau) = (data.log.n_nodes(), data.log.tau());
    let grid = parse_grid(args.grid.as_deref().unwrap_or("0.05:0.05:0.95"), tau)?;
    let config = fit_config(&args.estimation, grid, n)?;
    let projection: Projection = parse(&args.estimation.projection, Projection::Exact)?;
    log_line(verbosity, || {
        format!("fitting n={n}, {} events, h1={:.5}, h2={:.5}", data.log.len(), config.kernel.h1, config.kernel.h2)
    });
    let fit = fit_grid(&data.log, &data.cov, &config)?;
    let failed = fit.diagnostics.iter().filter(|d| d.error.is_some()).count();
    write_atomic(&out, |w| fit.curves.write_csv(w))?;
    let diag = DiagnosticsFile {
        n,
        p: data.cov.p(),
        tau,
        events: data.log.len(),
        config: &config,
        points: &fit.diagnostics,
    };
    write_json(&sibling(&out, "diagnostics.json"), &diag)?;
    if let Some(ci) = &args.ci {
        let bundle = variance_bundle_with(&data.log, &data.cov, &fit, &config.kernel, projection);
        let rows = confidence_intervals(&fit, &bundle, args.level.unwrap_or(0.95))?;
        write_atomic(ci, |w| write_ci_csv(&rows, w))?;
    }
    for d in fit.diagnostics.iter().filter(|d| d.error.is_some() || !d.converged) {
        eprintln!("warning: t={}: {}", d.t, d.error.as_deref().unwrap_or("did not converge"));
    }
    if failed == fit.diagnostics.len() {
        return Err(Error::UndefinedFit { t: fit.curves.grid[0] });
    }
    Ok(())
}

fn run_test_command(args: TestArgs, verbosity: u8) -> Result<()> {
    let kind: TestKind = required(&args.test, "test")?.parse()?;
    let data = load_data(&args.data)?;
    let (n, tau) = (data.log.n_nodes(), data.log.tau());
    let mut spec = TestSpec::new(kind, tau, args.seed.unwrap_or(1));
    if let Some(g) = &args.grid {
        spec.grid = parse_grid(g, tau)?;
    }
    if let Some(level) = args.level {
        spec.level = level;
    }
    if let Some(b) = args.resamples {
        spec.resamples = b;
    }
    spec.multiplier = parse(&args.multiplier, Multiplier::PerEvent)?;
    let config = fit_config(&args.estimation, spec.grid.clone(), n)?;
    spec.validate(config.kernel.h1, tau)?;
    let projection: Projection = parse(&args.estimation.projection, Projection::Exact)?;
    log_line(verbosity, || format!("testing {kind:?} on n={n} with {} resamples", spec.resamples));
    let fit = fit_grid(&data.log, &data.cov, &config)?;
    let bundle = variance_bundle_with(&data.log, &data.cov, &fit, &config.kernel, projection);
    let report = run_test(&data.log, &data.cov, &fit, &bundle, &spec)?;
    match &args.out {
        Some(path) => write_json(path, &report)?,
        None => {
            let mut stdout = std::io::stdout().lock();
            serde_json::to_writer_pretty(&mut stdout, &report)?;
            writeln!(stdout)?;
        }
    }
    Ok(())
}

fn run_reproduce(args: ReproduceArgs, verbosity: u8) -> Result<()> {
    let kind: ExperimentKind = required(&args.experiment, "experiment")?.parse()?;
    let mut plan = ExperimentPlan::new(kind);
    plan.out = Some(required(&args.out, "out")?.clone());
    if let Some(n) = args.n {
        plan.n = n;
    }
    if let Some(r) = args.reps {
        plan.reps = r;
    }
    if let Some(b) = args.resamples {
        plan.resamples = b;
    }
    if let Some(s) = args.seed {
        plan.seed = s;
    }
    if let Some(k) = args.knobs {
        plan.knobs = k;
    }
    plan.multiplier = parse(&args.multiplier, Multiplier::PerEvent)?;
    plan.validate()?;
    log_line(verbosity, || format!("running {} with {} replicates", kind.name(), plan.reps));
    let manifest = run_experiment(&plan)?;
    log_line(verbosity, || format!("done in {:.1}s", manifest.elapsed_seconds));
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let config: Option<Value> = match &cli.config {
        Some(path) => Some(
            serde_json::from_reader(open(path)?)
                .map_err(|e| Error::Invalid(format!("config {}: {e}", path.display())))?,
        ),
        None => None,
    };
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::Invalid("--threads must be at least 1".into()));
        }
        // a pool already built by an earlier call in this process is kept
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let v = cli.verbose;
    match cli.command {
        Command::Simulate(a) => run_simulate(merge_config(a, config_section(&config, "simulate"), "simulate")?, v),
        Command::Fit(a) => run_fit(merge_config(a, config_section(&config, "fit"), "fit")?, v),
        Command::Test(a) => run_test_command(merge_config(a, config_section(&config, "test"), "test")?, v),
        Command::Reproduce(a) => run_reproduce(merge_config(a, config_section(&config, "reproduce"), "reproduce")?, v),
    }
}

/// Exit code for an error: 2 for numerical failures, 1 otherwise.
pub fn exit_code(err: &Error) -> u8 {
    if err.is_numerical() {
        2
    } else {
        1
    }
}

/// Parse `args` (program name first), run, and map the outcome to an exit code.
pub fn run<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
