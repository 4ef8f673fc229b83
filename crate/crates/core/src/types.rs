//! Domain data: event logs, covariate paths, node features and parameter curves.
//!
//! Node ids are 1-based in every file format and 0-based in memory. Ordered
//! pairs `(i, j)`, `i != j`, are laid out sender-major: pair `(i, j)` has index
//! `i * (n - 1) + j'` where `j'` skips the diagonal.

use std::io::{Read, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::Kernel;

/// Index of the ordered pair `(i, j)` among the `n (n - 1)` off-diagonal pairs.
#[inline]
pub fn pair_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i != j && i < n && j < n);
    i * (n - 1) + if j < i { j } else { j - 1 }
}

/// Inverse of [`pair_index`].
#[inline]
pub fn pair_nodes(n: usize, k: usize) -> (usize, usize) {
    let i = k / (n - 1);
    let r = k % (n - 1);
    (i, if r < i { r } else { r + 1 })
}

/// A single directed interaction (0-based node ids).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub sender: usize,
    pub receiver: usize,
    pub time: f64,
}

/// Validated, time-sorted interaction log with a per-pair index of event times.
#[derive(Debug, Clone, PartialEq)]
pub struct EventLog {
    n_nodes: usize,
    tau: f64,
    events: Vec<Event>,
    pair_offsets: Vec<usize>,
    pair_times: Vec<f64>,
}

impl EventLog {
    /// Validate and index `events`. Row numbers in errors are 1-based positions.
    pub fn new(n_nodes: usize, tau: f64, mut events: Vec<Event>) -> Result<Self> {
        if n_nodes < 2 {
            return Err(Error::Invalid(format!("n_nodes must be at least 2, got {n_nodes}")));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Invalid(format!("tau must be positive and finite, got {tau}")));
        }
        for (k, e) in events.iter().enumerate() {
            let row = k + 1;
            for node in [e.sender, e.receiver] {
                if node >= n_nodes {
                    return Err(Error::NodeOutOfRange { row, node: node as i64 + 1, n: n_nodes });
                }
            }
            if e.sender == e.receiver {
                return Err(Error::SelfLoop { row });
            }
            if !(e.time > 0.0 && e.time <= tau) {
                return Err(Error::TimeOutOfRange { row, time: e.time, tau });
            }
        }
        events.sort_by(|a, b| {
            a.time
                .total_cmp(&b.time)
                .then(a.sender.cmp(&b.sender))
                .then(a.receiver.cmp(&b.receiver))
        });

        let n_pairs = n_nodes * (n_nodes - 1);
        let mut counts = vec![0usize; n_pairs];
        for e in &events {
            counts[pair_index(n_nodes, e.sender, e.receiver)] += 1;
        }
        let mut pair_offsets = Vec::with_capacity(n_pairs + 1);
        pair_offsets.push(0);
        for c in &counts {
            pair_offsets.push(pair_offsets.last().unwrap() + c);
        }
        let mut fill = pair_offsets[..n_pairs].to_vec();
        let mut pair_times = vec![0.0; events.len()];
        // events are time-sorted, so each pair's slice comes out sorted too
        for e in &events {
            let k = pair_index(n_nodes, e.sender, e.receiver);
            pair_times[fill[k]] = e.time;
            fill[k] += 1;
        }
        Ok(Self { n_nodes, tau, events, pair_offsets, pair_times })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_pairs(&self) -> usize {
        self.n_nodes * (self.n_nodes - 1)
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Sorted event times of the ordered pair `(i, j)`.
    pub fn pair_times(&self, i: usize, j: usize) -> &[f64] {
        self.pair_times_by_index(pair_index(self.n_nodes, i, j))
    }

    pub fn pair_times_by_index(&self, k: usize) -> &[f64] {
        &self.pair_times[self.pair_offsets[k]..self.pair_offsets[k + 1]]
    }

    /// `N_ij(t)`: number of `i -> j` events in `(0, t]`.
    pub fn count(&self, i: usize, j: usize, t: f64) -> usize {
        self.pair_times(i, j).partition_point(|&s| s <= t)
    }

    /// Write `sender,receiver,time` rows with 1-based ids.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["sender", "receiver", "time"])?;
        for e in &self.events {
            w.write_record([
                (e.sender + 1).to_string(),
                (e.receiver + 1).to_string(),
                format!("{}", e.time),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Parse an event CSV with header `sender,receiver,time` and 1-based node ids.
pub fn ingest_events<R: Read>(reader: R, n_nodes: usize, tau: f64) -> Result<EventLog> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["sender", "receiver", "time"];
    if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::Invalid(format!(
            "event CSV header must be `sender,receiver,time`, found `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut events = Vec::new();
    for (k, record) in rdr.records().enumerate() {
        let row = k + 1;
        let record = record?;
        if record.len() != 3 {
            return Err(Error::MalformedRow { row, msg: format!("expected 3 fields, got {}", record.len()) });
        }
        let parse_node = |s: &str| -> Result<i64> {
            s.parse::<i64>().map_err(|_| Error::MalformedRow { row, msg: format!("bad node id `{s}`") })
        };
        let sender = parse_node(&record[0])?;
        let receiver = parse_node(&record[1])?;
        let time: f64 = record[2]
            .parse()
            .map_err(|_| Error::MalformedRow { row, msg: format!("bad time `{}`", &record[2]) })?;
        for node in [sender, receiver] {
            if node < 1 || node as u64 > n_nodes as u64 {
                return Err(Error::NodeOutOfRange { row, node, n: n_nodes });
            }
        }
        if sender == receiver {
            return Err(Error::SelfLoop { row });
        }
        if !(time > 0.0 && time <= tau) {
            return Err(Error::TimeOutOfRange { row, time, tau });
        }
        events.push(Event { sender: sender as usize - 1, receiver: receiver as usize - 1, time });
    }
    EventLog::new(n_nodes, tau, events)
}

/// Largest 1-based node id appearing in an event CSV; used when `n` is not given.
pub fn max_node_id<R: Read>(reader: R) -> Result<usize> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut max = 0usize;
    for (k, record) in rdr.records().enumerate() {
        let record = record?;
        for f in record.iter().take(2) {
            let v: usize = f
                .parse()
                .map_err(|_| Error::MalformedRow { row: k + 1, msg: format!("bad node id `{f}`") })?;
            max = max.max(v);
        }
    }
    Ok(max)
}

/// A piecewise-constant covariate path `0 = u_0 < ... < u_K = tau`, one value per segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariatePath {
    pub breaks: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

/// Pair covariate paths `Z_ij(t)` stored as flat segment arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateSet {
    n_nodes: usize,
    tau: f64,
    p: usize,
    seg_offsets: Vec<usize>,
    seg_lo: Vec<f64>,
    seg_hi: Vec<f64>,
    seg_values: Vec<f64>,
}

impl CovariateSet {
    /// No covariates (`p = 0`); every pair still carries one segment on `[0, tau]`.
    pub fn none(n_nodes: usize, tau: f64) -> Self {
        Self::constant(n_nodes, tau, 0, Vec::new()).expect("empty covariates are valid")
    }

    /// Time-constant covariates; `values` holds `p` entries per pair in pair order.
    pub fn constant(n_nodes: usize, tau: f64, p: usize, values: Vec<f64>) -> Result<Self> {
        let n_pairs = n_nodes * n_nodes.saturating_sub(1);
        if values.len() != n_pairs * p {
            return Err(Error::Invalid(format!(
                "expected {} covariate values ({} pairs x p={p}), got {}",
                n_pairs * p,
                n_pairs,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("covariate values must be finite".into()));
        }
        Ok(Self {
            n_nodes,
            tau,
            p,
            seg_offsets: (0..=n_pairs).collect(),
            seg_lo: vec![0.0; n_pairs],
            seg_hi: vec![tau; n_pairs],
            seg_values: values,
        })
    }

    /// General piecewise-constant paths, one per pair in pair order.
    pub fn from_paths(n_nodes: usize, tau: f64, p: usize, paths: Vec<CovariatePath>) -> Result<Self> {
        let n_pairs = n_nodes * n_nodes.saturating_sub(1);
        if paths.len() != n_pairs {
            return Err(Error::Invalid(format!("expected {n_pairs} covariate paths, got {}", paths.len())));
        }
        let mut out = Self {
            n_nodes,
            tau,
            p,
            seg_offsets: vec![0],
            seg_lo: Vec::new(),
            seg_hi: Vec::new(),
            seg_values: Vec::new(),
        };
        for (k, path) in paths.into_iter().enumerate() {
            let (i, j) = pair_nodes(n_nodes, k);
            let ctx = || format!("pair ({}, {})", i + 1, j + 1);
            let b = &path.breaks;
            if b.len() < 2 || b.len() != path.values.len() + 1 {
                return Err(Error::Invalid(format!("{}: need K+1 breakpoints for K values", ctx())));
            }
            if b[0] != 0.0 || b[b.len() - 1] != tau {
                return Err(Error::Invalid(format!("{}: breakpoints must start at 0 and end at tau", ctx())));
            }
            if b.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::Invalid(format!("{}: breakpoints must be strictly increasing", ctx())));
            }
            for (s, v) in path.values.iter().enumerate() {
                if v.len() != p || v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Invalid(format!("{}: segment {s} must hold {p} finite values", ctx())));
                }
                out.seg_lo.push(b[s]);
                out.seg_hi.push(b[s + 1]);
                out.seg_values.extend_from_slice(v);
            }
            out.seg_offsets.push(out.seg_lo.len());
        }
        Ok(out)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Total number of segments over all pairs.
    pub fn n_segments(&self) -> usize {
        self.seg_lo.len()
    }

    /// True when every pair has a single segment.
    pub fn is_constant(&self) -> bool {
        self.n_segments() == self.seg_offsets.len() - 1
    }

    /// Segment index range of pair `k`.
    #[inline]
    pub fn segments(&self, k: usize) -> Range<usize> {
        self.seg_offsets[k]..self.seg_offsets[k + 1]
    }

    #[inline]
    pub fn segment_interval(&self, s: usize) -> (f64, f64) {
        (self.seg_lo[s], self.seg_hi[s])
    }

    /// All segment values, `p` per segment, in segment order.
    pub fn segment_values_flat(&self) -> &[f64] {
        &self.seg_values
    }

    #[inline]
    pub fn segment_value(&self, s: usize) -> &[f64] {
        &self.seg_values[s * self.p..(s + 1) * self.p]
    }

    /// `Z_ij(t)`, right-continuous; at `t = tau` the last segment.
    pub fn evaluate(&self, i: usize, j: usize, t: f64) -> &[f64] {
        self.evaluate_pair(pair_index(self.n_nodes, i, j), t)
    }

    pub fn evaluate_pair(&self, k: usize, t: f64) -> &[f64] {
        let r = self.segments(k);
        let his = &self.seg_hi[r.clone()];
        let pos = his.partition_point(|&hi| hi <= t).min(his.len() - 1);
        self.segment_value(r.start + pos)
    }

    /// The covariate path of pair `k`.
    pub fn path(&self, k: usize) -> CovariatePath {
        let r = self.segments(k);
        let mut breaks = vec![self.seg_lo[r.start]];
        breaks.extend(r.clone().map(|s| self.seg_hi[s]));
        CovariatePath { breaks, values: r.map(|s| self.segment_value(s).to_vec()).collect() }
    }

    pub fn to_file(&self) -> CovariateFile {
        let pairs = (0..self.n_nodes * (self.n_nodes - 1))
            .map(|k| {
                let (i, j) = pair_nodes(self.n_nodes, k);
                let path = self.path(k);
                let breaks = if path.values.len() == 1 { None } else { Some(path.breaks) };
                PairCovariates { sender: i + 1, receiver: j + 1, breaks, values: path.values }
            })
            .collect();
        CovariateFile { n_nodes: self.n_nodes, tau: self.tau, p: self.p, default: None, pairs }
    }

    pub fn from_file(file: CovariateFile) -> Result<Self> {
        let n = file.n_nodes;
        if n < 2 {
            return Err(Error::Invalid("covariate file: n_nodes must be at least 2".into()));
        }
        let mut paths: Vec<Option<CovariatePath>> = vec![None; n * (n - 1)];
        for pc in file.pairs {
            if pc.sender < 1 || pc.sender > n || pc.receiver < 1 || pc.receiver > n || pc.sender == pc.receiver {
                return Err(Error::Invalid(format!(
                    "covariate file: invalid pair ({}, {})",
                    pc.sender, pc.receiver
                )));
            }
            let breaks = pc.breaks.unwrap_or_else(|| vec![0.0, file.tau]);
            paths[pair_index(n, pc.sender - 1, pc.receiver - 1)] = Some(CovariatePath { breaks, values: pc.values });
        }
        let paths = paths
            .into_iter()
            .enumerate()
            .map(|(k, p)| match (p, &file.default) {
                (Some(p), _) => Ok(p),
                (None, Some(d)) => Ok(CovariatePath { breaks: vec![0.0, file.tau], values: vec![d.clone()] }),
                (None, None) => {
                    let (i, j) = pair_nodes(n, k);
                    Err(Error::Invalid(format!(
                        "covariate file: pair ({}, {}) missing and no default given",
                        i + 1,
                        j + 1
                    )))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_paths(n, file.tau, file.p, paths)
    }

    pub fn read_json<R: Read>(reader: R) -> Result<Self> {
        Self::from_file(serde_json::from_reader(reader)?)
    }

    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer(writer, &self.to_file())?;
        Ok(())
    }
}

/// JSON covariate file: per-pair segment arrays with an optional default path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovariateFile {
    pub n_nodes: usize,
    pub tau: f64,
    pub p: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<Vec<f64>>,
    pub pairs: Vec<PairCovariates>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairCovariates {
    pub sender: usize,
    pub receiver: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breaks: Option<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

/// Time-constant node features, `n x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatureSet {
    n: usize,
    d: usize,
    x: Vec<f64>,
}

impl NodeFeatureSet {
    pub fn new(n: usize, d: usize, x: Vec<f64>) -> Result<Self> {
        if x.len() != n * d {
            return Err(Error::Invalid(format!("feature matrix must hold {n} x {d} values, got {}", x.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("node features must be finite".into()));
        }
        Ok(Self { n, d, x })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    /// Parse `node,x1,...,xd` rows (1-based node ids, every node exactly once).
    pub fn read_csv<R: Read>(reader: R, n: usize) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let d = rdr.headers()?.len().checked_sub(1).filter(|&d| d > 0).ok_or_else(|| {
            Error::Invalid("feature CSV needs a `node` column followed by at least one feature".into())
        })?;
        let mut rows: Vec<Option<Vec<f64>>> = vec![None; n];
        for (k, record) in rdr.records().enumerate() {
            let row = k + 1;
            let record = record?;
            if record.len() != d + 1 {
                return Err(Error::MalformedRow { row, msg: format!("expected {} fields", d + 1) });
            }
            let node: usize = record[0]
                .parse()
                .map_err(|_| Error::MalformedRow { row, msg: format!("bad node id `{}`", &record[0]) })?;
            if node < 1 || node > n {
                return Err(Error::NodeOutOfRange { row, node: node as i64, n });
            }
            let vals = record
                .iter()
                .skip(1)
                .map(|s| s.parse::<f64>().map_err(|_| Error::MalformedRow { row, msg: format!("bad value `{s}`") }))
                .collect::<Result<Vec<_>>>()?;
            if rows[node - 1].replace(vals).is_some() {
                return Err(Error::MalformedRow { row, msg: format!("node {node} listed twice") });
            }
        }
        let mut x = Vec::with_capacity(n * d);
        for (i, r) in rows.into_iter().enumerate() {
            x.extend(r.ok_or_else(|| Error::Invalid(format!("feature CSV missing node {}", i + 1)))?);
        }
        Self::new(n, d, x)
    }
}

/// How node features combine into a pair covariate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairRule {
    /// `X_i^T X_j` (p = 1).
    InnerProduct,
    /// `||X_i - X_j||_2` (p = 1).
    L2Distance,
    /// `X_i ⊗ X_j` (p = d^2).
    Kronecker,
}

impl std::str::FromStr for PairRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "inner_product" => Ok(Self::InnerProduct),
            "l2_distance" => Ok(Self::L2Distance),
            "kronecker" => Ok(Self::Kronecker),
            _ => Err(Error::Invalid(format!("unknown pair rule `{s}` (inner-product|l2-distance|kronecker)"))),
        }
    }
}

/// Build single-segment pair covariates on `[0, tau]` from node features.
pub fn build_pair_covariates(features: &NodeFeatureSet, rule: PairRule, tau: f64) -> Result<CovariateSet> {
    let n = features.n();
    if n < 2 {
        return Err(Error::Invalid("need at least two nodes".into()));
    }
    let d = features.d();
    let p = match rule {
        PairRule::InnerProduct | PairRule::L2Distance => 1,
        PairRule::Kronecker => d * d,
    };
    let mut values = Vec::with_capacity(n * (n - 1) * p);
    for k in 0..n * (n - 1) {
        let (i, j) = pair_nodes(n, k);
        let (xi, xj) = (features.row(i), features.row(j));
        match rule {
            PairRule::InnerProduct => values.push(xi.iter().zip(xj).map(|(a, b)| a * b).sum()),
            PairRule::L2Distance => values.push(xi.iter().zip(xj).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()),
            PairRule::Kronecker => {
                for a in xi {
                    values.extend(xj.iter().map(|b| a * b));
                }
            }
        }
    }
    CovariateSet::constant(n, tau, p, values)
}

/// Kernel choice and the two bandwidths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub kernel: Kernel,
    /// Bandwidth for the degree parameters.
    pub h1: f64,
    /// Bandwidth for the homophily coefficients.
    pub h2: f64,
}

impl KernelConfig {
    pub fn new(kernel: Kernel, h1: f64, h2: f64) -> Result<Self> {
        if !(h1 > 0.0 && h1.is_finite() && h2 > 0.0 && h2.is_finite()) {
            return Err(Error::Invalid(format!("bandwidths must be positive, got h1={h1}, h2={h2}")));
        }
        Ok(Self { kernel, h1, h2 })
    }

    /// Rule-of-thumb bandwidths `h1 = 0.1 n^{-1/5}`, `h2 = 0.015 n^{-2/5}` with the Gaussian kernel.
    pub fn rule_of_thumb(n: usize) -> Self {
        let n = n as f64;
        Self { kernel: Kernel::Gaussian, h1: 0.1 * n.powf(-0.2), h2: 0.015 * n.powf(-0.4) }
    }

    pub fn mu0(&self) -> f64 {
        self.kernel.mu0()
    }
}

/// Parameter estimate at one time point. Undefined coordinates hold NaN.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Theta {
    pub alpha: Vec<f64>,
    /// Receivers `1..n-1`; the anchor `beta_n = 0` is implicit.
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub alpha_defined: Vec<bool>,
    pub beta_defined: Vec<bool>,
    pub gamma_defined: bool,
}

impl Theta {
    /// Algorithm start point: everything zero and defined.
    pub fn zeros(n: usize, p: usize) -> Self {
        Self {
            alpha: vec![0.0; n],
            beta: vec![0.0; n - 1],
            gamma: vec![0.0; p],
            alpha_defined: vec![true; n],
            beta_defined: vec![true; n - 1],
            gamma_defined: true,
        }
    }

    /// All coordinates undefined.
    pub fn undefined(n: usize, p: usize) -> Self {
        Self {
            alpha: vec![f64::NAN; n],
            beta: vec![f64::NAN; n - 1],
            gamma: vec![f64::NAN; p],
            alpha_defined: vec![false; n],
            beta_defined: vec![false; n - 1],
            gamma_defined: false,
        }
    }

    pub fn n(&self) -> usize {
        self.alpha.len()
    }

    pub fn p(&self) -> usize {
        self.gamma.len()
    }

    /// `beta_j` including the anchor `beta_n = 0`.
    #[inline]
    pub fn beta_full(&self, j: usize) -> f64 {
        if j + 1 == self.alpha.len() {
            0.0
        } else {
            self.beta[j]
        }
    }

    #[inline]
    pub fn beta_full_defined(&self, j: usize) -> bool {
        j + 1 == self.alpha.len() || self.beta_defined[j]
    }

    /// Coordinate `k` of `eta = (alpha, beta)`, `k < 2n - 1`.
    pub fn eta(&self, k: usize) -> f64 {
        let n = self.n();
        if k < n {
            self.alpha[k]
        } else {
            self.beta[k - n]
        }
    }

    pub fn eta_defined(&self, k: usize) -> bool {
        let n = self.n();
        if k < n {
            self.alpha_defined[k]
        } else {
            self.beta_defined[k - n]
        }
    }

    /// `alpha_i + beta_j + z^T gamma`.
    #[inline]
    pub fn log_intensity(&self, i: usize, j: usize, z: &[f64]) -> f64 {
        self.alpha[i] + self.beta_full(j) + z.iter().zip(&self.gamma).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Flags in `(alpha, beta, gamma)` order, length `2n - 1 + p`.
    pub fn defined_mask(&self) -> Vec<bool> {
        let mut m = self.alpha_defined.clone();
        m.extend(&self.beta_defined);
        m.extend(std::iter::repeat(self.gamma_defined).take(self.p()));
        m
    }

    pub fn all_defined(&self) -> bool {
        self.defined_mask().into_iter().all(|b| b)
    }
}

/// Estimated curves sampled on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterCurves {
    pub grid: Vec<f64>,
    pub points: Vec<Theta>,
}

impl ParameterCurves {
    pub fn n(&self) -> usize {
        self.points.first().map_or(0, |p| p.n())
    }

    pub fn p(&self) -> usize {
        self.points.first().map_or(0, |p| p.p())
    }

    pub fn at(&self, g: usize) -> &Theta {
        &self.points[g]
    }

    /// Index of grid time `t` (within 1e-12).
    pub fn grid_position(&self, t: f64) -> Option<usize> {
        self.grid.iter().position(|&s| (s - t).abs() < 1e-12)
    }

    /// Curves CSV: `t, alpha_1..alpha_n, beta_1..beta_{n-1}, gamma_1..gamma_p`; undefined values are `NaN`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let (n, p) = (self.n(), self.p());
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("alpha_{i}")));
        header.extend((1..n).map(|j| format!("beta_{j}")));
        header.extend((1..=p).map(|k| format!("gamma_{k}")));
        w.write_record(&header)?;
        for (t, th) in self.grid.iter().zip(&self.points) {
            let mut rec = vec![format!("{t}")];
            rec.extend(th.alpha.iter().chain(&th.beta).chain(&th.gamma).map(|v| format!("{v}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Evenly spaced grid `start, start + step, ..., stop` (inclusive, rounding-safe).
pub fn linear_grid(start: f64, stop: f64, step: f64) -> Vec<f64> {
    let m = ((stop - start) / step + 1e-9).floor() as usize;
    (0..=m).map(|k| ((start + k as f64 * step) * 1e12).round() / 1e12).collect()
}
