//! Nonlinear multivariate autoregressive network simulation with planted
//! cluster structure, plus the plain CSV formats used for time series and
//! partitions (also the ingest path for user-supplied matrices).
//!
//! Dynamics, per node `i`:
//!
//! `x_i(t) = Σ_k w_ik sin(x_i(t−k)) + Σ_{j≠i} c_ij sin(x_j(t−1)) + ε_i(t)`
//!
//! where `c_ij` is a strong coupling `λ_ij` inside a cluster and a weak
//! `η_ij` across clusters. Cross-node coupling uses lag 1 only.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::analysis::Partition;
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::training::Samples;

pub const N_NODES: usize = 15;
pub const N_CLUSTERS: usize = 3;
pub const LAGS: usize = 3;
pub const NOISE_SD: f64 = 0.2;
pub const BURN_IN: usize = 100;
pub const DEFAULT_STEPS: usize = 20_000;
pub const TRAIN_FRACTION: f64 = 0.8;

pub const W_RANGE: (f64, f64) = (0.2, 0.5);
pub const LAMBDA_RANGE: (f64, f64) = (0.02, 0.2);
pub const ETA_RANGE: (f64, f64) = (0.005, 0.01);

/// Parameters of one simulated network.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NmarSystem {
    pub n_nodes: usize,
    pub lags: usize,
    /// Cluster label per node.
    pub clusters: Vec<usize>,
    /// Self weights, `[node × lag]`; column `k` multiplies `x(t−k−1)`.
    pub w: Vec<f64>,
    /// Intra-cluster couplings `[i × j]`, zero elsewhere.
    pub lambda: Vec<f64>,
    /// Inter-cluster couplings `[i × j]`, zero elsewhere.
    pub eta: Vec<f64>,
    pub noise_sd: f64,
    pub seed: u64,
}

fn uniform(r: &mut rng::Rng, (lo, hi): (f64, f64)) -> f64 {
    r.random_range(lo..hi)
}

/// Draws a 15-node, 3-cluster system; clusters are contiguous blocks of 5.
pub fn sample_system(seed: u64) -> NmarSystem {
    let n = N_NODES;
    let per = n / N_CLUSTERS;
    let clusters: Vec<usize> = (0..n).map(|i| i / per).collect();
    let mut r = rng::stream_rng(seed, stream::SYSTEM);
    let w = (0..n * LAGS).map(|_| uniform(&mut r, W_RANGE)).collect();
    let mut lambda = vec![0.0; n * n];
    let mut eta = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if clusters[i] == clusters[j] {
                lambda[i * n + j] = uniform(&mut r, LAMBDA_RANGE);
            } else {
                eta[i * n + j] = uniform(&mut r, ETA_RANGE);
            }
        }
    }
    NmarSystem {
        n_nodes: n,
        lags: LAGS,
        clusters,
        w,
        lambda,
        eta,
        noise_sd: NOISE_SD,
        seed,
    }
}

impl NmarSystem {
    /// Upper bound on the noise-free part of any update, since `|sin| ≤ 1`.
    pub fn deterministic_bound(&self, node: usize) -> f64 {
        let n = self.n_nodes;
        let w: f64 = self.w[node * self.lags..(node + 1) * self.lags].iter().map(|v| v.abs()).sum();
        let c: f64 = (0..n).map(|j| self.lambda[node * n + j].abs() + self.eta[node * n + j].abs()).sum();
        w + c
    }

    fn check(&self) -> Result<()> {
        let n = self.n_nodes;
        if n == 0 || self.lags == 0 {
            return Err(Error::config("system needs at least one node and one lag"));
        }
        if self.clusters.len() != n || self.w.len() != n * self.lags || self.lambda.len() != n * n || self.eta.len() != n * n {
            return Err(Error::config("system parameter arrays do not match n_nodes and lags"));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::config(format!("noise sd must be finite and nonnegative, got {}", self.noise_sd)));
        }
        Ok(())
    }
}

/// The planted cluster labels.
pub fn ground_truth_partition(system: &NmarSystem) -> Partition {
    Partition::new(system.clusters.clone()).expect("planted clusters are contiguous from 0")
}

/// Row-major `[steps × nodes]` values.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub n_nodes: usize,
    pub values: Vec<f64>,
}

impl TimeSeries {
    pub fn new(n_nodes: usize, values: Vec<f64>) -> Result<Self> {
        if n_nodes == 0 || !values.len().is_multiple_of(n_nodes) {
            return Err(Error::Shape {
                op: "time series",
                lhs: vec![values.len()],
                rhs: vec![n_nodes],
            });
        }
        Ok(TimeSeries { n_nodes, values })
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.n_nodes
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_nodes..(t + 1) * self.n_nodes]
    }

    pub fn column(&self, node: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.values[t * self.n_nodes + node]).collect()
    }

    /// Every timepoint as one training sample.
    pub fn samples(&self) -> Samples {
        Samples {
            n_tokens: self.n_nodes,
            values: self.values.clone(),
        }
    }

    /// Contiguous split: the first `fraction` of timepoints train, the rest validate.
    pub fn split(&self, fraction: f64) -> Result<(Samples, Samples)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::config(format!("split fraction must be in (0, 1), got {fraction}")));
        }
        let cut = (self.len() as f64 * fraction).round() as usize;
        if cut == 0 || cut == self.len() {
            return Err(Error::Degenerate(format!("{} timepoints cannot be split at {fraction}", self.len())));
        }
        let at = cut * self.n_nodes;
        Ok((
            Samples {
                n_tokens: self.n_nodes,
                values: self.values[..at].to_vec(),
            },
            Samples {
                n_tokens: self.n_nodes,
                values: self.values[at..].to_vec(),
            },
        ))
    }
}

/// Runs the dynamics for `steps` kept timepoints after the burn-in. The
/// first `lags` states are drawn from the noise distribution.
pub fn simulate(system: &NmarSystem, steps: usize, noise_seed: u64) -> Result<TimeSeries> {
    system.check()?;
    let n = system.n_nodes;
    let p = system.lags;
    if steps == 0 {
        return Err(Error::config("simulation needs at least one step"));
    }
    let mut r = rng::stream_rng(noise_seed, stream::NOISE);
    let noise = Normal::new(0.0, system.noise_sd).map_err(|e| Error::config(e.to_string()))?;
    let total = p + BURN_IN + steps;
    let mut x = vec![0.0; total * n];
    for v in x.iter_mut().take(p * n) {
        *v = noise.sample(&mut r);
    }
    let mut sin_prev = vec![0.0; n];
    for t in p..total {
        for (j, s) in sin_prev.iter_mut().enumerate() {
            *s = x[(t - 1) * n + j].sin();
        }
        for i in 0..n {
            let mut v = 0.0;
            for k in 0..p {
                v += system.w[i * p + k] * x[(t - 1 - k) * n + i].sin();
            }
            for j in 0..n {
                v += (system.lambda[i * n + j] + system.eta[i * n + j]) * sin_prev[j];
            }
            v += noise.sample(&mut r);
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("simulation at step {t}, node {i}")));
            }
            x[t * n + i] = v;
        }
    }
    TimeSeries::new(n, x[(p + BURN_IN) * n..].to_vec())
}

/// Pearson correlation matrix of the node columns, `[n × n]`.
pub fn correlation_matrix(series: &TimeSeries) -> Vec<f64> {
    let n = series.n_nodes;
    let len = series.len() as f64;
    let cols: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let c = series.column(i);
            let m = c.iter().sum::<f64>() / len;
            c.into_iter().map(|v| v - m).collect()
        })
        .collect();
    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
            out[i * n + j] = dot / (norms[i] * norms[j]);
        }
    }
    out
}

/// Mean off-diagonal correlation inside clusters and across them.
pub fn block_correlations(series: &TimeSeries, partition: &Partition) -> (f64, f64) {
    let n = series.n_nodes;
    let c = correlation_matrix(series);
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if partition.labels[i] == partition.labels[j] {
                intra += c[i * n + j];
                ni += 1;
            } else {
                inter += c[i * n + j];
                nx += 1;
            }
        }
    }
    (intra / ni.max(1) as f64, inter / nx.max(1) as f64)
}

/// Writes a header of column names then one row per timepoint.
pub fn write_series_csv<W: Write>(mut w: W, series: &TimeSeries, names: Option<&[String]>) -> Result<()> {
    let header: Vec<String> = match names {
        Some(n) if n.len() == series.n_nodes => n.to_vec(),
        Some(n) => {
            return Err(Error::Shape {
                op: "series header",
                lhs: vec![n.len()],
                rhs: vec![series.n_nodes],
            })
        }
        None => (0..series.n_nodes).map(|i| format!("node{i}")).collect(),
    };
    writeln!(w, "{}", header.join(","))?;
    for t in 0..series.len() {
        let row: Vec<String> = series.row(t).iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// A numeric matrix read from CSV, with its column names.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedSeries {
    pub names: Vec<String>,
    pub series: TimeSeries,
}

/// Reads a rectangular numeric CSV with a header row. `origin` labels
/// error messages, which carry 1-based line numbers.
pub fn read_series_csv<R: BufRead>(r: R, origin: &str) -> Result<NamedSeries> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    let mut lines = r.lines().enumerate();
    let names: Vec<String> = loop {
        match lines.next() {
            None => return Err(parse_err(1, "empty file: expected a header row".into())),
            Some((i, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let names: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
                if names.iter().any(|s| s.is_empty()) {
                    return Err(parse_err(i + 1, "empty column name in header".into()));
                }
                break names;
            }
        }
    };
    let width = names.len();
    let mut values = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != width {
            return Err(parse_err(i + 1, format!("expected {width} columns, found {}", cells.len())));
        }
        for (c, cell) in cells.iter().enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_err(i + 1, format!("column {} ({}): not a number: {:?}", c + 1, names[c], cell.trim())))?;
            if !v.is_finite() {
                return Err(parse_err(i + 1, format!("column {} ({}): non-finite value", c + 1, names[c])));
            }
            values.push(v);
        }
    }
    if values.is_empty() {
        return Err(parse_err(1, "no data rows".into()));
    }
    Ok(NamedSeries {
        names,
        series: TimeSeries::new(width, values)?,
    })
}

pub fn load_series(path: &Path) -> Result<NamedSeries> {
    let f = std::fs::File::open(path)?;
    read_series_csv(std::io::BufReader::new(f), &path.display().to_string())
}

/// Column means and (population) standard deviations.
pub fn column_stats(series: &TimeSeries) -> (Vec<f64>, Vec<f64>) {
    let n = series.n_nodes;
    let len = series.len() as f64;
    let mut mean = vec![0.0; n];
    for t in 0..series.len() {
        for (m, v) in mean.iter_mut().zip(series.row(t)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= len);
    let mut var = vec![0.0; n];
    for t in 0..series.len() {
        for ((s, v), m) in var.iter_mut().zip(series.row(t)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let sd = var.into_iter().map(|s| (s / len).sqrt()).collect();
    (mean, sd)
}

/// Per-column z-score using the population sd. Constant columns cannot
/// be normalized and are rejected.
pub fn zscore_columns(series: &TimeSeries) -> Result<TimeSeries> {
    if series.len() < 2 {
        return Err(Error::Degenerate("z-scoring needs at least two rows".into()));
    }
    let (mean, sd) = column_stats(series);
    if let Some(c) = sd.iter().position(|&s| s <= 1e-12 * (1.0 + mean.iter().fold(0.0f64, |a, m| a.max(m.abs())))) {
        return Err(Error::Degenerate(format!("column {} is constant", c + 1)));
    }
    let n = series.n_nodes;
    let values = series
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| (v - mean[i % n]) / sd[i % n])
        .collect();
    TimeSeries::new(n, values)
}

/// `node,cluster` rows with a header.
pub fn write_partition_csv<W: Write>(mut w: W, partition: &Partition, names: Option<&[String]>) -> Result<()> {
    writeln!(w, "node,cluster")?;
    for (i, l) in partition.labels.iter().enumerate() {
        match names {
            Some(n) => writeln!(w, "{},{l}", n[i])?,
            None => writeln!(w, "node{i},{l}")?,
        }
    }
    Ok(())
}

/// Reads a `node,cluster` CSV, matching nodes to `names` in any order.
/// Every name must appear exactly once. Cluster ids may be any
/// integers; they are relabeled to contiguous ids in order of first use.
pub fn read_partition_csv<R: BufRead>(r: R, origin: &str, names: &[String]) -> Result<Partition> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };
    let mut raw: Vec<Option<i64>> = vec![None; names.len()];
    let mut seen_header = false;
    let mut order = 0usize;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if !seen_header {
            seen_header = true;
            // Any header works, as long as its label field is not an integer.
            if line.split(',').nth(1).is_some_and(|l| l.trim().parse::<i64>().is_err()) {
                continue;
            }
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 2 {
            return Err(parse_err(i + 1, format!("expected node,cluster; found {} fields", cells.len())));
        }
        let label: i64 = cells[1]
            .parse()
            .map_err(|_| parse_err(i + 1, format!("cluster id {:?} is not an integer", cells[1])))?;
        let slot = names
            .iter()
            .position(|n| n == cells[0])
            .ok_or_else(|| parse_err(i + 1, format!("unknown node {:?}", cells[0])))?;
        if raw[slot].is_some() {
            return Err(parse_err(i + 1, format!("node {:?} listed twice", cells[0])));
        }
        raw[slot] = Some(label);
        order += 1;
    }
    if order != names.len() {
        return Err(Error::Parse {
            path: origin.to_string(),
            line: 0,
            msg: format!("partition lists {order} nodes but the data has {}", names.len()),
        });
    }
    let mut ids: Vec<i64> = Vec::new();
    let labels = raw
        .into_iter()
        .map(|l| {
            let l = l.expect("all slots filled");
            match ids.iter().position(|&x| x == l) {
                Some(p) => p,
                None => {
                    ids.push(l);
                    ids.len() - 1
                }
            }
        })
        .collect();
    Partition::new(labels)
}

pub fn load_partition(path: &Path, names: &[String]) -> Result<Partition> {
    let f = std::fs::File::open(path)?;
    read_partition_csv(std::io::BufReader::new(f), &path.display().to_string(), names)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampled_parameters_respect_supports() {
        let s = sample_system(4);
        assert!(s.w.iter().all(|&v| (W_RANGE.0..=W_RANGE.1).contains(&v)));
        for i in 0..N_NODES {
            assert_eq!(s.lambda[i * N_NODES + i], 0.0);
            assert_eq!(s.eta[i * N_NODES + i], 0.0);
            for j in 0..N_NODES {
                let (l, e) = (s.lambda[i * N_NODES + j], s.eta[i * N_NODES + j]);
                if i != j && s.clusters[i] == s.clusters[j] {
                    assert!((LAMBDA_RANGE.0..=LAMBDA_RANGE.1).contains(&l) && e == 0.0);
                } else if i != j {
                    assert!((ETA_RANGE.0..=ETA_RANGE.1).contains(&e) && l == 0.0);
                }
            }
        }
        assert_eq!(s, sample_system(4));
    }

    #[test]
    fn null_dynamics_stay_at_zero() {
        let mut s = sample_system(0);
        s.w.fill(0.0);
        s.lambda.fill(0.0);
        s.eta.fill(0.0);
        s.noise_sd = 0.0;
        let ts = simulate(&s, 50, 1).unwrap();
        assert!(ts.values.iter().all(|&v| v == 0.0));
    }
}
