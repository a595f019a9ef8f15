//! Interpretability metrics: Procrustes alignment of PE tables, attention
//! agreement, PE distance matrices, modularity, clustering and rank
//! correlation.

use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;
use crate::transformer::AttentionRecord;

/// Module label per token, with ids contiguous from 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub labels: Vec<usize>,
    pub n_modules: usize,
}

impl Partition {
    pub fn new(labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::config("partition needs at least one token"));
        }
        let n_modules = labels.iter().max().map_or(0, |m| m + 1);
        let mut used = vec![false; n_modules];
        labels.iter().for_each(|&l| used[l] = true);
        if let Some(gap) = used.iter().position(|u| !u) {
            return Err(Error::config(format!("partition module ids must be contiguous from 0; {gap} is unused")));
        }
        Ok(Partition { labels, n_modules })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn module_sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.n_modules];
        self.labels.iter().for_each(|&l| s[l] += 1);
        s
    }

    /// Same module sizes, labels permuted uniformly over tokens.
    pub fn shuffled(&self, r: &mut rng::Rng) -> Partition {
        let mut labels = self.labels.clone();
        labels.shuffle(r);
        Partition {
            labels,
            n_modules: self.n_modules,
        }
    }
}

fn to_dmatrix(t: &Tensor) -> Result<DMatrix<f64>> {
    let (r, c) = t.dims2()?;
    Ok(DMatrix::from_row_slice(r, c, t.data()))
}

/// Optimal orthogonal alignment of `a` onto `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Procrustes {
    /// `[d × d]` orthogonal matrix minimizing `‖a·R − b‖_F`.
    pub rotation: Tensor,
    pub residual: f64,
}

/// `R = U·Vᵀ` from the SVD `aᵀb = U·Σ·Vᵀ`. When `aᵀb` is rank deficient
/// the singular vectors of the null space are whatever the (deterministic)
/// SVD returns, so `R` is still orthogonal and still optimal.
pub fn orthogonal_procrustes(a: &Tensor, b: &Tensor) -> Result<Procrustes> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::Shape {
            op: "procrustes",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (am, bm) = (to_dmatrix(a)?, to_dmatrix(b)?);
    let m = am.transpose() * &bm;
    let svd = m.svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::NonFinite("procrustes SVD did not converge".into())),
    };
    let r = u * vt;
    let residual = (am * &r - bm).norm();
    let d = r.nrows();
    let data = (0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| r[(i, j)]).collect();
    Ok(Procrustes {
        rotation: Tensor::new(&[d, d], data)?,
        residual,
    })
}

/// Frobenius distance between `learned` and `reference` after rotating
/// `learned` onto `reference`.
pub fn pe_alignment_distance(learned: &Tensor, reference: &Tensor) -> Result<f64> {
    Ok(orthogonal_procrustes(learned, reference)?.residual)
}

fn check_records(a: &AttentionRecord, b: &AttentionRecord) -> Result<()> {
    if (a.n_layers, a.n_heads, a.context) != (b.n_layers, b.n_heads, b.context) {
        return Err(Error::Shape {
            op: "attention comparison",
            lhs: vec![a.n_layers, a.n_heads, a.context],
            rhs: vec![b.n_layers, b.n_heads, b.context],
        });
    }
    Ok(())
}

fn cosine(x: &[f64], y: &[f64]) -> Result<f64> {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::Degenerate("cosine of a zero vector is undefined".into()));
    }
    Ok((dot / (nx * ny)).clamp(-1.0, 1.0))
}

/// Cosine between each layer/head map, averaged over layers and heads.
pub fn attention_cosine(a: &AttentionRecord, b: &AttentionRecord) -> Result<f64> {
    check_records(a, b)?;
    let mut sum = 0.0;
    for l in 0..a.n_layers {
        for h in 0..a.n_heads {
            sum += cosine(a.map(l, h), b.map(l, h))?;
        }
    }
    Ok(sum / (a.n_layers * a.n_heads) as f64)
}

/// Cosine between the two records flattened whole.
pub fn attention_cosine_global(a: &AttentionRecord, b: &AttentionRecord) -> Result<f64> {
    check_records(a, b)?;
    cosine(&a.weights, &b.weights)
}

/// Base-2 Jensen-Shannon divergence between two distributions.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape {
            op: "jsd",
            lhs: vec![p.len()],
            rhs: vec![q.len()],
        });
    }
    for (name, d) in [("p", p), ("q", q)] {
        let s: f64 = d.iter().sum();
        if (s - 1.0).abs() > 1e-6 || d.iter().any(|&v| v < 0.0) {
            return Err(Error::contract(format!("jsd: {name} is not a distribution (sum {s})")));
        }
    }
    let kl = |a: &[f64]| -> f64 {
        a.iter()
            .zip(p.iter().zip(q))
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, (pp, qq))| x * (x / (0.5 * (pp + qq))).log2())
            .sum()
    };
    Ok((0.5 * kl(p) + 0.5 * kl(q)).clamp(0.0, 1.0))
}

/// Row-wise JSD averaged over rows, heads and layers.
pub fn attention_jsd(a: &AttentionRecord, b: &AttentionRecord) -> Result<f64> {
    check_records(a, b)?;
    let t = a.context;
    let mut sum = 0.0;
    for (ra, rb) in a.weights.chunks(t).zip(b.weights.chunks(t)) {
        sum += jsd(ra, rb)?;
    }
    Ok(sum / (a.weights.len() / t) as f64)
}

/// Token-by-token PE distances, raw and as a scaled complement.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub n: usize,
    /// Pairwise L2 distances; symmetric with a zero diagonal.
    pub raw: Vec<f64>,
    /// `1 − scaled distance`, off-diagonal min-max scaled to `[0, 1]`;
    /// the diagonal is 1.
    pub complement: Vec<f64>,
}

impl DistanceMatrix {
    /// The complement with its diagonal set to zero: the weight matrix
    /// used for modularity and clustering, where self-similarity carries
    /// no information.
    pub fn network_weights(&self) -> Vec<f64> {
        let mut w = self.complement.clone();
        (0..self.n).for_each(|i| w[i * self.n + i] = 0.0);
        w
    }
}

pub fn pe_distance_matrix(pe: &Tensor) -> Result<DistanceMatrix> {
    let (n, _) = pe.dims2()?;
    if n < 2 {
        return Err(Error::Degenerate("distance matrix needs at least two tokens".into()));
    }
    let raw: Vec<f64> = crate::pe::row_distances(pe)?.concat();
    let off = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| i * n + j));
    let (lo, hi) = off.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), k| (lo.min(raw[k]), hi.max(raw[k])));
    if hi - lo <= 0.0 {
        return Err(Error::Degenerate("all token distances are equal; min-max scaling is undefined".into()));
    }
    let complement = (0..n * n)
        .map(|k| if k / n == k % n { 1.0 } else { 1.0 - (raw[k] - lo) / (hi - lo) })
        .collect();
    Ok(DistanceMatrix { n, raw, complement })
}

fn check_square(w: &[f64], partition: &Partition) -> Result<usize> {
    let n = partition.len();
    if w.len() != n * n {
        return Err(Error::Shape {
            op: "network metric",
            lhs: vec![w.len()],
            rhs: vec![n * n],
        });
    }
    Ok(n)
}

/// `Q = (1/l) Σ_ij [W_ij − k_i k_j / l] δ(m_i, m_j)` over every entry of
/// `w` as given, with `k_i` the row sums and `l` the total weight. Pass
/// [`DistanceMatrix::network_weights`] to leave self-pairs out.
pub fn modularity(w: &[f64], partition: &Partition) -> Result<f64> {
    let n = check_square(w, partition)?;
    if w.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::contract("modularity needs finite nonnegative weights"));
    }
    let k: Vec<f64> = (0..n).map(|i| w[i * n..(i + 1) * n].iter().sum()).collect();
    let l: f64 = k.iter().sum();
    if l == 0.0 {
        return Err(Error::Degenerate("modularity of an all-zero weight matrix".into()));
    }
    // Group by module so the null term is (Σ_m K_m²)/l.
    let mut within = 0.0;
    let mut strength = vec![0.0; partition.n_modules];
    for i in 0..n {
        let mi = partition.labels[i];
        strength[mi] += k[i];
        for j in 0..n {
            if partition.labels[j] == mi {
                within += w[i * n + j];
            }
        }
    }
    let null: f64 = strength.iter().map(|s| s * s).sum::<f64>() / l;
    Ok((within - null) / l)
}

/// Mean over modules of `(W̄_in − W̄_out) / W̄_in`, where within-module
/// means skip the diagonal.
pub fn network_clustering(w: &[f64], partition: &Partition) -> Result<f64> {
    let n = check_square(w, partition)?;
    let mut total = 0.0;
    for m in 0..partition.n_modules {
        let (mut s_in, mut c_in, mut s_out, mut c_out) = (0.0, 0usize, 0.0, 0usize);
        for i in (0..n).filter(|&i| partition.labels[i] == m) {
            for j in 0..n {
                if j == i {
                    continue;
                }
                if partition.labels[j] == m {
                    s_in += w[i * n + j];
                    c_in += 1;
                } else {
                    s_out += w[i * n + j];
                    c_out += 1;
                }
            }
        }
        if c_in == 0 || c_out == 0 {
            return Err(Error::Degenerate(format!("module {m} needs two members and a non-member")));
        }
        let (win, wout) = (s_in / c_in as f64, s_out / c_out as f64);
        if win == 0.0 {
            return Err(Error::Degenerate(format!("module {m} has zero mean within-module weight")));
        }
        total += (win - wout) / win;
    }
    Ok(total / partition.n_modules as f64)
}

/// Ranks from 1, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        idx[i..=j].iter().for_each(|&k| ranks[k] = r);
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Shape {
            op: "correlation",
            lhs: vec![x.len()],
            rhs: vec![y.len()],
        });
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("correlation with a constant input is undefined".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman ρ: Pearson correlation of average ranks.
pub fn rank_correlation(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::config(format!(
            "rank correlation needs two equal-length lists of at least 3, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Modularity under `n` label shuffles of `partition`.
pub fn permutation_null(w: &[f64], partition: &Partition, n: usize, seed: u64) -> Result<Vec<f64>> {
    let mut r = rng::stream_rng(seed, rng::stream::SHUFFLE);
    (0..n).map(|_| modularity(w, &partition.shuffled(&mut r))).collect()
}

/// Linear-interpolation quantile, `q` in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return Err(Error::config(format!("quantile {q} of {} values", values.len())));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

pub fn median(values: &[f64]) -> Result<f64> {
    quantile(values, 0.5)
}

/// One metric for one model and seed; sweep-level rows carry no seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub seed: Option<u64>,
    pub metric: String,
    pub value: f64,
}

pub const REPORT_HEADER: &str = "model,seed,metric,value";

pub fn write_report<W: Write>(mut w: W, rows: &[ReportRow]) -> Result<()> {
    writeln!(w, "{REPORT_HEADER}")?;
    for r in rows {
        let seed = r.seed.map(|s| s.to_string()).unwrap_or_default();
        writeln!(w, "{},{seed},{},{:?}", r.model, r.metric, r.value)?;
    }
    Ok(())
}

/// Square matrix with a header of token names, one row per token.
pub fn write_matrix_csv<W: Write>(mut w: W, values: &[f64], names: &[String]) -> Result<()> {
    let n = names.len();
    if values.len() != n * n {
        return Err(Error::Shape {
            op: "matrix csv",
            lhs: vec![values.len()],
            rhs: vec![n * n],
        });
    }
    writeln!(w, "{}", names.join(","))?;
    for row in values.chunks(n) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsd_hand_example() {
        let v = jsd(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - 0.311_278_124_459_132_8).abs() < 1e-12, "{v}");
        assert_eq!(jsd(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
    }

    #[test]
    fn clustering_arithmetic() {
        let p = Partition::new(vec![0, 0, 1, 1]).unwrap();
        let mut w = vec![0.4; 16];
        for (i, j) in [(0, 1), (1, 0), (2, 3), (3, 2)] {
            w[i * 4 + j] = 0.8;
        }
        assert!((network_clustering(&w, &p).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn partition_ids_must_be_contiguous() {
        assert!(Partition::new(vec![0, 2, 2]).is_err());
        assert_eq!(Partition::new(vec![1, 0, 1]).unwrap().n_modules, 2);
    }
}
