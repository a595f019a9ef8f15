//! Positional encoding schemes.
//!
//! Additive schemes produce a `[context × d_model]` table added to token
//! embeddings before the first block. Relative and rotary schemes act
//! inside every attention layer instead. Learnable tables draw entries
//! from a normal distribution whose *standard deviation* is `sigma`.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rotation, Tensor};
use crate::rng;

const BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PeKind {
    #[serde(rename = "1d-fixed")]
    Fixed1d,
    #[serde(rename = "2d-fixed")]
    Fixed2d,
    #[serde(rename = "1d-relative")]
    Relative1d,
    #[serde(rename = "1d-rope")]
    Rope1d,
    #[serde(rename = "nope")]
    Nope,
    #[serde(rename = "c-nope")]
    CNope,
    #[serde(rename = "random")]
    Random,
    #[serde(rename = "learnable")]
    Learnable,
}

impl PeKind {
    pub const ALL: [PeKind; 8] = [
        PeKind::Fixed1d,
        PeKind::Fixed2d,
        PeKind::Relative1d,
        PeKind::Rope1d,
        PeKind::Nope,
        PeKind::CNope,
        PeKind::Random,
        PeKind::Learnable,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PeKind::Fixed1d => "1d-fixed",
            PeKind::Fixed2d => "2d-fixed",
            PeKind::Relative1d => "1d-relative",
            PeKind::Rope1d => "1d-rope",
            PeKind::Nope => "nope",
            PeKind::CNope => "c-nope",
            PeKind::Random => "random",
            PeKind::Learnable => "learnable",
        }
    }

    /// Whether attention must be causally masked.
    pub fn causal(self) -> bool {
        self == PeKind::CNope
    }
}

impl fmt::Display for PeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown positional encoding '{s}'")))
    }
}

/// A positional encoding choice as written in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeSpec {
    pub kind: PeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<(usize, usize)>,
    /// Overrides the per-run PE seed stream when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl PeSpec {
    pub fn new(kind: PeKind) -> Self {
        PeSpec {
            kind,
            sigma: None,
            grid: None,
            seed: None,
        }
    }

    pub fn learnable(sigma: f64) -> Self {
        PeSpec {
            sigma: Some(sigma),
            ..PeSpec::new(PeKind::Learnable)
        }
    }

    pub fn fixed_2d(rows: usize, cols: usize) -> Self {
        PeSpec {
            grid: Some((rows, cols)),
            ..PeSpec::new(PeKind::Fixed2d)
        }
    }

    /// Short label used in file names and summaries, e.g. `learn-0.2`.
    pub fn label(&self) -> String {
        match (self.kind, self.sigma) {
            (PeKind::Learnable, Some(s)) => format!("learn-{s:?}"),
            (k, _) => k.name().to_string(),
        }
    }

    pub fn validate(&self, context: usize) -> Result<()> {
        match (self.kind, self.sigma) {
            (PeKind::Learnable, None) => return Err(Error::config("learnable PE needs sigma")),
            (PeKind::Learnable, Some(s)) if !(s >= 0.0 && s.is_finite()) => {
                return Err(Error::config(format!("sigma must be a nonnegative number, got {s}")))
            }
            (PeKind::Learnable, _) => {}
            (k, Some(_)) => return Err(Error::config(format!("sigma is only valid for learnable PE, not {k}"))),
            _ => {}
        }
        match (self.kind, self.grid) {
            (PeKind::Fixed2d, None) => Err(Error::config("2d-fixed PE needs a grid")),
            (PeKind::Fixed2d, Some((r, c))) if r * c != context => Err(Error::config(format!(
                "2d grid {r}x{c} does not cover context length {context}"
            ))),
            (k, Some(_)) if k != PeKind::Fixed2d => Err(Error::config(format!("grid is only valid for 2d-fixed PE, not {k}"))),
            _ => Ok(()),
        }
    }
}

/// Additive position table.
#[derive(Debug, Clone, PartialEq)]
pub struct PeTable {
    pub values: Tensor,
    pub trainable: bool,
}

fn sinusoid(pos: f64, d: usize, out: &mut [f64]) {
    for i in 0..d / 2 {
        let angle = pos / BASE.powf(2.0 * i as f64 / d as f64);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
}

/// Sinusoidal table with positions counted from zero.
pub fn build_1d_fixed(context: usize, d_model: usize) -> Result<PeTable> {
    if !d_model.is_multiple_of(2) || d_model == 0 {
        return Err(Error::config(format!("1d-fixed PE needs an even d_model, got {d_model}")));
    }
    let mut values = Tensor::zeros(&[context, d_model]);
    for (p, row) in values.data_mut().chunks_mut(d_model).enumerate() {
        sinusoid(p as f64, d_model, row);
    }
    Ok(PeTable {
        values,
        trainable: false,
    })
}

/// Row index in the first half of the dimensions, column index in the
/// second half, tokens flattened row-major.
pub fn build_2d_fixed(rows: usize, cols: usize, d_model: usize) -> Result<PeTable> {
    if !d_model.is_multiple_of(4) || d_model == 0 {
        return Err(Error::config(format!("2d-fixed PE needs d_model divisible by 4, got {d_model}")));
    }
    let half = d_model / 2;
    let mut values = Tensor::zeros(&[rows * cols, d_model]);
    for (t, row) in values.data_mut().chunks_mut(d_model).enumerate() {
        let (r, c) = (t / cols, t % cols);
        sinusoid(r as f64, half, &mut row[..half]);
        sinusoid(c as f64, half, &mut row[half..]);
    }
    Ok(PeTable {
        values,
        trainable: false,
    })
}

fn normal_table(context: usize, d_model: usize, sd: f64, seed: u64) -> Result<Tensor> {
    let normal = Normal::new(0.0, sd).map_err(|e| Error::config(format!("normal sd {sd}: {e}")))?;
    let mut r = rng::seeded(seed);
    Ok(Tensor::from_fn(&[context, d_model], |_| normal.sample(&mut r)))
}

pub fn build_learnable(context: usize, d_model: usize, sigma: f64, seed: u64) -> Result<PeTable> {
    if !(sigma >= 0.0) {
        return Err(Error::config(format!("sigma must be nonnegative, got {sigma}")));
    }
    Ok(PeTable {
        values: normal_table(context, d_model, sigma, seed)?,
        trainable: true,
    })
}

/// Frozen standard-normal table.
pub fn build_random(context: usize, d_model: usize, seed: u64) -> Result<PeTable> {
    Ok(PeTable {
        values: normal_table(context, d_model, 1.0, seed)?,
        trainable: false,
    })
}

/// Rotation angles `θ[p][k] = p / 10000^(2k/d_head)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RotaryAngles {
    pub theta: Tensor,
}

impl RotaryAngles {
    pub fn new(context: usize, d_head: usize) -> Result<Self> {
        if !d_head.is_multiple_of(2) || d_head == 0 {
            return Err(Error::config(format!("rotary PE needs an even head dimension, got {d_head}")));
        }
        let half = d_head / 2;
        let theta = Tensor::from_fn(&[context, half], |i| {
            let (p, k) = (i / half, i % half);
            p as f64 / BASE.powf(2.0 * k as f64 / d_head as f64)
        });
        Ok(RotaryAngles { theta })
    }

    pub fn context(&self) -> usize {
        self.theta.shape()[0]
    }

    pub fn half_dim(&self) -> usize {
        self.theta.shape()[1]
    }

    /// Precomputed sines and cosines for the tape's rotation op.
    pub fn rotation(&self) -> Rotation {
        Rotation {
            seq: self.context(),
            half_dim: self.half_dim(),
            cos: self.theta.data().iter().map(|t| t.cos()).collect(),
            sin: self.theta.data().iter().map(|t| t.sin()).collect(),
        }
    }
}

/// Rotates each `(x[2k], x[2k+1])` pair of row `p` by `θ[p][k]`.
pub fn rope_rotate(x: &Tensor, angles: &RotaryAngles) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    if d != 2 * angles.half_dim() || n > angles.context() {
        return Err(Error::Shape {
            op: "rope_rotate",
            lhs: x.shape().to_vec(),
            rhs: angles.theta.shape().to_vec(),
        });
    }
    let mut out = x.detached();
    let half = angles.half_dim();
    for (p, row) in out.data_mut().chunks_mut(d).enumerate() {
        for k in 0..half {
            let (s, c) = angles.theta.data()[p * half + k].sin_cos();
            let (a, b) = (row[2 * k], row[2 * k + 1]);
            row[2 * k] = a * c - b * s;
            row[2 * k + 1] = a * s + b * c;
        }
    }
    Ok(out)
}

/// Row of the relative table used for query `i` and key `j`.
pub fn relative_index(context: usize, i: usize, j: usize) -> usize {
    j + context - 1 - i
}

/// Per-offset key vectors, `[(2·context − 1) × d_head]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelativeBias {
    pub a: Tensor,
}

impl RelativeBias {
    pub fn zeros(context: usize, d_head: usize) -> Self {
        RelativeBias {
            a: Tensor::zeros(&[2 * context - 1, d_head]),
        }
    }

    pub fn context(&self) -> usize {
        self.a.shape()[0].div_ceil(2)
    }
}

/// `q_i · a_{j−i}` for one query row, before the `1/√d_head` scaling.
pub fn relative_bias_term(q_i: &[f64], bias: &RelativeBias, i: usize, j: usize) -> Result<f64> {
    let context = bias.context();
    if i >= context || j >= context {
        return Err(Error::Index {
            index: i.max(j),
            bound: context,
        });
    }
    let row = bias.a.row(relative_index(context, i, j));
    if row.len() != q_i.len() {
        return Err(Error::Shape {
            op: "relative_bias_term",
            lhs: vec![q_i.len()],
            rhs: vec![row.len()],
        });
    }
    Ok(q_i.iter().zip(row).map(|(a, b)| a * b).sum())
}

/// Euclidean distances between every pair of table rows.
pub fn row_distances(table: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (n, _) = table.dims2()?;
    Ok((0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    table
                        .row(i)
                        .iter()
                        .zip(table.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_positions_match_closed_form() {
        let t = build_1d_fixed(4, 8).unwrap();
        assert_eq!(&t.values.row(0)[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((t.values.at(&[1, 0]) - 1f64.sin()).abs() < 1e-15);
        assert!(build_1d_fixed(4, 7).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(PeSpec::learnable(0.2).validate(16).is_ok());
        assert!(PeSpec::new(PeKind::Learnable).validate(16).is_err());
        assert!(PeSpec::fixed_2d(4, 4).validate(16).is_ok());
        assert!(PeSpec::fixed_2d(4, 3).validate(16).is_err());
        assert!(PeSpec::new(PeKind::Fixed2d).validate(16).is_err());
        let mut s = PeSpec::new(PeKind::Nope);
        s.sigma = Some(1.0);
        assert!(s.validate(16).is_err());
        assert_eq!("c-nope".parse::<PeKind>().unwrap(), PeKind::CNope);
        assert_eq!(PeSpec::learnable(2.0).label(), "learn-2.0");
    }

    #[test]
    fn relative_offsets_share_rows() {
        assert_eq!(relative_index(16, 3, 5), relative_index(16, 0, 2));
        assert_eq!(relative_index(16, 15, 0), 0);
        assert_eq!(relative_index(16, 0, 15), 30);
    }
}
