//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its output value; node indices are
//! therefore a topological order and the backward pass is a single reverse
//! sweep. Ops are deliberately coarse (fused layer norm, attention score and
//! apply kernels) so a transformer step records a few dozen nodes rather
//! than thousands.

use std::sync::Arc;

use super::kernels::{gemm, View};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a `[batch·seq × heads·head_dim]` activation splits into heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl HeadLayout {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    fn check(&self, op: &'static str, shape: &[usize]) -> Result<()> {
        if shape != [self.batch * self.seq, self.width()] {
            return Err(Error::Shape {
                op,
                lhs: shape.to_vec(),
                rhs: vec![self.batch * self.seq, self.width()],
            });
        }
        Ok(())
    }

    /// Offset of head `h` of batch item `b` inside a `[B·T × d]` buffer.
    fn head_offset(&self, b: usize, h: usize) -> usize {
        b * self.seq * self.width() + h * self.head_dim
    }
}

/// Per-position rotation tables for rotary attention, `[seq × head_dim/2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rotation {
    pub seq: usize,
    pub half_dim: usize,
    pub cos: Arc<[f64]>,
    pub sin: Arc<[f64]>,
}

/// Which query rows an attention op computes: all `seq` positions, or
/// `per_batch` selected positions per batch item.
#[derive(Debug, Clone)]
struct Queries {
    per_batch: usize,
    pos: Option<Arc<[usize]>>,
}

impl Queries {
    fn all(seq: usize) -> Self {
        Queries { per_batch: seq, pos: None }
    }

    fn select(layout: &HeadLayout, positions: &[usize], op: &'static str) -> Result<Self> {
        if layout.batch == 0 || positions.is_empty() || !positions.len().is_multiple_of(layout.batch) {
            return Err(Error::contract(format!(
                "{op}: {} query positions do not split over batch {}",
                positions.len(),
                layout.batch
            )));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= layout.seq) {
            return Err(Error::contract(format!("{op}: query position {p} outside context {}", layout.seq)));
        }
        Ok(Queries {
            per_batch: positions.len() / layout.batch,
            pos: Some(positions.into()),
        })
    }

    fn position(&self, b: usize, qi: usize) -> usize {
        match &self.pos {
            Some(p) => p[b * self.per_batch + qi],
            None => qi,
        }
    }

    fn rows(&self, layout: &HeadLayout) -> usize {
        layout.batch * self.per_batch
    }

    /// Offset of head `h` of query row 0 of batch item `b`.
    fn offset(&self, layout: &HeadLayout, b: usize, h: usize) -> usize {
        b * self.per_batch * layout.width() + h * layout.head_dim
    }
}

#[derive(Debug)]
enum Op {
    Leaf(Option<ParamId>),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBroadcast(Var, Var),
    Reshape(Var),
    Sum(Var),
    Gelu {
        x: Var,
        tanh: Vec<f64>,
    },
    Relu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ReplaceRows {
        x: Var,
        fill: Var,
        flags: Vec<bool>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    AttnScores {
        q: Var,
        k: Var,
        layout: HeadLayout,
        queries: Queries,
        scale: f64,
    },
    RelScores {
        q: Var,
        table: Var,
        layout: HeadLayout,
        queries: Queries,
        scale: f64,
    },
    AttnApply {
        p: Var,
        v: Var,
        layout: HeadLayout,
        queries: Queries,
    },
    Rope {
        x: Var,
        layout: HeadLayout,
        queries: Queries,
        rot: Rotation,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    MaskedMse {
        pred: Var,
        target: Vec<f64>,
        mask: Vec<f64>,
        count: f64,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every leaf of a tape.
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf; `None` when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node, leaves included.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Records a constant input; it receives gradients only through [`Tape::gradients`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf(None), t.detached())
    }

    /// Records a parameter; `backward` accumulates into it when trainable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(Op::Leaf(Some(id)), store.get(id).detached())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(shape_err("matmul", sa, sb)),
        };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, View::rows(self.data(a), 0, k), View::rows(self.data(b), 0, n), 0.0, &mut out, 0, n);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let data = self.data(x).iter().map(|v| v * s).collect();
        let value = Tensor::new(self.shape(x), data).expect("same shape");
        self.push(Op::Scale(x, s), value)
    }

    /// `x + b` where `b`'s shape equals the trailing dimensions of `x`
    /// (bias vectors, per-position tables).
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
            return Err(shape_err("add_broadcast", sx, sb));
        }
        let bd = self.data(b);
        let nb = bd.len();
        let data = self.data(x).iter().enumerate().map(|(i, v)| v + bd[i % nb]).collect();
        let value = Tensor::new(sx, data)?;
        Ok(self.push(Op::AddBroadcast(x, b), value))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).detached().reshape(shape)?;
        Ok(self.push(Op::Reshape(x), value))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xd = self.data(x);
        let tanh: Vec<f64> = xd.iter().map(|&v| fast_tanh(GELU_C * (v + GELU_K * v * v * v))).collect();
        let data = xd.iter().zip(&tanh).map(|(&v, &t)| 0.5 * v * (1.0 + t)).collect();
        let value = Tensor::new(self.shape(x), data).expect("same shape");
        self.push(Op::Gelu { x, tanh }, value)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(self.shape(x), data).expect("same shape");
        self.push(Op::Relu(x), value)
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let value = softmax_forward(self.data(x), &shape, outer, len, inner, |_| len)?;
        Ok(self.push(Op::Softmax { x, outer, len, inner }, value))
    }

    /// Softmax over the last axis of `[.., T, T]` score blocks, with entries
    /// above the diagonal masked to exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = shape.len();
        if n < 2 || shape[n - 1] != shape[n - 2] {
            return Err(Error::contract(format!("causal softmax needs trailing square dims, got {shape:?}")));
        }
        let len = shape[n - 1];
        let outer = self.value(x).numel() / len;
        let value = softmax_forward(self.data(x), &shape, outer, len, 1, |o| o % len + 1)?;
        // Masked entries are zero, so the plain softmax backward applies.
        Ok(self.push(Op::Softmax { x, outer, len, inner: 1 }, value))
    }

    /// Causal softmax over `[B·H, Q, T]` scores whose query rows sit at
    /// `positions` (`Q` per batch item, as for [`Tape::attn_scores_at`]).
    pub fn causal_softmax_at(&mut self, x: Var, positions: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let bad = || Error::contract(format!("causal_softmax_at: shape {shape:?} with {} positions", positions.len()));
        if shape.len() != 3 || shape[1] == 0 || !positions.len().is_multiple_of(shape[1]) {
            return Err(bad());
        }
        let (nq, len) = (shape[1], shape[2]);
        let batch = positions.len() / nq;
        if batch == 0 || !shape[0].is_multiple_of(batch) || positions.iter().any(|&p| p >= len) {
            return Err(bad());
        }
        let heads = shape[0] / batch;
        let outer = shape[0] * nq;
        let visible = |o: usize| {
            let (bh, qi) = (o / nq, o % nq);
            positions[(bh / heads) * nq + qi] + 1
        };
        let value = softmax_forward(self.data(x), &shape, outer, len, 1, visible)?;
        Ok(self.push(Op::Softmax { x, outer, len, inner: 1 }, value))
    }

    /// Normalizes over the last axis then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps < 0.0 {
            return Err(Error::config(format!("layer norm eps must be nonnegative, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("non-empty shape");
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(shape_err("layer_norm", &shape, self.shape(gain)));
        }
        let rows = self.value(x).numel() / n;
        let (xd, g, b) = (self.data(x), self.data(gain), self.data(bias));
        let mut xhat = vec![0.0; rows * n];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &xd[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            value,
        ))
    }

    /// Row lookup into a `[vocab × d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.value(table).dims2()?;
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index { index: id, bound: vocab });
            }
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            value,
        ))
    }

    /// Rows of `x` where `flags` is set are replaced by the vector `fill`.
    pub fn replace_rows(&mut self, x: Var, fill: Var, flags: &[bool]) -> Result<Var> {
        let (rows, d) = self.value(x).dims2()?;
        if self.shape(fill) != [d] || flags.len() != rows {
            return Err(shape_err("replace_rows", self.shape(x), self.shape(fill)));
        }
        let mut out = self.data(x).to_vec();
        let fd = self.data(fill);
        for (r, &f) in flags.iter().enumerate() {
            if f {
                out[r * d..(r + 1) * d].copy_from_slice(fd);
            }
        }
        let value = Tensor::new(&[rows, d], out)?;
        Ok(self.push(
            Op::ReplaceRows {
                x,
                fill,
                flags: flags.to_vec(),
            },
            value,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.value(x).dims2()?;
        let xd = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::Index { index: r, bound: n });
            }
            out.extend_from_slice(&xd[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(&[rows.len(), d], out)?;
        Ok(self.push(
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            value,
        ))
    }

    /// `scale · q_i·k_j` per batch item and head, shaped `[B·H, T, T]`.
    pub fn attn_scores(&mut self, q: Var, k: Var, layout: HeadLayout, scale: f64) -> Result<Var> {
        self.attn_scores_q(q, k, layout, Queries::all(layout.seq), scale)
    }

    /// [`Tape::attn_scores`] for selected query rows only. `q` is
    /// `[B·Q × d]` holding the rows at `positions` (`Q` per batch item);
    /// the result is `[B·H, Q, T]`.
    pub fn attn_scores_at(&mut self, q: Var, k: Var, layout: HeadLayout, positions: &[usize], scale: f64) -> Result<Var> {
        let queries = Queries::select(&layout, positions, "attn_scores_at")?;
        self.attn_scores_q(q, k, layout, queries, scale)
    }

    fn attn_scores_q(&mut self, q: Var, k: Var, layout: HeadLayout, queries: Queries, scale: f64) -> Result<Var> {
        check_queries("attn_scores", self.shape(q), &layout, &queries)?;
        layout.check("attn_scores", self.shape(k))?;
        let HeadLayout {
            batch,
            seq,
            heads,
            head_dim,
        } = layout;
        let nq = queries.per_batch;
        let d = layout.width();
        let mut out = vec![0.0; batch * heads * nq * seq];
        let (qd, kd) = (self.data(q), self.data(k));
        for b in 0..batch {
            for h in 0..heads {
                gemm(
                    nq,
                    head_dim,
                    seq,
                    scale,
                    View::rows(qd, queries.offset(&layout, b, h), d),
                    View::t(kd, layout.head_offset(b, h), d),
                    0.0,
                    &mut out,
                    (b * heads + h) * nq * seq,
                    seq,
                );
            }
        }
        let value = Tensor::new(&[batch * heads, nq, seq], out)?;
        Ok(self.push(
            Op::AttnScores {
                q,
                k,
                layout,
                queries,
                scale,
            },
            value,
        ))
    }

    /// Relative-position key term `scale · q_i·a[j−i+T−1]`, shaped `[B·H, T, T]`.
    /// The `[(2T−1) × head_dim]` table is shared by all heads.
    pub fn rel_scores(&mut self, q: Var, table: Var, layout: HeadLayout, scale: f64) -> Result<Var> {
        self.rel_scores_q(q, table, layout, Queries::all(layout.seq), scale)
    }

    /// [`Tape::rel_scores`] for selected query rows, shaped `[B·H, Q, T]`.
    pub fn rel_scores_at(&mut self, q: Var, table: Var, layout: HeadLayout, positions: &[usize], scale: f64) -> Result<Var> {
        let queries = Queries::select(&layout, positions, "rel_scores_at")?;
        self.rel_scores_q(q, table, layout, queries, scale)
    }

    fn rel_scores_q(&mut self, q: Var, table: Var, layout: HeadLayout, queries: Queries, scale: f64) -> Result<Var> {
        check_queries("rel_scores", self.shape(q), &layout, &queries)?;
        let HeadLayout {
            batch,
            seq,
            heads,
            head_dim,
        } = layout;
        let span = 2 * seq - 1;
        if self.shape(table) != [span, head_dim] {
            return Err(shape_err("rel_scores", self.shape(table), &[span, head_dim]));
        }
        let nq = queries.per_batch;
        let d = layout.width();
        let (qd, td) = (self.data(q), self.data(table));
        let mut z = vec![0.0; nq * span];
        let mut out = vec![0.0; batch * heads * nq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = queries.offset(&layout, b, h);
                gemm(nq, head_dim, span, scale, View::rows(qd, off, d), View::t(td, 0, head_dim), 0.0, &mut z, 0, span);
                let base = (b * heads + h) * nq * seq;
                for qi in 0..nq {
                    let i = queries.position(b, qi);
                    for j in 0..seq {
                        out[base + qi * seq + j] = z[qi * span + j + seq - 1 - i];
                    }
                }
            }
        }
        let value = Tensor::new(&[batch * heads, nq, seq], out)?;
        Ok(self.push(
            Op::RelScores {
                q,
                table,
                layout,
                queries,
                scale,
            },
            value,
        ))
    }

    /// Attention-weighted values: `[B·H, T, T] × [B·T × d] → [B·T × d]`.
    pub fn attn_apply(&mut self, p: Var, v: Var, layout: HeadLayout) -> Result<Var> {
        self.attn_apply_q(p, v, layout, Queries::all(layout.seq))
    }

    /// [`Tape::attn_apply`] for `Q` query rows per item:
    /// `[B·H, Q, T] × [B·T × d] → [B·Q × d]`.
    pub fn attn_apply_at(&mut self, p: Var, v: Var, layout: HeadLayout, positions: &[usize]) -> Result<Var> {
        let queries = Queries::select(&layout, positions, "attn_apply_at")?;
        self.attn_apply_q(p, v, layout, queries)
    }

    fn attn_apply_q(&mut self, p: Var, v: Var, layout: HeadLayout, queries: Queries) -> Result<Var> {
        layout.check("attn_apply", self.shape(v))?;
        let HeadLayout {
            batch,
            seq,
            heads,
            head_dim,
        } = layout;
        let nq = queries.per_batch;
        if self.shape(p) != [batch * heads, nq, seq] {
            return Err(shape_err("attn_apply", self.shape(p), &[batch * heads, nq, seq]));
        }
        let d = layout.width();
        let (pd, vd) = (self.data(p), self.data(v));
        let mut out = vec![0.0; queries.rows(&layout) * d];
        for b in 0..batch {
            for h in 0..heads {
                gemm(
                    nq,
                    seq,
                    head_dim,
                    1.0,
                    View::rows(pd, (b * heads + h) * nq * seq, seq),
                    View::rows(vd, layout.head_offset(b, h), d),
                    0.0,
                    &mut out,
                    queries.offset(&layout, b, h),
                    d,
                );
            }
        }
        let value = Tensor::new(&[queries.rows(&layout), d], out)?;
        Ok(self.push(Op::AttnApply { p, v, layout, queries }, value))
    }

    /// Rotates each `(2k, 2k+1)` pair of every head by its position angle.
    pub fn rope(&mut self, x: Var, layout: HeadLayout, rot: &Rotation) -> Result<Var> {
        self.rope_q(x, layout, Queries::all(layout.seq), rot)
    }

    /// [`Tape::rope`] for a `[B·Q × d]` buffer of rows at `positions`.
    pub fn rope_at(&mut self, x: Var, layout: HeadLayout, positions: &[usize], rot: &Rotation) -> Result<Var> {
        let queries = Queries::select(&layout, positions, "rope_at")?;
        self.rope_q(x, layout, queries, rot)
    }

    fn rope_q(&mut self, x: Var, layout: HeadLayout, queries: Queries, rot: &Rotation) -> Result<Var> {
        check_queries("rope", self.shape(x), &layout, &queries)?;
        if rot.seq != layout.seq || 2 * rot.half_dim != layout.head_dim {
            return Err(shape_err("rope", &[layout.seq, layout.head_dim], &[rot.seq, 2 * rot.half_dim]));
        }
        let mut out = self.data(x).to_vec();
        rotate_pairs(&mut out, &layout, &queries, rot, false);
        let value = Tensor::new(self.shape(x), out)?;
        Ok(self.push(
            Op::Rope {
                x,
                layout,
                queries,
                rot: rot.clone(),
            },
            value,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.value(logits).dims2()?;
        if targets.len() != n {
            return Err(shape_err("cross_entropy", &[n, c], &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index { index: bad, bound: c });
        }
        let value = softmax_forward(self.data(logits), &[n, c], n, c, 1, |_| c)?;
        let probs = value.into_data();
        let ld = self.data(logits);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let row = &ld[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                lse - row[t]
            })
            .sum::<f64>()
            / n as f64;
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        ))
    }

    /// Mean squared error over entries where `mask` is one.
    pub fn masked_mse(&mut self, pred: Var, target: &Tensor, mask: &Tensor) -> Result<Var> {
        let sp = self.shape(pred);
        if sp != target.shape() || sp != mask.shape() {
            return Err(shape_err("masked_mse", sp, target.shape()));
        }
        let count: f64 = mask.data().iter().sum();
        if count <= 0.0 {
            return Err(Error::DegenerateMask);
        }
        let loss = self
            .data(pred)
            .iter()
            .zip(target.data())
            .zip(mask.data())
            .map(|((p, t), m)| m * (p - t) * (p - t))
            .sum::<f64>()
            / count;
        Ok(self.push(
            Op::MaskedMse {
                pred,
                target: target.data().to_vec(),
                mask: mask.data().to_vec(),
                count,
            },
            Tensor::scalar(loss),
        ))
    }

    /// Accumulates d(loss)/d(param) into every trainable parameter reached.
    /// Calling it twice without zeroing adds the gradients twice.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.run_backward(loss)?;
        for (node, grad) in self.nodes.iter().zip(grads) {
            if let (Op::Leaf(Some(id)), Some(g)) = (&node.op, grad) {
                if let Some(dst) = store.get_mut(*id).grad_mut() {
                    dst.iter_mut().zip(&g).for_each(|(d, s)| *d += s);
                }
            }
        }
        Ok(())
    }

    /// Gradients of `loss` with respect to every leaf, parameters or not.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        Ok(Gradients {
            leaves: self.run_backward(loss)?,
        })
    }

    fn run_backward(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf(_)) {
                continue;
            }
            if let Some(g) = grads[idx].take() {
                self.backward_node(idx, &g, &mut grads);
            }
        }
        Ok(grads)
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("2-D");
                let n = self.shape(*b)[1];
                let (ad, bd) = (self.data(*a), self.data(*b));
                let ga = accumulate(grads, *a, m * k);
                gemm(m, n, k, 1.0, View::rows(g, 0, n), View::t(bd, 0, n), 1.0, ga, 0, k);
                let gb = accumulate(grads, *b, k * n);
                gemm(k, m, n, 1.0, View::t(ad, 0, k), View::rows(g, 0, n), 1.0, gb, 0, n);
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    let dst = accumulate(grads, *v, g.len());
                    dst.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::Sub(a, b) => {
                let ga = accumulate(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                let gb = accumulate(grads, *b, g.len());
                gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let ga = accumulate(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * bd[i];
                }
                let gb = accumulate(grads, *b, g.len());
                for i in 0..g.len() {
                    gb[i] += g[i] * ad[i];
                }
            }
            Op::Scale(x, s) => {
                let gx = accumulate(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(d, v)| *d += s * v);
            }
            Op::AddBroadcast(x, b) => {
                let gx = accumulate(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                let nb = self.value(*b).numel();
                let gb = accumulate(grads, *b, nb);
                for (i, s) in g.iter().enumerate() {
                    gb[i % nb] += s;
                }
            }
            Op::Reshape(x) => {
                let gx = accumulate(grads, *x, g.len());
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                let gx = accumulate(grads, *x, n);
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Gelu { x, tanh } => {
                let xd = self.data(*x);
                let gx = accumulate(grads, *x, g.len());
                for i in 0..g.len() {
                    let (v, t) = (xd[i], tanh[i]);
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                    gx[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
                }
            }
            Op::Relu(x) => {
                let xd = self.data(*x);
                let gx = accumulate(grads, *x, g.len());
                for i in 0..g.len() {
                    if xd[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                let gx = accumulate(grads, *x, g.len());
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..*len).map(|j| out[at(j)] * g[at(j)]).sum();
                        for j in 0..*len {
                            gx[at(j)] += out[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = self.value(*gain).numel();
                let rows = rstd.len();
                let gd = self.data(*gain);
                {
                    let gg = accumulate(grads, *gain, n);
                    for r in 0..rows {
                        for j in 0..n {
                            gg[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                {
                    let gb = accumulate(grads, *bias, n);
                    for r in 0..rows {
                        for j in 0..n {
                            gb[j] += g[r * n + j];
                        }
                    }
                }
                let gx = accumulate(grads, *x, rows * n);
                for r in 0..rows {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..n {
                        let dh = g[r * n + j] * gd[j];
                        mean_d += dh;
                        mean_dx += dh * xhat[r * n + j];
                    }
                    mean_d /= n as f64;
                    mean_dx /= n as f64;
                    for j in 0..n {
                        let dh = g[r * n + j] * gd[j];
                        gx[r * n + j] += rstd[r] * (dh - mean_d - xhat[r * n + j] * mean_dx);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let (vocab, d) = self.value(*table).dims2().expect("2-D");
                let gt = accumulate(grads, *table, vocab * d);
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[r * d + j];
                    }
                }
            }
            Op::ReplaceRows { x, fill, flags } => {
                let d = self.value(*fill).numel();
                {
                    let gx = accumulate(grads, *x, g.len());
                    for (r, &f) in flags.iter().enumerate() {
                        if !f {
                            for j in 0..d {
                                gx[r * d + j] += g[r * d + j];
                            }
                        }
                    }
                }
                let gf = accumulate(grads, *fill, d);
                for (r, &f) in flags.iter().enumerate() {
                    if f {
                        for j in 0..d {
                            gf[j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let (n, d) = self.value(*x).dims2().expect("2-D");
                let gx = accumulate(grads, *x, n * d);
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        gx[r * d + j] += g[i * d + j];
                    }
                }
            }
            Op::AttnScores {
                q,
                k,
                layout,
                queries,
                scale,
            } => {
                let HeadLayout {
                    batch,
                    seq,
                    heads,
                    head_dim,
                } = *layout;
                let nq = queries.per_batch;
                let d = layout.width();
                let (qd, kd) = (self.data(*q), self.data(*k));
                {
                    let gq = accumulate(grads, *q, queries.rows(layout) * d);
                    for b in 0..batch {
                        for h in 0..heads {
                            let goff = (b * heads + h) * nq * seq;
                            let (qoff, koff) = (queries.offset(layout, b, h), layout.head_offset(b, h));
                            gemm(nq, seq, head_dim, *scale, View::rows(g, goff, seq), View::rows(kd, koff, d), 1.0, gq, qoff, d);
                        }
                    }
                }
                let gk = accumulate(grads, *k, batch * seq * d);
                for b in 0..batch {
                    for h in 0..heads {
                        let goff = (b * heads + h) * nq * seq;
                        let (qoff, koff) = (queries.offset(layout, b, h), layout.head_offset(b, h));
                        gemm(seq, nq, head_dim, *scale, View::t(g, goff, seq), View::rows(qd, qoff, d), 1.0, gk, koff, d);
                    }
                }
            }
            Op::RelScores {
                q,
                table,
                layout,
                queries,
                scale,
            } => {
                let HeadLayout {
                    batch,
                    seq,
                    heads,
                    head_dim,
                } = *layout;
                let nq = queries.per_batch;
                let d = layout.width();
                let span = 2 * seq - 1;
                let (qd, td) = (self.data(*q), self.data(*table));
                let mut dz = vec![0.0; nq * span];
                let mut gq_local = vec![0.0; queries.rows(layout) * d];
                let mut gt_local = vec![0.0; span * head_dim];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = queries.offset(layout, b, h);
                        let base = (b * heads + h) * nq * seq;
                        dz.fill(0.0);
                        for qi in 0..nq {
                            let i = queries.position(b, qi);
                            for j in 0..seq {
                                dz[qi * span + j + seq - 1 - i] = g[base + qi * seq + j];
                            }
                        }
                        gemm(nq, span, head_dim, *scale, View::rows(&dz, 0, span), View::rows(td, 0, head_dim), 1.0, &mut gq_local, off, d);
                        gemm(span, nq, head_dim, *scale, View::t(&dz, 0, span), View::rows(qd, off, d), 1.0, &mut gt_local, 0, head_dim);
                    }
                }
                let gq = accumulate(grads, *q, gq_local.len());
                gq.iter_mut().zip(&gq_local).for_each(|(a, b)| *a += b);
                let gt = accumulate(grads, *table, gt_local.len());
                gt.iter_mut().zip(&gt_local).for_each(|(a, b)| *a += b);
            }
            Op::AttnApply { p, v, layout, queries } => {
                let HeadLayout {
                    batch,
                    seq,
                    heads,
                    head_dim,
                } = *layout;
                let nq = queries.per_batch;
                let d = layout.width();
                let (pd, vd) = (self.data(*p), self.data(*v));
                {
                    let gp = accumulate(grads, *p, batch * heads * nq * seq);
                    for b in 0..batch {
                        for h in 0..heads {
                            let (qoff, voff) = (queries.offset(layout, b, h), layout.head_offset(b, h));
                            let poff = (b * heads + h) * nq * seq;
                            gemm(nq, head_dim, seq, 1.0, View::rows(g, qoff, d), View::t(vd, voff, d), 1.0, gp, poff, seq);
                        }
                    }
                }
                let gv = accumulate(grads, *v, batch * seq * d);
                for b in 0..batch {
                    for h in 0..heads {
                        let (qoff, voff) = (queries.offset(layout, b, h), layout.head_offset(b, h));
                        let poff = (b * heads + h) * nq * seq;
                        gemm(seq, nq, head_dim, 1.0, View::t(pd, poff, seq), View::rows(g, qoff, d), 1.0, gv, voff, d);
                    }
                }
            }
            Op::Rope { x, layout, queries, rot } => {
                let mut back = g.to_vec();
                rotate_pairs(&mut back, layout, queries, rot, true);
                let gx = accumulate(grads, *x, g.len());
                gx.iter_mut().zip(&back).for_each(|(d, s)| *d += s);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = targets.len();
                let c = probs.len() / n;
                let gl = accumulate(grads, *logits, n * c);
                let s = g[0] / n as f64;
                for (i, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let one = if j == t { 1.0 } else { 0.0 };
                        gl[i * c + j] += s * (probs[i * c + j] - one);
                    }
                }
            }
            Op::MaskedMse {
                pred,
                target,
                mask,
                count,
            } => {
                let pd = self.data(*pred);
                let gp = accumulate(grads, *pred, pd.len());
                let s = 2.0 * g[0] / count;
                for i in 0..pd.len() {
                    gp[i] += s * mask[i] * (pd[i] - target[i]);
                }
            }
        }
    }
}

/// `tanh` through one polynomial `exp`. Branch free, so loops over it
/// vectorize; `tanh(±20)` already rounds to `±1`.
#[inline]
fn fast_tanh(u: f64) -> f64 {
    let e = exp_poly(2.0 * u.clamp(-20.0, 20.0));
    1.0 - 2.0 / (e + 1.0)
}

/// `exp(x)` for `|x| ≤ 700` via `x = k·ln2 + r` and a degree-13 Taylor
/// polynomial in `|r| ≤ ln2/2`; within a couple of ulps of libm.
#[inline]
fn exp_poly(x: f64) -> f64 {
    const SHIFT: f64 = 6755399441055744.0; // 1.5 · 2^52
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let t = x * std::f64::consts::LOG2_E + SHIFT;
    let k = t - SHIFT;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    let mut p = 1.0 / 6_227_020_800.0;
    for c in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    // The low mantissa bits of `t` hold k; adding the bias builds 2^k.
    let scale = f64::from_bits((t.to_bits().wrapping_add(1023)) << 52);
    p * scale
}

fn softmax_forward(
    x: &[f64],
    shape: &[usize],
    outer: usize,
    len: usize,
    inner: usize,
    visible: impl Fn(usize) -> usize,
) -> Result<Tensor> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        let visible = visible(o);
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let m = (0..visible).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..visible {
                let e = (x[at(j)] - m).exp();
                out[at(j)] = e;
                s += e;
            }
            for j in 0..visible {
                out[at(j)] /= s;
            }
        }
    }
    Tensor::new(shape, out)
}

fn check_queries(op: &'static str, shape: &[usize], layout: &HeadLayout, queries: &Queries) -> Result<()> {
    let want = [queries.rows(layout), layout.width()];
    if shape != want {
        return Err(shape_err(op, shape, &want));
    }
    Ok(())
}

fn rotate_pairs(buf: &mut [f64], layout: &HeadLayout, queries: &Queries, rot: &Rotation, inverse: bool) {
    let d = layout.width();
    let sign = if inverse { -1.0 } else { 1.0 };
    let nq = queries.per_batch;
    for b in 0..layout.batch {
        for qi in 0..nq {
            let t = queries.position(b, qi);
            let row = (b * nq + qi) * d;
            for h in 0..layout.heads {
                let base = row + h * layout.head_dim;
                for k in 0..rot.half_dim {
                    let (c, s) = (rot.cos[t * rot.half_dim + k], sign * rot.sin[t * rot.half_dim + k]);
                    let (x0, x1) = (buf[base + 2 * k], buf[base + 2 * k + 1]);
                    buf[base + 2 * k] = x0 * c - x1 * s;
                    buf[base + 2 * k + 1] = x0 * s + x1 * c;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_exp_tracks_libm() {
        for i in -7000..=7000 {
            let x = i as f64 * 0.1 + 0.0123;
            let (a, b) = (exp_poly(x), x.exp());
            assert!(((a - b) / b).abs() < 4.0 * f64::EPSILON, "exp({x}): {a} vs {b}");
        }
    }

    #[test]
    fn fast_tanh_tracks_libm() {
        for i in -3000..=3000 {
            let u = i as f64 * 0.01;
            assert!((fast_tanh(u) - u.tanh()).abs() < 1e-15, "tanh({u})");
        }
    }
}
