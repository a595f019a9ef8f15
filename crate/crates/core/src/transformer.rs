//! Encoder-only pre-norm transformer with pluggable positional encodings.

use std::io::Write;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{HeadLayout, ParamId, ParamStore, Rotation, Tape, Tensor, Var};
use crate::pe::{self, PeKind, PeSpec, RotaryAngles};
use crate::rng::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Bidirectional,
    Causal,
}

/// How raw inputs become `d_model` vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum InputMode {
    /// Categorical tokens looked up in an embedding table.
    Tokens { vocab: usize },
    /// One real value per position through a learned `1 → d_model` map;
    /// masked positions use a learned mask vector instead.
    Scalar,
}

fn default_layers() -> usize {
    4
}
fn default_heads() -> usize {
    1
}
fn default_ffn() -> usize {
    4
}
fn default_activation() -> Activation {
    Activation::Gelu
}
fn default_init_sd() -> f64 {
    0.02
}
fn default_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    pub d_model: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    pub context: usize,
    pub input: InputMode,
    /// Outputs per token: class count or 1 for regression.
    pub output_dim: usize,
    pub pe: PeSpec,
    /// Derived from the PE kind when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<MaskMode>,
    #[serde(default = "default_ffn")]
    pub ffn_mult: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_init_sd")]
    pub init_sd: f64,
    #[serde(default = "default_eps")]
    pub ln_eps: f64,
}

impl ModelConfig {
    pub fn new(d_model: usize, context: usize, input: InputMode, output_dim: usize, pe: PeSpec) -> Self {
        ModelConfig {
            n_layers: default_layers(),
            d_model,
            n_heads: default_heads(),
            context,
            input,
            output_dim,
            pe,
            mask: None,
            ffn_mult: default_ffn(),
            activation: default_activation(),
            init_sd: default_init_sd(),
            ln_eps: default_eps(),
        }
    }

    pub fn mask_mode(&self) -> MaskMode {
        self.mask.unwrap_or(if self.pe.kind.causal() {
            MaskMode::Causal
        } else {
            MaskMode::Bidirectional
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.context == 0 || self.output_dim == 0 || self.ffn_mult == 0 {
            return Err(Error::config("model sizes must be positive"));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if let InputMode::Tokens { vocab: 0 } = self.input {
            return Err(Error::config("vocabulary must be non-empty"));
        }
        if !(self.init_sd >= 0.0) || !(self.ln_eps >= 0.0) {
            return Err(Error::config("init_sd and ln_eps must be nonnegative"));
        }
        self.pe.validate(self.context)?;
        match self.pe.kind {
            PeKind::Rope1d if !self.head_dim().is_multiple_of(2) => Err(Error::config(format!(
                "rotary PE needs an even head dimension, got {}",
                self.head_dim()
            ))),
            PeKind::Fixed1d if !self.d_model.is_multiple_of(2) => Err(Error::config("1d-fixed PE needs an even d_model")),
            PeKind::Fixed2d if !self.d_model.is_multiple_of(4) => Err(Error::config("2d-fixed PE needs d_model divisible by 4")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: (ParamId, ParamId),
    wq: (ParamId, ParamId),
    wk: (ParamId, ParamId),
    wv: (ParamId, ParamId),
    wo: (ParamId, ParamId),
    rel: Option<ParamId>,
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
enum Embed {
    Tokens(ParamId),
    Scalar { w: ParamId, b: ParamId, mask: ParamId },
}

/// Model input for one mini-batch, flattened `[batch × context]`.
#[derive(Debug, Clone, Copy)]
pub enum Input<'a> {
    Tokens(&'a [usize]),
    Scalar { values: &'a [f64], masked: &'a [bool] },
}

impl Input<'_> {
    fn len(&self) -> usize {
        match self {
            Input::Tokens(t) => t.len(),
            Input::Scalar { values, .. } => values.len(),
        }
    }
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Final-layer-normed hidden states, `[B·T × d_model]`.
    pub hidden: Var,
    /// Post-softmax attention per layer, `[B·H, T, T]`.
    pub attention: Vec<Var>,
    pub batch: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    embed: Embed,
    pe: Option<ParamId>,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
    head: (ParamId, ParamId),
    rotation: Option<Rotation>,
}

struct Init {
    rng: rng::Rng,
    normal: Normal<f64>,
}

impl Init {
    fn weight(&mut self, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| self.normal.sample(&mut self.rng)).with_grad()
    }
}

impl Model {
    /// Builds a model from `seed`. Non-PE weights, PE values and (elsewhere)
    /// data order use separate streams, so two configs differing only in
    /// the PE get bit-identical non-PE weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let d = config.d_model;
        let t = config.context;
        let normal = Normal::new(0.0, config.init_sd).map_err(|e| Error::config(e.to_string()))?;
        let mut w = Init {
            rng: rng::stream_rng(seed, stream::WEIGHTS),
            normal,
        };
        let zeros = |shape: &[usize]| Tensor::zeros(shape).with_grad();
        let ones = |shape: &[usize]| Tensor::full(shape, 1.0).with_grad();
        let mut p = ParamStore::new();

        let embed = match config.input {
            InputMode::Tokens { vocab } => Embed::Tokens(p.add("embed", w.weight(&[vocab, d]))),
            InputMode::Scalar => Embed::Scalar {
                w: p.add("in_proj.w", w.weight(&[1, d])),
                b: p.add("in_proj.b", zeros(&[d])),
                mask: p.add("mask_embed", w.weight(&[d])),
            },
        };
        let f = config.ffn_mult * d;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let mut lin = |p: &mut ParamStore, name: &str, i: usize, o: usize| {
                (
                    p.add(format!("block{l}.{name}.w"), w.weight(&[i, o])),
                    p.add(format!("block{l}.{name}.b"), zeros(&[o])),
                )
            };
            let ln1 = (p.add(format!("block{l}.ln1.g"), ones(&[d])), p.add(format!("block{l}.ln1.b"), zeros(&[d])));
            let wq = lin(&mut p, "attn.q", d, d);
            let wk = lin(&mut p, "attn.k", d, d);
            let wv = lin(&mut p, "attn.v", d, d);
            let wo = lin(&mut p, "attn.o", d, d);
            let ln2 = (p.add(format!("block{l}.ln2.g"), ones(&[d])), p.add(format!("block{l}.ln2.b"), zeros(&[d])));
            let ff1 = lin(&mut p, "ffn.1", d, f);
            let ff2 = lin(&mut p, "ffn.2", f, d);
            blocks.push(Block {
                ln1,
                wq,
                wk,
                wv,
                wo,
                rel: None,
                ln2,
                ff1,
                ff2,
            });
        }
        let ln_f = (p.add("ln_f.g", ones(&[d])), p.add("ln_f.b", zeros(&[d])));
        let head = (
            p.add("head.w", w.weight(&[d, config.output_dim])),
            p.add("head.b", zeros(&[config.output_dim])),
        );

        // Everything positional comes from its own stream, drawn last.
        let pe_seed = config.pe.seed.unwrap_or_else(|| rng::derive_seed(seed, stream::PE, 0));
        let table = match config.pe.kind {
            PeKind::Fixed1d => Some(pe::build_1d_fixed(t, d)?),
            PeKind::Fixed2d => {
                let (rows, cols) = config.pe.grid.expect("validated");
                Some(pe::build_2d_fixed(rows, cols, d)?)
            }
            PeKind::Random => Some(pe::build_random(t, d, pe_seed)?),
            PeKind::Learnable => Some(pe::build_learnable(t, d, config.pe.sigma.expect("validated"), pe_seed)?),
            PeKind::Relative1d | PeKind::Rope1d | PeKind::Nope | PeKind::CNope => None,
        };
        let pe = table.map(|tb| {
            let mut v = tb.values;
            v.set_requires_grad(tb.trainable);
            p.add("pe", v)
        });
        if config.pe.kind == PeKind::Relative1d {
            let mut prng = Init {
                rng: rng::seeded(pe_seed),
                normal,
            };
            for (l, b) in blocks.iter_mut().enumerate() {
                b.rel = Some(p.add(format!("block{l}.rel"), prng.weight(&[2 * t - 1, config.head_dim()])));
            }
        }
        let rotation = match config.pe.kind {
            PeKind::Rope1d => Some(RotaryAngles::new(t, config.head_dim())?.rotation()),
            _ => None,
        };
        Ok(Model {
            config,
            params: p,
            embed,
            pe,
            blocks,
            ln_f,
            head,
            rotation,
        })
    }

    /// Position table currently in use, if the PE is additive.
    pub fn pe_table(&self) -> Option<&Tensor> {
        self.pe.map(|id| self.params.get(id))
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    fn linear(&self, params: &ParamStore, tape: &mut Tape, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        let wv = tape.param(params, w);
        let bv = tape.param(params, b);
        let y = tape.matmul(x, wv)?;
        tape.add_broadcast(y, bv)
    }

    fn norm(&self, params: &ParamStore, tape: &mut Tape, x: Var, (g, b): (ParamId, ParamId)) -> Result<Var> {
        let gv = tape.param(params, g);
        let bv = tape.param(params, b);
        tape.layer_norm(x, gv, bv, self.config.ln_eps)
    }

    /// Runs the encoder and returns final hidden states and attention maps.
    pub fn forward(&self, tape: &mut Tape, input: Input<'_>) -> Result<Forward> {
        self.forward_with(&self.params, tape, input)
    }

    /// As [`Model::forward`] but reading parameter values from `params`,
    /// which must have this model's layout.
    pub fn forward_with(&self, params: &ParamStore, tape: &mut Tape, input: Input<'_>) -> Result<Forward> {
        self.encode(params, tape, input, None)
    }

    /// Output head at selected flat rows (`b·T + t`), computing the last
    /// block only where those rows depend on it. The result equals
    /// `outputs_at` after a full forward pass; the returned [`Forward`]
    /// holds `[B·Q × d]` hidden states and last-layer attention shaped
    /// `[B·H, Q, T]`. Rows must be grouped by batch item in ascending item
    /// order with the same count `Q` per item.
    pub fn probe(&self, tape: &mut Tape, input: Input<'_>, rows: &[usize]) -> Result<(Forward, Var)> {
        self.probe_with(&self.params, tape, input, rows)
    }

    pub fn probe_with(&self, params: &ParamStore, tape: &mut Tape, input: Input<'_>, rows: &[usize]) -> Result<(Forward, Var)> {
        let fwd = self.encode(params, tape, input, Some(rows))?;
        let out = self.linear(params, tape, fwd.hidden, self.head)?;
        Ok((fwd, out))
    }

    fn encode(&self, params: &ParamStore, tape: &mut Tape, input: Input<'_>, probe: Option<&[usize]>) -> Result<Forward> {
        let c = &self.config;
        let t = c.context;
        let n = input.len();
        if n == 0 || !n.is_multiple_of(t) {
            return Err(Error::Shape {
                op: "forward",
                lhs: vec![n],
                rhs: vec![t],
            });
        }
        let batch = n / t;
        let positions = match probe {
            Some(rows) => Some(probe_positions(rows, batch, t)?),
            None => None,
        };
        let layout = HeadLayout {
            batch,
            seq: t,
            heads: c.n_heads,
            head_dim: c.head_dim(),
        };
        let mut x = match (&self.embed, input) {
            (Embed::Tokens(table), Input::Tokens(ids)) => {
                let tv = tape.param(params, *table);
                tape.embedding(tv, ids)?
            }
            (Embed::Scalar { w, b, mask }, Input::Scalar { values, masked }) => {
                if masked.len() != n {
                    return Err(Error::Shape {
                        op: "forward",
                        lhs: vec![masked.len()],
                        rhs: vec![n],
                    });
                }
                let xv = tape.leaf(Tensor::new(&[n, 1], values.to_vec())?);
                let h = self.linear(params, tape, xv, (*w, *b))?;
                let mv = tape.param(params, *mask);
                tape.replace_rows(h, mv, masked)?
            }
            _ => return Err(Error::config("input kind does not match the model's input mode")),
        };
        if let Some(id) = self.pe {
            let pv = tape.param(params, id);
            let x3 = tape.reshape(x, &[batch, t, c.d_model])?;
            let y = tape.add_broadcast(x3, pv)?;
            x = tape.reshape(y, &[n, c.d_model])?;
        }
        let scale = 1.0 / (c.head_dim() as f64).sqrt();
        let causal = c.mask_mode() == MaskMode::Causal;
        let mut attention = Vec::with_capacity(self.blocks.len());
        let last = self.blocks.len().saturating_sub(1);
        for (l, b) in self.blocks.iter().enumerate() {
            // In probe mode the last block only needs its query-side work
            // at the probe rows; keys and values still cover every position.
            let sel = if l == last { probe.zip(positions.as_deref()) } else { None };
            let h = self.norm(params, tape, x, b.ln1)?;
            let hq = match sel {
                Some((rows, _)) => tape.gather_rows(h, rows)?,
                None => h,
            };
            let mut q = self.linear(params, tape, hq, b.wq)?;
            let mut k = self.linear(params, tape, h, b.wk)?;
            let v = self.linear(params, tape, h, b.wv)?;
            if let Some(rot) = &self.rotation {
                q = match sel {
                    Some((_, pos)) => tape.rope_at(q, layout, pos, rot)?,
                    None => tape.rope(q, layout, rot)?,
                };
                k = tape.rope(k, layout, rot)?;
            }
            let mut s = match sel {
                Some((_, pos)) => tape.attn_scores_at(q, k, layout, pos, scale)?,
                None => tape.attn_scores(q, k, layout, scale)?,
            };
            if let Some(rel) = b.rel {
                let rv = tape.param(params, rel);
                let r = match sel {
                    Some((_, pos)) => tape.rel_scores_at(q, rv, layout, pos, scale)?,
                    None => tape.rel_scores(q, rv, layout, scale)?,
                };
                s = tape.add(s, r)?;
            }
            let p = match (sel, causal) {
                (Some((_, pos)), true) => tape.causal_softmax_at(s, pos)?,
                (None, true) => tape.causal_softmax(s)?,
                (_, false) => tape.softmax(s, 2)?,
            };
            attention.push(p);
            let a = match sel {
                Some((_, pos)) => tape.attn_apply_at(p, v, layout, pos)?,
                None => tape.attn_apply(p, v, layout)?,
            };
            let o = self.linear(params, tape, a, b.wo)?;
            if let Some((rows, _)) = sel {
                x = tape.gather_rows(x, rows)?;
            }
            x = tape.add(x, o)?;
            let h = self.norm(params, tape, x, b.ln2)?;
            let f = self.linear(params, tape, h, b.ff1)?;
            let f = match c.activation {
                Activation::Gelu => tape.gelu(f),
                Activation::Relu => tape.relu(f),
            };
            let f = self.linear(params, tape, f, b.ff2)?;
            x = tape.add(x, f)?;
        }
        let hidden = self.norm(params, tape, x, self.ln_f)?;
        Ok(Forward {
            hidden,
            attention,
            batch,
        })
    }

    /// Output head applied to every position, `[B·T × output_dim]`.
    pub fn outputs(&self, tape: &mut Tape, fwd: &Forward) -> Result<Var> {
        self.outputs_with(&self.params, tape, fwd)
    }

    pub fn outputs_with(&self, params: &ParamStore, tape: &mut Tape, fwd: &Forward) -> Result<Var> {
        self.linear(params, tape, fwd.hidden, self.head)
    }

    /// Output head applied to selected flat positions only.
    pub fn outputs_at(&self, tape: &mut Tape, fwd: &Forward, rows: &[usize]) -> Result<Var> {
        self.outputs_at_with(&self.params, tape, fwd, rows)
    }

    pub fn outputs_at_with(&self, params: &ParamStore, tape: &mut Tape, fwd: &Forward, rows: &[usize]) -> Result<Var> {
        let h = tape.gather_rows(fwd.hidden, rows)?;
        self.linear(params, tape, h, self.head)
    }
}

/// Splits flat probe rows into per-item positions, checking they are
/// grouped by batch item with an equal count per item.
fn probe_positions(rows: &[usize], batch: usize, context: usize) -> Result<Vec<usize>> {
    let bad = |why: &str| Error::contract(format!("probe rows: {why}"));
    if rows.is_empty() || !rows.len().is_multiple_of(batch) {
        return Err(bad("count must be a positive multiple of the batch size"));
    }
    let per = rows.len() / batch;
    rows.iter()
        .enumerate()
        .map(|(i, &r)| {
            if r / context != i / per || r >= batch * context {
                Err(bad("rows must be grouped by batch item in order"))
            } else {
                Ok(r % context)
            }
        })
        .collect()
}

/// Attention weights averaged over a batch, stored `[layer][head][i][j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub n_layers: usize,
    pub n_heads: usize,
    pub context: usize,
    pub weights: Vec<f64>,
}

impl AttentionRecord {
    pub fn map(&self, layer: usize, head: usize) -> &[f64] {
        let tt = self.context * self.context;
        let start = (layer * self.n_heads + head) * tt;
        &self.weights[start..start + tt]
    }

    pub fn at(&self, layer: usize, head: usize, i: usize, j: usize) -> f64 {
        self.map(layer, head)[i * self.context + j]
    }

    /// Batch mean of the maps recorded on `tape` by one forward pass.
    pub fn from_forward(tape: &Tape, fwd: &Forward, n_heads: usize) -> AttentionRecord {
        let shape = tape.shape(fwd.attention[0]);
        let context = shape[1];
        let tt = context * context;
        let mut weights = vec![0.0; fwd.attention.len() * n_heads * tt];
        for (l, var) in fwd.attention.iter().enumerate() {
            let data = tape.value(*var).data();
            for b in 0..fwd.batch {
                for h in 0..n_heads {
                    let src = &data[(b * n_heads + h) * tt..(b * n_heads + h + 1) * tt];
                    let dst = &mut weights[(l * n_heads + h) * tt..(l * n_heads + h + 1) * tt];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
        }
        let inv = 1.0 / fwd.batch as f64;
        weights.iter_mut().for_each(|w| *w *= inv);
        AttentionRecord {
            n_layers: fwd.attention.len(),
            n_heads,
            context,
            weights,
        }
    }

    /// Rows `layer,head,i,j,weight` after a header line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "layer,head,i,j,weight")?;
        for l in 0..self.n_layers {
            for h in 0..self.n_heads {
                for i in 0..self.context {
                    for j in 0..self.context {
                        writeln!(w, "{l},{h},{i},{j},{:e}", self.at(l, h, i, j))?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_csv<R: std::io::BufRead>(r: R, origin: &str) -> Result<AttentionRecord> {
        let mut rows: Vec<(usize, usize, usize, usize, f64)> = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') || t.starts_with("layer,") {
                continue;
            }
            let bad = |msg: &str| Error::Parse {
                path: origin.to_string(),
                line: n + 1,
                msg: msg.to_string(),
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad("expected 5 fields"));
            }
            let idx = |s: &str| s.trim().parse::<usize>().map_err(|_| bad("bad index"));
            let w = f[4].trim().parse::<f64>().map_err(|_| bad("bad weight"))?;
            rows.push((idx(f[0])?, idx(f[1])?, idx(f[2])?, idx(f[3])?, w));
        }
        let max = |k: fn(&(usize, usize, usize, usize, f64)) -> usize| rows.iter().map(k).max().map_or(0, |m| m + 1);
        let (n_layers, n_heads) = (max(|r| r.0), max(|r| r.1));
        let context = max(|r| r.2).max(max(|r| r.3));
        if rows.len() != n_layers * n_heads * context * context || rows.is_empty() {
            return Err(Error::Parse {
                path: origin.to_string(),
                line: rows.len() + 1,
                msg: "attention table is incomplete".into(),
            });
        }
        let mut weights = vec![0.0; rows.len()];
        for (l, h, i, j, w) in rows {
            weights[((l * n_heads + h) * context + i) * context + j] = w;
        }
        Ok(AttentionRecord {
            n_layers,
            n_heads,
            context,
            weights,
        })
    }
}

/// Attention averaged over the supplied batch.
pub fn extract_attention(model: &Model, input: Input<'_>) -> Result<AttentionRecord> {
    if input.len() == 0 {
        return Err(Error::Degenerate("empty batch".into()));
    }
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, input)?;
    Ok(AttentionRecord::from_forward(&tape, &fwd, model.config.n_heads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pe::PeKind;

    #[test]
    fn probe_matches_full_forward() {
        let tokens: Vec<usize> = (0..48).map(|i| (i * 7 + 3) % 5).collect();
        let rows = [5, 16, 32 + 15];
        for kind in PeKind::ALL {
            let pe = match kind {
                PeKind::Fixed2d => PeSpec::fixed_2d(4, 4),
                PeKind::Learnable => PeSpec::learnable(0.3),
                k => PeSpec::new(k),
            };
            let mut cfg = ModelConfig::new(16, 16, InputMode::Tokens { vocab: 5 }, 4, pe);
            cfg.n_layers = 2;
            cfg.n_heads = 2;
            cfg.init_sd = 0.3;
            let model = Model::new(cfg, 11).unwrap();
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, Input::Tokens(&tokens)).unwrap();
            let full = model.outputs_at(&mut tape, &fwd, &rows).unwrap();
            let (_, probe) = model.probe(&mut tape, Input::Tokens(&tokens), &rows).unwrap();
            let (a, b) = (tape.value(full).data(), tape.value(probe).data());
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12, "{kind}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn probe_rejects_ungrouped_rows() {
        let cfg = ModelConfig::new(8, 4, InputMode::Tokens { vocab: 3 }, 2, PeSpec::new(PeKind::Nope));
        let model = Model::new(cfg, 1).unwrap();
        let mut tape = Tape::new();
        let tokens = [0usize; 8];
        assert!(model.probe(&mut tape, Input::Tokens(&tokens), &[5, 1]).is_err());
        assert!(model.probe(&mut tape, Input::Tokens(&tokens), &[1]).is_err());
    }
}
