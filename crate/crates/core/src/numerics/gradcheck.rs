//! Finite-difference verification of tape gradients.
//!
//! The error of one check is normwise over every perturbed entry:
//! `‖g_tape − g_fd‖₂ / max(‖g_tape‖₂, ‖g_fd‖₂, 1e-8)`. Elementwise ratios
//! blow up on entries whose true gradient is zero, where central
//! differences only return rounding noise.

use std::fmt;

use rand::Rng as _;

use super::{HeadLayout, ParamStore, Rotation, Tape, Tensor, Var};
use crate::error::Result;
use crate::rng;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Outcome of checking one op or model.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub entries: usize,
    pub rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.results.iter().map(|r| r.rel_err).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24} {:>8} {:>12}  status", "check", "entries", "max_rel_err")?;
        for r in &self.results {
            let status = if r.passed { "ok" } else { "FAIL" };
            writeln!(f, "{:<24} {:>8} {:>12.3e}  {status}", r.name, r.entries, r.rel_err)?;
        }
        write!(f, "tolerance {:.0e}: {}", self.tolerance, if self.passed() { "all passed" } else { "FAILED" })
    }
}

/// Knobs for a check run. `corrupt` names a check whose tape gradient is
/// deliberately perturbed, to prove the harness reports failures.
#[derive(Debug, Clone)]
pub struct CheckOptions {
    pub step: f64,
    pub tolerance: f64,
    pub corrupt: Option<String>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            corrupt: None,
        }
    }
}

fn normwise(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-8)
}

fn finish(name: &str, mut analytic: Vec<f64>, numeric: Vec<f64>, opts: &CheckOptions) -> CheckResult {
    if opts.corrupt.as_deref() == Some(name) {
        analytic[0] += 0.05 * (1.0 + analytic[0].abs());
    }
    let rel_err = normwise(&analytic, &numeric);
    CheckResult {
        name: name.to_string(),
        entries: analytic.len(),
        rel_err,
        passed: rel_err <= opts.tolerance,
    }
}

/// Checks the gradient of a scalar function with respect to every entry of
/// every input tensor. `f` receives the inputs as tape leaves.
pub fn check_inputs<F>(name: &str, inputs: &[Tensor], f: F, opts: &CheckOptions) -> Result<CheckResult>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.gradients(out)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let n = inputs[i].numel();
        match grads.wrt(*v) {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(std::iter::repeat_n(0.0, n)),
        }
        for j in 0..n {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + opts.step;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - opts.step;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * opts.step));
        }
    }
    Ok(finish(name, analytic, numeric, opts))
}

/// Checks the gradient of a scalar loss with respect to every trainable
/// parameter of `store`. `f` builds the loss on a fresh tape.
pub fn check_params<F>(name: &str, store: &mut ParamStore, f: F, opts: &CheckOptions) -> Result<CheckResult>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss, store)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let ids: Vec<_> = store.ids().filter(|id| store.get(*id).requires_grad()).collect();
    for id in ids {
        analytic.extend_from_slice(store.get(id).grad().expect("trainable"));
        for j in 0..store.get(id).numel() {
            let orig = store.get(id).data()[j];
            let mut value_at = |x: f64| -> Result<f64> {
                store.get_mut(id).data_mut()[j] = x;
                let mut tape = Tape::new();
                let loss = f(&mut tape, store)?;
                tape.value(loss).item()
            };
            let up = value_at(orig + opts.step)?;
            let down = value_at(orig - opts.step)?;
            store.get_mut(id).data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * opts.step));
        }
    }
    store.zero_grad();
    Ok(finish(name, analytic, numeric, opts))
}

fn uniform(rng: &mut rng::Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
}

/// Uniform in `[-2, 2]` but at least `gap` away from zero, for ops with a
/// kink at the origin.
fn away_from_zero(rng: &mut rng::Rng, shape: &[usize], gap: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(gap..2.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `Σ w ⊙ y` for a fixed random `w`, so that every output entry matters.
fn weighted(tape: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let wv = tape.leaf(w.clone());
    let p = tape.mul(y, wv)?;
    Ok(tape.sum(p))
}

/// Rotation table with arbitrary angles; the op does not care where they came from.
pub(crate) fn test_rotation(seq: usize, half_dim: usize) -> Rotation {
    let angles: Vec<f64> = (0..seq * half_dim).map(|i| 0.37 * i as f64 + 0.1).collect();
    Rotation {
        seq,
        half_dim,
        cos: angles.iter().map(|a| a.cos()).collect(),
        sin: angles.iter().map(|a| a.sin()).collect(),
    }
}

type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);

fn op_cases(seed: u64) -> Vec<Case> {
    let mut r = rng::seeded(seed);
    let r = &mut r;
    let layout = HeadLayout {
        batch: 2,
        seq: 3,
        heads: 2,
        head_dim: 2,
    };
    let mut cases: Vec<Case> = Vec::new();

    let w = uniform(r, &[3, 5]);
    cases.push((
        "matmul",
        vec![uniform(r, &[3, 4]), uniform(r, &[4, 5])],
        Box::new(move |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted(t, y, &w)
        }),
    ));
    for name in ["add", "sub", "mul"] {
        let w = uniform(r, &[2, 3]);
        cases.push((
            name,
            vec![uniform(r, &[2, 3]), uniform(r, &[2, 3])],
            Box::new(move |t, v| {
                let y = match name {
                    "add" => t.add(v[0], v[1])?,
                    "sub" => t.sub(v[0], v[1])?,
                    _ => t.mul(v[0], v[1])?,
                };
                weighted(t, y, &w)
            }),
        ));
    }
    let w = uniform(r, &[3, 4]);
    cases.push((
        "scale",
        vec![uniform(r, &[3, 4])],
        Box::new(move |t, v| {
            let y = t.scale(v[0], -1.7);
            weighted(t, y, &w)
        }),
    ));
    let w = uniform(r, &[2, 3, 4]);
    cases.push((
        "add_broadcast",
        vec![uniform(r, &[2, 3, 4]), uniform(r, &[3, 4])],
        Box::new(move |t, v| {
            let y = t.add_broadcast(v[0], v[1])?;
            weighted(t, y, &w)
        }),
    ));
    let w = uniform(r, &[6]);
    cases.push((
        "reshape",
        vec![uniform(r, &[2, 3])],
        Box::new(move |t, v| {
            let y = t.reshape(v[0], &[6])?;
            weighted(t, y, &w)
        }),
    ));
    cases.push((
        "sum",
        vec![uniform(r, &[4, 2])],
        Box::new(|t, v| {
            let s = t.sum(v[0]);
            t.mul(s, s)
        }),
    ));
    let w = uniform(r, &[3, 4]);
    cases.push((
        "gelu",
        vec![uniform(r, &[3, 4])],
        Box::new(move |t, v| {
            let y = t.gelu(v[0]);
            weighted(t, y, &w)
        }),
    ));
    let w = uniform(r, &[3, 4]);
    cases.push((
        "relu",
        vec![away_from_zero(r, &[3, 4], 0.05)],
        Box::new(move |t, v| {
            let y = t.relu(v[0]);
            weighted(t, y, &w)
        }),
    ));
    for axis in [0usize, 1, 2] {
        let w = uniform(r, &[2, 3, 4]);
        let name = ["softmax_axis0", "softmax_axis1", "softmax_axis2"][axis];
        cases.push((
            name,
            vec![uniform(r, &[2, 3, 4])],
            Box::new(move |t, v| {
                let y = t.softmax(v[0], axis)?;
                weighted(t, y, &w)
            }),
        ));
    }
    let w = uniform(r, &[2, 4, 4]);
    cases.push((
        "causal_softmax",
        vec![uniform(r, &[2, 4, 4])],
        Box::new(move |t, v| {
            let y = t.causal_softmax(v[0])?;
            weighted(t, y, &w)
        }),
    ));
    let w = uniform(r, &[3, 5]);
    cases.push((
        "layer_norm",
        vec![uniform(r, &[3, 5]), uniform(r, &[5]), uniform(r, &[5])],
        Box::new(move |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted(t, y, &w)
        }),
    ));
    let w = uniform(r, &[5, 3]);
    cases.push((
        "embedding",
        vec![uniform(r, &[4, 3])],
        Box::new(move |t, v| {
            let y = t.embedding(v[0], &[2, 0, 2, 3, 1])?;
            weighted(t, y, &w)
        }),
    ));
    let w = uniform(r, &[4, 3]);
    cases.push((
        "replace_rows",
        vec![uniform(r, &[4, 3]), uniform(r, &[3])],
        Box::new(move |t, v| {
            let y = t.replace_rows(v[0], v[1], &[true, false, true, false])?;
            weighted(t, y, &w)
        }),
    ));
    let w = uniform(r, &[3, 2]);
    cases.push((
        "gather_rows",
        vec![uniform(r, &[4, 2])],
        Box::new(move |t, v| {
            let y = t.gather_rows(v[0], &[3, 1, 3])?;
            weighted(t, y, &w)
        }),
    ));
    let w = uniform(r, &[4, 3, 3]);
    cases.push((
        "attn_scores",
        vec![uniform(r, &[6, 4]), uniform(r, &[6, 4])],
        Box::new(move |t, v| {
            let y = t.attn_scores(v[0], v[1], layout, 0.7)?;
            weighted(t, y, &w)
        }),
    ));
    let w = uniform(r, &[4, 3, 3]);
    cases.push((
        "rel_scores",
        vec![uniform(r, &[6, 4]), uniform(r, &[5, 2])],
        Box::new(move |t, v| {
            let y = t.rel_scores(v[0], v[1], layout, 0.7)?;
            weighted(t, y, &w)
        }),
    ));
    let w = uniform(r, &[6, 4]);
    cases.push((
        "attn_apply",
        vec![uniform(r, &[4, 3, 3]), uniform(r, &[6, 4])],
        Box::new(move |t, v| {
            let y = t.attn_apply(v[0], v[1], layout)?;
            weighted(t, y, &w)
        }),
    ));
    let w = uniform(r, &[6, 4]);
    let rot = test_rotation(3, 1);
    cases.push((
        "rope",
        vec![uniform(r, &[6, 4])],
        Box::new(move |t, v| {
            let y = t.rope(v[0], layout, &rot)?;
            weighted(t, y, &w)
        }),
    ));
    // Two query rows per batch item, at positions (2, 0) and (1, 1).
    const POS: [usize; 4] = [2, 0, 1, 1];
    let w = uniform(r, &[4, 2, 3]);
    cases.push((
        "attn_scores_at",
        vec![uniform(r, &[4, 4]), uniform(r, &[6, 4])],
        Box::new(move |t, v| {
            let y = t.attn_scores_at(v[0], v[1], layout, &POS, 0.7)?;
            weighted(t, y, &w)
        }),
    ));
    let w = uniform(r, &[4, 2, 3]);
    cases.push((
        "rel_scores_at",
        vec![uniform(r, &[4, 4]), uniform(r, &[5, 2])],
        Box::new(move |t, v| {
            let y = t.rel_scores_at(v[0], v[1], layout, &POS, 0.7)?;
            weighted(t, y, &w)
        }),
    ));
    let w = uniform(r, &[4, 2, 3]);
    cases.push((
        "causal_softmax_at",
        vec![uniform(r, &[4, 2, 3])],
        Box::new(move |t, v| {
            let y = t.causal_softmax_at(v[0], &POS)?;
            weighted(t, y, &w)
        }),
    ));
    let w = uniform(r, &[4, 4]);
    cases.push((
        "attn_apply_at",
        vec![uniform(r, &[4, 2, 3]), uniform(r, &[6, 4])],
        Box::new(move |t, v| {
            let y = t.attn_apply_at(v[0], v[1], layout, &POS)?;
            weighted(t, y, &w)
        }),
    ));
    let w = uniform(r, &[4, 4]);
    let rot = test_rotation(3, 1);
    cases.push((
        "rope_at",
        vec![uniform(r, &[4, 4])],
        Box::new(move |t, v| {
            let y = t.rope_at(v[0], layout, &POS, &rot)?;
            weighted(t, y, &w)
        }),
    ));
    cases.push((
        "cross_entropy",
        vec![uniform(r, &[3, 4])],
        Box::new(|t, v| t.cross_entropy(v[0], &[1, 3, 0])),
    ));
    let target = uniform(r, &[2, 3]);
    let mask = Tensor::new(&[2, 3], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0]).expect("static shape");
    cases.push((
        "masked_mse",
        vec![uniform(r, &[2, 3])],
        Box::new(move |t, v| t.masked_mse(v[0], &target, &mask)),
    ));
    let w = uniform(r, &[3, 3]);
    cases.push((
        "shared_subexpression",
        vec![uniform(r, &[3, 3])],
        Box::new(move |t, v| {
            // x reaches the loss along three paths.
            let sq = t.mul(v[0], v[0])?;
            let y = t.add(sq, v[0])?;
            let z = t.matmul(y, v[0])?;
            weighted(t, z, &w)
        }),
    ));
    cases
}

/// Runs every single-op check with inputs drawn from `seed`.
pub fn check_ops(seed: u64, opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    op_cases(seed)
        .into_iter()
        .map(|(name, inputs, f)| check_inputs(name, &inputs, f, opts))
        .collect()
}

/// Full-model checks: `d_model = 8`, two layers, four tokens, one check per
/// positional scheme plus the scalar-input regression path.
pub fn check_models(seed: u64, opts: &CheckOptions) -> Result<Vec<CheckResult>> {
    use crate::pe::{PeKind, PeSpec};
    use crate::transformer::{Input, InputMode, Model, ModelConfig};

    let specs = [
        ("model_1d-fixed", PeSpec::new(PeKind::Fixed1d), 1),
        ("model_2d-fixed", PeSpec::fixed_2d(2, 2), 1),
        ("model_learnable", PeSpec::learnable(0.5), 2),
        ("model_1d-relative", PeSpec::new(PeKind::Relative1d), 2),
        ("model_1d-rope", PeSpec::new(PeKind::Rope1d), 2),
        ("model_c-nope", PeSpec::new(PeKind::CNope), 1),
    ];
    let tokens = [0usize, 3, 5, 1, 2, 2, 4, 0];
    let mut results = Vec::new();
    for (name, pe, heads) in specs {
        let mut cfg = ModelConfig::new(8, 4, InputMode::Tokens { vocab: 6 }, 4, pe);
        cfg.n_layers = 2;
        cfg.n_heads = heads;
        // Larger init than training uses, so every path carries signal.
        cfg.init_sd = 0.5;
        let mut model = Model::new(cfg, seed)?;
        let mut store = std::mem::take(&mut model.params);
        let r = check_params(
            name,
            &mut store,
            |tape, params| {
                let fwd = model.forward_with(params, tape, Input::Tokens(&tokens))?;
                let logits = model.outputs_at_with(params, tape, &fwd, &[1, 6])?;
                tape.cross_entropy(logits, &[2, 0])
            },
            opts,
        )?;
        results.push(r);
        let probe_name = format!("{name}_probe");
        let r = check_params(
            &probe_name,
            &mut store,
            |tape, params| {
                let (_, logits) = model.probe_with(params, tape, Input::Tokens(&tokens), &[1, 6])?;
                tape.cross_entropy(logits, &[2, 0])
            },
            opts,
        )?;
        results.push(r);
    }

    let mut cfg = ModelConfig::new(8, 4, InputMode::Scalar, 1, PeSpec::learnable(0.5));
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.init_sd = 0.5;
    let mut model = Model::new(cfg, seed)?;
    let mut store = std::mem::take(&mut model.params);
    let values = [0.3, -1.2, 0.8, 0.1, 1.5, -0.4, 0.0, 0.9];
    let masked = [false, true, false, true, true, false, false, false];
    let target = Tensor::new(&[8, 1], values.to_vec())?;
    let mask = Tensor::new(&[8, 1], masked.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())?;
    results.push(check_params(
        "model_scalar_masked",
        &mut store,
        |tape, params| {
            let fwd = model.forward_with(params, tape, Input::Scalar { values: &values, masked: &masked })?;
            let out = model.outputs_with(params, tape, &fwd)?;
            tape.masked_mse(out, &target, &mask)
        },
        opts,
    )?);
    Ok(results)
}

/// Every op check followed by every model check.
pub fn run_suite(seed: u64, opts: &CheckOptions) -> Result<GradcheckReport> {
    let mut results = check_ops(seed, opts)?;
    results.extend(check_models(seed, opts)?);
    Ok(GradcheckReport {
        tolerance: opts.tolerance,
        results,
    })
}
