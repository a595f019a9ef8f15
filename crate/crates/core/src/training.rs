//! Optimizers, training loops and metric logs.

use std::io::{BufRead, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lst::{self, PuzzleRecord};
use crate::numerics::{ParamStore, Tape, Tensor};
use crate::rng::{self, stream};
use crate::transformer::{Input, Model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Adamw,
}

/// Optimizer settings; unset learning rate and weight decay take the
/// per-kind defaults (`1e-3` for SGD, `1e-4` otherwise; decay `0.1` for
/// AdamW, zero otherwise).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}

fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimizerConfig {
            kind,
            lr: None,
            betas: default_betas(),
            eps: default_eps(),
            weight_decay: None,
        }
    }

    pub fn sgd() -> Self {
        Self::new(OptimizerKind::Sgd)
    }

    pub fn adam() -> Self {
        Self::new(OptimizerKind::Adam)
    }

    pub fn adamw() -> Self {
        Self::new(OptimizerKind::Adamw)
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = Some(lr);
        self
    }

    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or(match self.kind {
            OptimizerKind::Sgd => 1e-3,
            _ => 1e-4,
        })
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay.unwrap_or(match self.kind {
            OptimizerKind::Adamw => 0.1,
            _ => 0.0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        let wd = self.weight_decay();
        if !(wd >= 0.0) {
            return Err(Error::config(format!("weight decay must be nonnegative, got {wd}")));
        }
        if wd > 0.0 && self.kind != OptimizerKind::Adamw {
            return Err(Error::config("weight decay is only supported with adamw"));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || !(self.eps > 0.0) {
            return Err(Error::config("betas must lie in [0, 1) and eps must be positive"));
        }
        Ok(())
    }
}

/// `p ← p − lr·g`.
pub fn sgd_step(p: &mut [f64], g: &[f64], lr: f64) {
    p.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g);
}

/// Stateful optimizer over the trainable tensors of one parameter store.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, t)| if t.requires_grad() { vec![0.0; t.numel()] } else { Vec::new() })
            .collect();
        Ok(Optimizer {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients. Frozen tensors
    /// are skipped.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let lr = self.config.lr();
        let wd = self.config.weight_decay();
        let (b1, b2) = self.config.betas;
        let eps = self.config.eps;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, (_, tensor)) in store.iter_mut().enumerate() {
            let (data, grad) = tensor.data_and_grad_mut();
            let Some(grad) = grad else { continue };
            match self.config.kind {
                OptimizerKind::Sgd => sgd_step(data, grad, lr),
                OptimizerKind::Adam | OptimizerKind::Adamw => {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..data.len() {
                        if wd > 0.0 {
                            data[j] -= lr * wd * data[j];
                        }
                        let g = grad[j];
                        m[j] = b1 * m[j] + (1.0 - b1) * g;
                        v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                        let mh = m[j] / c1;
                        let vh = v[j] / c2;
                        data[j] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// One metric observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub seed: u64,
    pub step: u64,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricLog {
    pub rows: Vec<MetricRow>,
}

pub const METRIC_HEADER: &str = "run_id,seed,step,split,metric_name,value";

impl MetricLog {
    pub fn push(&mut self, run_id: &str, seed: u64, step: u64, split: &str, metric: &str, value: f64) {
        self.rows.push(MetricRow {
            run_id: run_id.to_string(),
            seed,
            step,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
        });
    }

    /// Last value of a metric on a split.
    pub fn last(&self, split: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .rev()
            .find(|r| r.split == split && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn series(&self, split: &str, metric: &str) -> Vec<(u64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .map(|r| (r.step, r.value))
            .collect()
    }

    /// CSV with `# key: value` comment lines ahead of the column header.
    pub fn write_csv<W: Write>(&self, mut w: W, header_comments: &[(&str, &str)]) -> Result<()> {
        for (k, v) in header_comments {
            writeln!(w, "# {k}: {v}")?;
        }
        writeln!(w, "{METRIC_HEADER}")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{},{:e}", r.run_id, r.seed, r.step, r.split, r.metric, r.value)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R, origin: &str) -> Result<MetricLog> {
        let mut log = MetricLog::default();
        let mut seen_header = false;
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            let bad = |msg: &str| Error::Parse {
                path: origin.to_string(),
                line: n + 1,
                msg: msg.to_string(),
            };
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            if !seen_header {
                if line.trim() != METRIC_HEADER {
                    return Err(bad("unexpected metric log header"));
                }
                seen_header = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad("expected 6 fields"));
            }
            log.rows.push(MetricRow {
                run_id: f[0].to_string(),
                seed: f[1].parse().map_err(|_| bad("bad seed"))?,
                step: f[2].parse().map_err(|_| bad("bad step"))?,
                split: f[3].to_string(),
                metric: f[4].to_string(),
                value: f[5].parse().map_err(|_| bad("bad value"))?,
            });
        }
        Ok(log)
    }
}

/// Tokenized puzzles laid out for batching.
#[derive(Debug, Clone, PartialEq)]
pub struct LstData {
    pub tokens: Vec<usize>,
    pub probes: Vec<usize>,
    pub labels: Vec<usize>,
}

impl LstData {
    pub fn from_records(records: &[PuzzleRecord]) -> Self {
        let mut d = LstData {
            tokens: Vec::with_capacity(records.len() * lst::N_CELLS),
            probes: Vec::with_capacity(records.len()),
            labels: Vec::with_capacity(records.len()),
        };
        for r in records {
            let t = lst::tokenize(&r.puzzle);
            d.tokens.extend_from_slice(&t.tokens);
            d.probes.push(t.probe_index);
            d.labels.push(t.label);
        }
        d
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn batch(&self, idx: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let t = lst::N_CELLS;
        let mut tokens = Vec::with_capacity(idx.len() * t);
        let mut rows = Vec::with_capacity(idx.len());
        let mut labels = Vec::with_capacity(idx.len());
        for (b, &i) in idx.iter().enumerate() {
            tokens.extend_from_slice(&self.tokens[i * t..(i + 1) * t]);
            rows.push(b * t + self.probes[i]);
            labels.push(self.labels[i]);
        }
        (tokens, rows, labels)
    }
}

/// Loss and (for classification) accuracy over a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_BATCH: usize = 256;

/// Mean cross-entropy and probe accuracy; never mutates the model.
pub fn evaluate_lst(model: &Model, data: &LstData) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Degenerate("empty evaluation set".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_BATCH) {
        let (tokens, rows, labels) = data.batch(chunk);
        let mut tape = Tape::new();
        let (_, logits) = model.probe(&mut tape, Input::Tokens(&tokens), &rows)?;
        let l = tape.cross_entropy(logits, &labels)?;
        loss += tape.value(l).item()? * chunk.len() as f64;
        let lv = tape.value(logits);
        correct += labels.iter().enumerate().filter(|(i, &y)| argmax(lv.row(*i)) == y).count();
    }
    Ok(Evaluation {
        loss: loss / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
    })
}

/// Loop settings shared by both training modes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub run_id: String,
    pub seed: u64,
    pub batch_size: usize,
    /// Epochs for LST, optimizer steps for masked regression.
    pub budget: usize,
    /// Held-out evaluation every this many epochs or steps (and at the end).
    pub eval_every: usize,
}

/// Outcome of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub run_id: String,
    pub seed: u64,
    pub completed: usize,
    pub log: MetricLog,
    pub train: Evaluation,
    pub test: Evaluation,
    pub wall_clock_secs: f64,
}

fn check_finite(loss: f64, what: &str, at: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("training loss became {loss} at {what} {at}")))
    }
}

/// Cross-entropy training at the probe position. The per-epoch train
/// accuracy is measured on each batch before its update; the final
/// train and test evaluations are exact passes over the data.
pub fn train_lst(
    model: &mut Model,
    train: &LstData,
    test: &LstData,
    opt: &OptimizerConfig,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(usize, &MetricLog),
) -> Result<TrainRun> {
    if model.config.context != lst::N_CELLS || model.config.output_dim != lst::N_SYMBOLS {
        return Err(Error::config("LST training needs context 16 and 4 output classes"));
    }
    if train.is_empty() || opts.batch_size == 0 {
        return Err(Error::config("LST training needs data and a positive batch size"));
    }
    let started = Instant::now();
    let mut optimizer = Optimizer::new(opt.clone(), &model.params)?;
    let mut order_rng = rng::stream_rng(opts.seed, stream::DATA_ORDER);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = MetricLog::default();
    let eval_every = opts.eval_every.max(1);
    for epoch in 1..=opts.budget {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            let (tokens, rows, labels) = train.batch(chunk);
            let mut tape = Tape::new();
            let (_, logits) = model.probe(&mut tape, Input::Tokens(&tokens), &rows)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            let lv = tape.value(loss).item()?;
            check_finite(lv, "epoch", epoch)?;
            loss_sum += lv * chunk.len() as f64;
            let probs = tape.value(logits);
            correct += labels.iter().enumerate().filter(|(i, &y)| argmax(probs.row(*i)) == y).count();
            model.params.zero_grad();
            tape.backward(loss, &mut model.params)?;
            optimizer.step(&mut model.params);
        }
        let e = epoch as u64;
        log.push(&opts.run_id, opts.seed, e, "train", "loss", loss_sum / train.len() as f64);
        log.push(&opts.run_id, opts.seed, e, "train", "accuracy", correct as f64 / train.len() as f64);
        if (epoch % eval_every == 0 || epoch == opts.budget)
            && !test.is_empty() {
                let ev = evaluate_lst(model, test)?;
                log.push(&opts.run_id, opts.seed, e, "test", "loss", ev.loss);
                log.push(&opts.run_id, opts.seed, e, "test", "accuracy", ev.accuracy);
            }
        on_epoch(epoch, &log);
    }
    let train_eval = evaluate_lst(model, train)?;
    let test_eval = if test.is_empty() {
        Evaluation {
            loss: f64::NAN,
            accuracy: f64::NAN,
        }
    } else {
        evaluate_lst(model, test)?
    };
    Ok(TrainRun {
        run_id: opts.run_id.clone(),
        seed: opts.seed,
        completed: opts.budget,
        log,
        train: train_eval,
        test: test_eval,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Row-major `[samples × tokens]` real-valued data; each row is one input
/// sequence (one timepoint across all nodes for NMAR).
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub n_tokens: usize,
    pub values: Vec<f64>,
}

impl Samples {
    pub fn new(n_tokens: usize, values: Vec<f64>) -> Result<Self> {
        if n_tokens == 0 || !values.len().is_multiple_of(n_tokens) {
            return Err(Error::Shape {
                op: "samples",
                lhs: vec![values.len()],
                rhs: vec![n_tokens],
            });
        }
        Ok(Samples { n_tokens, values })
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.n_tokens
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_tokens..(i + 1) * self.n_tokens]
    }
}

/// Number of masked tokens per sample: `ceil(level · n)`.
pub fn mask_count(mask_level: f64, n_tokens: usize) -> Result<usize> {
    if !(mask_level > 0.0 && mask_level < 1.0) {
        return Err(Error::config(format!("mask level must be in (0, 1), got {mask_level}")));
    }
    Ok(((mask_level * n_tokens as f64) - 1e-9).ceil().max(1.0) as usize)
}

/// Chooses `k` distinct masked positions per sample.
pub fn sample_mask(rng: &mut rng::Rng, n_samples: usize, n_tokens: usize, k: usize) -> Vec<bool> {
    let mut flags = vec![false; n_samples * n_tokens];
    let mut pos: Vec<usize> = (0..n_tokens).collect();
    for s in 0..n_samples {
        let (chosen, _) = pos.partial_shuffle(rng, k);
        for &p in chosen.iter() {
            flags[s * n_tokens + p] = true;
        }
    }
    flags
}

/// Masked-prediction inputs with their unmasked targets.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    /// Inputs with masked entries zeroed; the model never reads them.
    pub inputs: Vec<f64>,
    pub masked: Vec<bool>,
    pub targets: Vec<f64>,
}

/// Builds a batch from sample rows with `k` masked tokens each.
pub fn mask_batch(data: &Samples, rows: &[usize], k: usize, rng: &mut rng::Rng) -> MaskedBatch {
    let n = data.n_tokens;
    let masked = sample_mask(rng, rows.len(), n, k);
    let mut targets = Vec::with_capacity(rows.len() * n);
    for &r in rows {
        targets.extend_from_slice(data.row(r));
    }
    let inputs = targets.iter().zip(&masked).map(|(v, m)| if *m { 0.0 } else { *v }).collect();
    MaskedBatch { inputs, masked, targets }
}

fn masked_loss(model: &Model, tape: &mut Tape, b: &MaskedBatch) -> Result<crate::numerics::Var> {
    let n = b.targets.len();
    let fwd = model.forward(
        tape,
        Input::Scalar {
            values: &b.inputs,
            masked: &b.masked,
        },
    )?;
    let out = model.outputs(tape, &fwd)?;
    let target = Tensor::new(&[n, 1], b.targets.clone())?;
    let mask = Tensor::new(&[n, 1], b.masked.iter().map(|&m| f64::from(u8::from(m))).collect())?;
    tape.masked_mse(out, &target, &mask)
}

/// Fixed validation masks so repeated evaluations see identical inputs.
pub fn validation_batches(data: &Samples, k: usize, seed: u64, batch_size: usize) -> Vec<MaskedBatch> {
    let mut r = rng::stream_rng(seed, stream::MASK ^ 0x5641_4c00);
    let idx: Vec<usize> = (0..data.len()).collect();
    idx.chunks(batch_size.max(1)).map(|c| mask_batch(data, c, k, &mut r)).collect()
}

/// Mean masked MSE over prepared batches; never mutates the model.
pub fn evaluate_masked(model: &Model, batches: &[MaskedBatch]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0.0;
    for b in batches {
        let mut tape = Tape::new();
        let l = masked_loss(model, &mut tape, b)?;
        let k = b.masked.iter().filter(|m| **m).count() as f64;
        sum += tape.value(l).item()? * k;
        count += k;
    }
    if count == 0.0 {
        return Err(Error::DegenerateMask);
    }
    Ok(sum / count)
}

/// MSE of predicting each token's training mean at the masked positions.
pub fn mean_baseline_mse(train: &Samples, batches: &[MaskedBatch]) -> Result<f64> {
    let n = train.n_tokens;
    let mut mean = vec![0.0; n];
    for i in 0..train.len() {
        for (m, v) in mean.iter_mut().zip(train.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    let mut sum = 0.0;
    let mut count = 0usize;
    for b in batches {
        for (j, (&t, &m)) in b.targets.iter().zip(&b.masked).enumerate() {
            if m {
                let d = t - mean[j % n];
                sum += d * d;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::DegenerateMask);
    }
    Ok(sum / count as f64)
}

/// Masked-token regression over random rows with fresh masks each step.
pub fn train_masked(
    model: &mut Model,
    train: &Samples,
    val: &Samples,
    opt: &OptimizerConfig,
    mask_level: f64,
    opts: &TrainOptions,
    mut on_eval: impl FnMut(usize, &MetricLog),
) -> Result<TrainRun> {
    if model.config.context != train.n_tokens || val.n_tokens != train.n_tokens {
        return Err(Error::config(format!(
            "model context {} does not match {} tokens per sample",
            model.config.context, train.n_tokens
        )));
    }
    if train.is_empty() || opts.batch_size == 0 {
        return Err(Error::config("masked training needs data and a positive batch size"));
    }
    let k = mask_count(mask_level, train.n_tokens)?;
    let started = Instant::now();
    let mut optimizer = Optimizer::new(opt.clone(), &model.params)?;
    let mut order_rng = rng::stream_rng(opts.seed, stream::DATA_ORDER);
    let mut mask_rng = rng::stream_rng(opts.seed, stream::MASK);
    let val_batches = if val.is_empty() {
        Vec::new()
    } else {
        validation_batches(val, k, opts.seed, EVAL_BATCH)
    };
    let mut log = MetricLog::default();
    let eval_every = opts.eval_every.max(1);
    let mut window = 0.0;
    let mut window_n = 0usize;
    for step in 1..=opts.budget {
        let rows: Vec<usize> = (0..opts.batch_size).map(|_| order_rng.random_range(0..train.len())).collect();
        let b = mask_batch(train, &rows, k, &mut mask_rng);
        let mut tape = Tape::new();
        let loss = masked_loss(model, &mut tape, &b)?;
        let lv = tape.value(loss).item()?;
        check_finite(lv, "step", step)?;
        window += lv;
        window_n += 1;
        model.params.zero_grad();
        tape.backward(loss, &mut model.params)?;
        optimizer.step(&mut model.params);
        if step % eval_every == 0 || step == opts.budget {
            let s = step as u64;
            log.push(&opts.run_id, opts.seed, s, "train", "mse", window / window_n as f64);
            window = 0.0;
            window_n = 0;
            if !val_batches.is_empty() {
                log.push(&opts.run_id, opts.seed, s, "val", "mse", evaluate_masked(model, &val_batches)?);
            }
            on_eval(step, &log);
        }
    }
    let train_batches = validation_batches(train, k, opts.seed ^ 1, EVAL_BATCH);
    let train_mse = evaluate_masked(model, &train_batches)?;
    let val_mse = if val_batches.is_empty() {
        f64::NAN
    } else {
        evaluate_masked(model, &val_batches)?
    };
    Ok(TrainRun {
        run_id: opts.run_id.clone(),
        seed: opts.seed,
        completed: opts.budget,
        log,
        train: Evaluation {
            loss: train_mse,
            accuracy: f64::NAN,
        },
        test: Evaluation {
            loss: val_mse,
            accuracy: f64::NAN,
        },
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_arithmetic() {
        let mut p = [1.0];
        sgd_step(&mut p, &[2.0], 0.1);
        assert!((p[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_needs_adamw() {
        let mut c = OptimizerConfig::adam();
        c.weight_decay = Some(0.1);
        assert!(c.validate().is_err());
        assert!(OptimizerConfig::adamw().validate().is_ok());
        assert_eq!(OptimizerConfig::sgd().lr(), 1e-3);
    }

    #[test]
    fn mask_counts_round_up() {
        assert_eq!(mask_count(0.5, 15).unwrap(), 8);
        assert!(mask_count(1.0, 15).is_err());
        assert_eq!(mask_count(0.2, 15).unwrap(), 3);
        assert!(mask_count(0.0, 15).is_err());
    }
}
