//! `pelab lst`: build or reload the split, train every (PE, seed) cell,
//! and write per-cell artifacts plus a sweep summary.

use std::path::Path;

use pelab::lst::{self, PuzzleRecord};
use pelab::numerics::checkpoint;
use pelab::training::{self, LstData};
use pelab::transformer::{extract_attention, Input, Model};
use serde::{Deserialize, Serialize};

use crate::config::{Experiment, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::sweep::{self, Cell, RunOptions, Sweep};

/// Final metrics of one trained cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstResult {
    pub config_hash: String,
    pub cell: String,
    pub pe: String,
    pub kind: String,
    pub sigma: Option<f64>,
    pub seed: u64,
    pub epochs: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone)]
pub struct LstSweep {
    pub sweep: Sweep,
    pub results: Vec<LstResult>,
}

/// Split bookkeeping stored next to the data files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitInfo {
    pub n_train: usize,
    pub n_test: usize,
    pub candidates: usize,
    pub threshold: f64,
    /// Largest test-to-train Jaccard similarity, recomputed pairwise.
    pub max_cross_similarity: f64,
}

pub const SUMMARY_HEADER: &str = "pe,sigma,seed,train_acc,test_acc";

fn load_or_build_split(sweep: &Sweep, cfg: &ExperimentConfig, verbose: bool) -> CliResult<(Vec<PuzzleRecord>, Vec<PuzzleRecord>)> {
    let Experiment::Lst { split } = &cfg.experiment else {
        return Err(CliError::validation(format!("config {:?} is not an LST experiment", cfg.name)));
    };
    let dir = sweep.data_dir();
    let (train_path, test_path, info_path) = (dir.join("train.csv"), dir.join("test.csv"), dir.join("split.json"));
    if train_path.exists() && test_path.exists() && info_path.exists() {
        let train = lst::load_dataset(&train_path)?;
        let test = lst::load_dataset(&test_path)?;
        if train.len() == split.n_train && test.len() == split.n_test {
            return Ok((train, test));
        }
        eprintln!("warning: stored split does not match the config sizes; rebuilding");
    }
    sweep::progress(verbose, || format!("building split: {} train / {} test", split.n_train, split.n_test));
    let built = lst::build_split(split)?;
    let max_sim = lst::max_cross_similarity(&built);
    if max_sim >= 1.0 - split.threshold {
        return Err(CliError::runtime(format!(
            "split check failed: a test puzzle has Jaccard similarity {max_sim} to a train puzzle"
        )));
    }
    lst::save_dataset(&train_path, &built.train)?;
    lst::save_dataset(&test_path, &built.test)?;
    sweep::write_json(
        &info_path,
        &SplitInfo {
            n_train: built.train.len(),
            n_test: built.test.len(),
            candidates: built.candidates,
            threshold: split.threshold,
            max_cross_similarity: max_sim,
        },
    )?;
    Ok((built.train, built.test))
}

fn done(sweep: &Sweep, cell: &Cell) -> Option<LstResult> {
    sweep::completed(sweep, cell, |r: &LstResult| r.config_hash.as_str())
}

fn train_cell(cfg: &ExperimentConfig, sweep: &Sweep, cell: &Cell, train: &LstData, test: &LstData, verbose: bool) -> CliResult<LstResult> {
    if let Some(r) = done(sweep, cell) {
        sweep::progress(verbose, || format!("{}: already complete", cell.id));
        return Ok(r);
    }
    let dir = sweep.cell_dir(cell);
    std::fs::create_dir_all(&dir)?;
    let mut model = Model::new(cfg.model_config(cell.pe.clone(), 0), cell.seed)?;
    let opts = cfg.train_options(&cell.id, cell.seed);
    let run = training::train_lst(&mut model, train, test, &cfg.optimizer, &opts, |epoch, log| {
        if epoch % opts.eval_every == 0 {
            sweep::progress(verbose, || {
                format!(
                    "{} epoch {epoch}: train acc {:.3}, test acc {:.3}",
                    cell.id,
                    log.last("train", "accuracy").unwrap_or(f64::NAN),
                    log.last("test", "accuracy").unwrap_or(f64::NAN)
                )
            });
        }
    })
    .map_err(|e| CliError::from(e).context(&cell.id))?;

    let comments = sweep.comments(cfg, Some(cell));
    let pairs: Vec<(&str, &str)> = comments.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    let mut buf = Vec::new();
    run.log.write_csv(&mut buf, &pairs)?;
    sweep::write_atomic(&dir.join("metrics.csv"), &buf)?;

    let attention = extract_attention(&model, Input::Tokens(&test.tokens))?;
    let mut buf: Vec<u8> = comments.iter().flat_map(|(k, v)| format!("# {k}: {v}\n").into_bytes()).collect();
    attention.write_csv(&mut buf)?;
    sweep::write_atomic(&dir.join("attention.csv"), &buf)?;
    if let Some(table) = model.pe_table() {
        sweep::write_pe_csv(&dir.join("pe.csv"), &comments, table)?;
    }

    let result = LstResult {
        config_hash: sweep.hash.clone(),
        cell: cell.id.clone(),
        pe: cell.pe.label(),
        kind: cell.pe.kind.name().to_string(),
        sigma: cell.pe.sigma,
        seed: cell.seed,
        epochs: run.completed,
        train_acc: run.train.accuracy,
        test_acc: run.test.accuracy,
        train_loss: run.train.loss,
        test_loss: run.test.loss,
        wall_clock_secs: run.wall_clock_secs,
    };
    let meta = serde_json::to_value(&result)?;
    checkpoint::save(&dir.join(sweep::CHECKPOINT_FILE), &model.params, &meta)?;
    sweep::write_json(&dir.join(sweep::RESULT_FILE), &result)?;
    sweep::progress(verbose, || {
        format!(
            "{}: train acc {:.3}, test acc {:.3} ({:.0}s)",
            cell.id, result.train_acc, result.test_acc, result.wall_clock_secs
        )
    });
    Ok(result)
}

pub fn summary_row(r: &LstResult) -> String {
    format!("{},{},{},{:?},{:?}", r.kind, sweep::fmt_opt(r.sigma), r.seed, r.train_acc, r.test_acc)
}

/// Runs (or resumes) an LST sweep in `dir`.
pub fn run_lst(cfg: &ExperimentConfig, dir: &Path, opts: &RunOptions) -> CliResult<LstSweep> {
    cfg.validate(None)?;
    let sweep = sweep::open(cfg, dir, opts.existing, |s, c| done(s, c).is_some())?;
    let (train, test) = load_or_build_split(&sweep, cfg, opts.verbose)?;
    let (train, test) = (LstData::from_records(&train), LstData::from_records(&test));
    let cells = sweep::cells(cfg);
    let results = sweep::run_parallel(&cells, opts.workers, |c| train_cell(cfg, &sweep, c, &train, &test, opts.verbose))?;
    let rows: Vec<String> = results.iter().map(summary_row).collect();
    sweep::write_csv(&sweep.dir.join(sweep::SUMMARY_FILE), &sweep.comments(cfg, None), SUMMARY_HEADER, &rows)?;
    Ok(LstSweep { sweep, results })
}
