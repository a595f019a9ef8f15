//! `pelab nmar` and external time-series sweeps: masked-token regression
//! followed by PE network analysis (modularity, clustering, shuffle null).

use std::path::Path;

use pelab::analysis::{self, Partition};
use pelab::nmar::{self, TimeSeries};
use pelab::numerics::checkpoint;
use pelab::training::{self, Samples};
use pelab::transformer::{extract_attention, Input, Model};
use serde::{Deserialize, Serialize};

use crate::config::{Experiment, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::sweep::{self, Cell, RunOptions, Sweep};

/// Files inside a dataset directory written by `ingest`.
pub const DATASET_SERIES: &str = "data.csv";
pub const DATASET_PARTITION: &str = "partition.csv";
pub const DATASET_INFO: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedResult {
    pub config_hash: String,
    pub cell: String,
    pub pe: String,
    pub kind: String,
    pub sigma: Option<f64>,
    pub seed: u64,
    pub steps: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    /// Predicting every masked token by its training-set column mean.
    pub baseline_mse: f64,
    /// Network metrics exist only for schemes with a position table and
    /// datasets with a partition.
    pub modularity: Option<f64>,
    pub clustering: Option<f64>,
    pub null_mean: Option<f64>,
    pub null_q95: Option<f64>,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone)]
pub struct MaskedSweep {
    pub sweep: Sweep,
    pub results: Vec<MaskedResult>,
    pub partition: Option<Partition>,
}

pub const SUMMARY_HEADER: &str = "pe,sigma,seed,train_mse,val_mse,baseline_mse,modularity,clustering,null_q95";

/// Data common to every cell of a masked sweep.
#[derive(Debug, Clone)]
pub struct MaskedData {
    pub names: Vec<String>,
    pub series: TimeSeries,
    pub partition: Option<Partition>,
    pub mask_level: f64,
    pub train_fraction: f64,
    pub null_shuffles: usize,
}

pub fn node_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("node{i}")).collect()
}

fn write_with(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> pelab::Result<()>) -> CliResult<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    sweep::write_atomic(path, &buf)
}

/// Simulates (or reloads) the network, or loads an ingested dataset.
pub fn prepare_data(cfg: &ExperimentConfig, sweep: &Sweep, verbose: bool) -> CliResult<MaskedData> {
    let data_dir = sweep.data_dir();
    match &cfg.experiment {
        Experiment::Nmar {
            simulation,
            mask_level,
            train_fraction,
            null_shuffles,
        } => {
            let names = node_names(nmar::N_NODES);
            let series_path = data_dir.join("series.csv");
            let system = nmar::sample_system(simulation.system_seed);
            let partition = nmar::ground_truth_partition(&system);
            let series = if series_path.exists() {
                nmar::load_series(&series_path)?.series
            } else {
                sweep::progress(verbose, || format!("simulating {} steps", simulation.steps));
                let series = nmar::simulate(&system, simulation.steps, simulation.noise_seed)?;
                write_with(&series_path, |b| nmar::write_series_csv(b, &series, Some(&names)))?;
                write_with(&data_dir.join("partition.csv"), |b| nmar::write_partition_csv(b, &partition, Some(&names)))?;
                sweep::write_json(&data_dir.join("system.json"), &system)?;
                series
            };
            if series.len() != simulation.steps || series.n_nodes != nmar::N_NODES {
                return Err(CliError::runtime(format!(
                    "{} does not match the configured simulation; rerun with --force",
                    series_path.display()
                )));
            }
            Ok(MaskedData {
                names,
                series,
                partition: Some(partition),
                mask_level: *mask_level,
                train_fraction: *train_fraction,
                null_shuffles: *null_shuffles,
            })
        }
        Experiment::ExternalTimeseries {
            dataset,
            mask_level,
            train_fraction,
            null_shuffles,
        } => {
            let named = nmar::load_series(&dataset.join(DATASET_SERIES)).map_err(|e| CliError::from(e).context(format!("dataset {}", dataset.display())))?;
            let part_path = dataset.join(DATASET_PARTITION);
            let partition = if part_path.exists() {
                Some(nmar::load_partition(&part_path, &named.names)?)
            } else {
                None
            };
            Ok(MaskedData {
                names: named.names,
                series: named.series,
                partition,
                mask_level: *mask_level,
                train_fraction: *train_fraction,
                null_shuffles: *null_shuffles,
            })
        }
        Experiment::Lst { .. } => Err(CliError::validation(format!("config {:?} is not a masked-prediction experiment", cfg.name))),
    }
}

fn done(sweep: &Sweep, cell: &Cell) -> Option<MaskedResult> {
    sweep::completed(sweep, cell, |r: &MaskedResult| r.config_hash.as_str())
}

/// Modularity, clustering and shuffle null of a PE table's distance network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkMetrics {
    pub modularity: f64,
    pub clustering: f64,
    pub null_mean: f64,
    pub null_q95: f64,
}

pub fn network_metrics(weights: &[f64], partition: &Partition, shuffles: usize, seed: u64) -> CliResult<NetworkMetrics> {
    let modularity = analysis::modularity(weights, partition)?;
    let clustering = analysis::network_clustering(weights, partition)?;
    let null = analysis::permutation_null(weights, partition, shuffles, seed)?;
    Ok(NetworkMetrics {
        modularity,
        clustering,
        null_mean: null.iter().sum::<f64>() / null.len() as f64,
        null_q95: analysis::quantile(&null, 0.95)?,
    })
}

fn train_cell(cfg: &ExperimentConfig, sweep: &Sweep, cell: &Cell, data: &MaskedData, split: &(Samples, Samples), verbose: bool) -> CliResult<MaskedResult> {
    if let Some(r) = done(sweep, cell) {
        sweep::progress(verbose, || format!("{}: already complete", cell.id));
        return Ok(r);
    }
    let (train, val) = split;
    let dir = sweep.cell_dir(cell);
    std::fs::create_dir_all(&dir)?;
    let n = data.series.n_nodes;
    let mut model = Model::new(cfg.model_config(cell.pe.clone(), n), cell.seed)?;
    let opts = cfg.train_options(&cell.id, cell.seed);
    let run = training::train_masked(&mut model, train, val, &cfg.optimizer, data.mask_level, &opts, |step, log| {
        sweep::progress(verbose, || {
            format!(
                "{} step {step}: train mse {:.4}, val mse {:.4}",
                cell.id,
                log.last("train", "mse").unwrap_or(f64::NAN),
                log.last("val", "mse").unwrap_or(f64::NAN)
            )
        });
    })
    .map_err(|e| CliError::from(e).context(&cell.id))?;

    let k = training::mask_count(data.mask_level, n)?;
    let val_batches = training::validation_batches(val, k, cell.seed, 256);
    let baseline_mse = training::mean_baseline_mse(train, &val_batches)?;

    let comments = sweep.comments(cfg, Some(cell));
    let pairs: Vec<(&str, &str)> = comments.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    let mut buf = Vec::new();
    run.log.write_csv(&mut buf, &pairs)?;
    sweep::write_atomic(&dir.join("metrics.csv"), &buf)?;

    let first = &val_batches[0];
    let attention = extract_attention(
        &model,
        Input::Scalar {
            values: &first.inputs,
            masked: &first.masked,
        },
    )?;
    let mut buf: Vec<u8> = comments.iter().flat_map(|(k, v)| format!("# {k}: {v}\n").into_bytes()).collect();
    attention.write_csv(&mut buf)?;
    sweep::write_atomic(&dir.join("attention.csv"), &buf)?;

    let mut metrics = None;
    if let Some(table) = model.pe_table() {
        sweep::write_pe_csv(&dir.join("pe.csv"), &comments, table)?;
        let dist = analysis::pe_distance_matrix(table)?;
        sweep::write_matrix(&dir.join("distance.csv"), &comments, &dist.complement, &data.names)?;
        if let Some(p) = &data.partition {
            metrics = Some(network_metrics(&dist.network_weights(), p, data.null_shuffles, cell.seed)?);
        }
    }

    let result = MaskedResult {
        config_hash: sweep.hash.clone(),
        cell: cell.id.clone(),
        pe: cell.pe.label(),
        kind: cell.pe.kind.name().to_string(),
        sigma: cell.pe.sigma,
        seed: cell.seed,
        steps: run.completed,
        train_mse: run.train.loss,
        val_mse: run.test.loss,
        baseline_mse,
        modularity: metrics.map(|m| m.modularity),
        clustering: metrics.map(|m| m.clustering),
        null_mean: metrics.map(|m| m.null_mean),
        null_q95: metrics.map(|m| m.null_q95),
        wall_clock_secs: run.wall_clock_secs,
    };
    checkpoint::save(&dir.join(sweep::CHECKPOINT_FILE), &model.params, &serde_json::to_value(&result)?)?;
    sweep::write_json(&dir.join(sweep::RESULT_FILE), &result)?;
    sweep::progress(verbose, || {
        format!(
            "{}: val mse {:.4} (baseline {:.4}), modularity {}",
            cell.id,
            result.val_mse,
            result.baseline_mse,
            sweep::fmt_opt(result.modularity)
        )
    });
    Ok(result)
}

pub fn summary_row(r: &MaskedResult) -> String {
    format!(
        "{},{},{},{:?},{:?},{:?},{},{},{}",
        r.kind,
        sweep::fmt_opt(r.sigma),
        r.seed,
        r.train_mse,
        r.val_mse,
        r.baseline_mse,
        sweep::fmt_opt(r.modularity),
        sweep::fmt_opt(r.clustering),
        sweep::fmt_opt(r.null_q95)
    )
}

/// Runs (or resumes) a masked-prediction sweep in `dir`.
pub fn run_masked(cfg: &ExperimentConfig, dir: &Path, opts: &RunOptions) -> CliResult<MaskedSweep> {
    cfg.validate(None)?;
    if let Experiment::ExternalTimeseries { dataset, .. } = &cfg.experiment {
        if !dataset.join(DATASET_SERIES).exists() {
            return Err(CliError::validation(format!(
                "{} is not an ingested dataset (no {DATASET_SERIES}); run `pelab ingest` first",
                dataset.display()
            )));
        }
    }
    let sweep = sweep::open(cfg, dir, opts.existing, |s, c| done(s, c).is_some())?;
    let data = prepare_data(cfg, &sweep, opts.verbose)?;
    cfg.validate(Some(data.series.n_nodes))?;
    let split = data.series.split(data.train_fraction)?;
    let cells = sweep::cells(cfg);
    let results = sweep::run_parallel(&cells, opts.workers, |c| train_cell(cfg, &sweep, c, &data, &split, opts.verbose))?;
    let rows: Vec<String> = results.iter().map(summary_row).collect();
    sweep::write_csv(&sweep.dir.join(sweep::SUMMARY_FILE), &sweep.comments(cfg, None), SUMMARY_HEADER, &rows)?;
    Ok(MaskedSweep {
        sweep,
        results,
        partition: data.partition,
    })
}
