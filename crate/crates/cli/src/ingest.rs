//! `pelab ingest`: turn a user-supplied time × region matrix into a dataset
//! directory usable by `external-timeseries` sweeps.

use std::path::{Path, PathBuf};

use pelab::nmar;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::masked::{DATASET_INFO, DATASET_PARTITION, DATASET_SERIES};
use crate::sweep;

/// Tolerance for re-verifying the normalized columns.
pub const ZSCORE_TOL: f64 = 1e-9;

/// Metadata stored as `dataset.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub source: PathBuf,
    pub partition_source: Option<PathBuf>,
    pub n_timepoints: usize,
    pub n_tokens: usize,
    pub names: Vec<String>,
    /// Every column is shifted by its mean and divided by its population sd.
    pub normalization: String,
    pub raw_means: Vec<f64>,
    pub raw_sds: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub matrix: PathBuf,
    pub partition: Option<PathBuf>,
    pub out: PathBuf,
    pub force: bool,
}

pub fn ingest(opts: &IngestOptions) -> CliResult<DatasetInfo> {
    let named = nmar::load_series(&opts.matrix)?;
    if named.series.len() < 2 {
        return Err(CliError::validation(format!("{}: need at least two timepoints", opts.matrix.display())));
    }
    let partition = match &opts.partition {
        Some(p) => Some(nmar::load_partition(p, &named.names)?),
        None => None,
    };
    let (raw_means, raw_sds) = nmar::column_stats(&named.series);
    let z = nmar::zscore_columns(&named.series).map_err(|e| CliError::from(e).context(opts.matrix.display()))?;
    let (means, sds) = nmar::column_stats(&z);
    for (i, (m, s)) in means.iter().zip(&sds).enumerate() {
        if m.abs() > ZSCORE_TOL || (s - 1.0).abs() > ZSCORE_TOL {
            return Err(CliError::runtime(format!(
                "column {} failed z-score verification (mean {m:e}, sd {s})",
                named.names[i]
            )));
        }
    }

    prepare_out(&opts.out, opts.force)?;
    let mut buf = Vec::new();
    nmar::write_series_csv(&mut buf, &z, Some(&named.names))?;
    sweep::write_atomic(&opts.out.join(DATASET_SERIES), &buf)?;
    if let Some(p) = &partition {
        let mut buf = Vec::new();
        nmar::write_partition_csv(&mut buf, p, Some(&named.names))?;
        sweep::write_atomic(&opts.out.join(DATASET_PARTITION), &buf)?;
    }
    let info = DatasetInfo {
        source: opts.matrix.clone(),
        partition_source: opts.partition.clone(),
        n_timepoints: z.len(),
        n_tokens: z.n_nodes,
        names: named.names,
        normalization: "per-token z-score, population sd".into(),
        raw_means,
        raw_sds,
    };
    sweep::write_json(&opts.out.join(DATASET_INFO), &info)?;
    Ok(info)
}

fn prepare_out(out: &Path, force: bool) -> CliResult<()> {
    if out.exists() && std::fs::read_dir(out)?.next().is_some() {
        if !force {
            return Err(CliError::validation(format!("{} is not empty; use --force to replace it", out.display())));
        }
        std::fs::remove_dir_all(out)?;
    }
    std::fs::create_dir_all(out)?;
    Ok(())
}
