//! Run-directory bookkeeping shared by every sweep: overwrite policy,
//! per-cell resumption, worker scheduling and artifact writers.
//!
//! Layout of a sweep directory:
//!
//! ```text
//! <dir>/config.json          the config that produced it
//! <dir>/data/...             generated or copied inputs
//! <dir>/runs/<pe>_s<seed>/   one directory per cell; result.json marks completion
//! <dir>/summary.csv
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use pelab::numerics::{checkpoint, Tensor};
use pelab::pe::PeSpec;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

/// What to do when the target directory already holds results.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Existing {
    /// Resume a partial sweep of the same config; refuse a finished one.
    Refuse,
    /// Resume, and reuse a finished sweep as is.
    Resume,
    /// Delete whatever is there and start over.
    Force,
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub existing: Existing,
    pub workers: usize,
    /// Progress lines on stderr.
    pub verbose: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            existing: Existing::Refuse,
            workers: 1,
            verbose: false,
        }
    }
}

pub const CONFIG_FILE: &str = "config.json";
pub const RESULT_FILE: &str = "result.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Default root for run directories when a config sets none.
pub const OUTPUT_ROOT_ENV: &str = "PELAB_OUTPUT_ROOT";

pub fn default_run_dir(cfg: &ExperimentConfig) -> PathBuf {
    if let Some(d) = &cfg.output_dir {
        return d.clone();
    }
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    root.join(&cfg.name)
}

/// One (PE, seed) training job.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub pe: PeSpec,
    pub seed: u64,
    pub id: String,
}

pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for pe in cfg.cells() {
        for &seed in &cfg.seeds {
            let id = format!("{}_s{seed}", pe.label());
            out.push(Cell { pe: pe.clone(), seed, id });
        }
    }
    out
}

/// An opened sweep directory.
#[derive(Debug, Clone)]
pub struct Sweep {
    pub dir: PathBuf,
    pub hash: String,
}

impl Sweep {
    pub fn cell_dir(&self, cell: &Cell) -> PathBuf {
        self.dir.join("runs").join(&cell.id)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.dir.join("data")
    }

    /// `# key: value` lines identifying every file this sweep writes.
    pub fn comments(&self, cfg: &ExperimentConfig, cell: Option<&Cell>) -> Vec<(String, String)> {
        let mut c = vec![("config_hash".to_string(), self.hash.clone()), ("experiment".to_string(), cfg.name.clone())];
        if let Some(cell) = cell {
            c.push(("cell".into(), cell.id.clone()));
            c.push(("pe".into(), cell.pe.label()));
            c.push(("seed".into(), cell.seed.to_string()));
        }
        c
    }
}

fn dir_is_empty(dir: &Path) -> CliResult<bool> {
    Ok(std::fs::read_dir(dir)?.next().is_none())
}

/// Opens `dir` for `cfg` under the overwrite policy. `complete` reports
/// whether a cell already has a usable result.
pub fn open(cfg: &ExperimentConfig, dir: &Path, existing: Existing, complete: impl Fn(&Sweep, &Cell) -> bool) -> CliResult<Sweep> {
    let hash = cfg.hash();
    let sweep = Sweep {
        dir: dir.to_path_buf(),
        hash: hash.clone(),
    };
    let cfg_path = dir.join(CONFIG_FILE);
    if dir.exists() {
        let wipe = if cfg_path.exists() {
            let stored = ExperimentConfig::load(&cfg_path).map_err(|e| e.context("existing run directory"))?;
            let stored_hash = stored.hash();
            if existing == Existing::Force {
                true
            } else if stored_hash != hash {
                return Err(CliError::validation(format!(
                    "{} holds results of config {:?} (hash {stored_hash}), not {:?} (hash {hash}); use --force to replace it",
                    dir.display(),
                    stored.name,
                    cfg.name
                )));
            } else {
                if existing == Existing::Refuse && cells(cfg).iter().all(|c| complete(&sweep, c)) {
                    return Err(CliError::validation(format!(
                        "{} already holds a complete sweep for config hash {hash}; use --force to rerun",
                        dir.display()
                    )));
                }
                false
            }
        } else if dir_is_empty(dir)? {
            false
        } else if existing == Existing::Force {
            true
        } else {
            return Err(CliError::validation(format!(
                "{} exists and is not a sweep directory; use --force to replace it",
                dir.display()
            )));
        };
        if wipe {
            std::fs::remove_dir_all(dir)?;
        }
    }
    std::fs::create_dir_all(dir.join("runs"))?;
    std::fs::create_dir_all(dir.join("data"))?;
    write_atomic(&cfg_path, cfg.to_json().as_bytes())?;
    Ok(sweep)
}

/// Writes through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension("partial");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

/// A finished cell's result, if its result file matches `hash` and its
/// checkpoint verifies. A damaged checkpoint is reported and the cell
/// is treated as not done.
pub fn completed<T: DeserializeOwned>(sweep: &Sweep, cell: &Cell, hash_of: impl Fn(&T) -> &str) -> Option<T> {
    let dir = sweep.cell_dir(cell);
    let result: T = read_json(&dir.join(RESULT_FILE)).ok()?;
    if hash_of(&result) != sweep.hash {
        return None;
    }
    match checkpoint::load(&dir.join(CHECKPOINT_FILE)) {
        Ok(_) => Some(result),
        Err(e) => {
            eprintln!("warning: {}: checkpoint unusable ({e}); retraining this cell", dir.display());
            None
        }
    }
}

/// Runs `job` over `items` on up to `workers` threads, keeping order.
/// After the first failure no new items start.
pub fn run_parallel<I: Sync, T: Send>(items: &[I], workers: usize, job: impl Fn(&I) -> CliResult<T> + Sync) -> CliResult<Vec<T>> {
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let slots: Mutex<Vec<Option<CliResult<T>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                if failed.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = job(&items[i]);
                if r.is_err() {
                    failed.store(true, Ordering::SeqCst);
                }
                slots.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    let mut out = Vec::with_capacity(items.len());
    for r in slots.into_inner().expect("no poisoned workers").into_iter().flatten() {
        out.push(r?);
    }
    Ok(out)
}

fn comment_block(comments: &[(String, String)]) -> String {
    comments.iter().map(|(k, v)| format!("# {k}: {v}\n")).collect()
}

/// A CSV with a comment header, written atomically.
pub fn write_csv(path: &Path, comments: &[(String, String)], header: &str, rows: &[String]) -> CliResult<()> {
    let mut s = comment_block(comments);
    s.push_str(header);
    s.push('\n');
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

/// `position,d0,d1,...` rows of a PE table.
pub fn write_pe_csv(path: &Path, comments: &[(String, String)], table: &Tensor) -> CliResult<()> {
    let (n, d) = table.dims2()?;
    let header = std::iter::once("position".to_string()).chain((0..d).map(|k| format!("d{k}"))).collect::<Vec<_>>().join(",");
    let rows: Vec<String> = (0..n)
        .map(|i| std::iter::once(i.to_string()).chain(table.row(i).iter().map(|v| format!("{v:?}"))).collect::<Vec<_>>().join(","))
        .collect();
    write_csv(path, comments, &header, &rows)
}

pub fn read_pe_csv(path: &Path) -> CliResult<Tensor> {
    let text = std::fs::read_to_string(path)?;
    let origin = path.display().to_string();
    let mut values = Vec::new();
    let mut rows = 0;
    let mut width = None;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("position") {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let bad = |m: &str| CliError::validation(format!("{origin}:{}: {m}", n + 1));
        if *width.get_or_insert(cells.len()) != cells.len() || cells.len() < 2 {
            return Err(bad("ragged PE table"));
        }
        for c in &cells[1..] {
            values.push(c.parse::<f64>().map_err(|_| bad("not a number"))?);
        }
        rows += 1;
    }
    let d = width.ok_or_else(|| CliError::validation(format!("{origin}: empty PE table")))? - 1;
    Ok(Tensor::new(&[rows, d], values)?)
}

/// Square matrix with token-name header.
pub fn write_matrix(path: &Path, comments: &[(String, String)], values: &[f64], names: &[String]) -> CliResult<()> {
    let mut buf = comment_block(comments).into_bytes();
    pelab::analysis::write_matrix_csv(&mut buf, values, names)?;
    write_atomic(path, &buf)
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

pub fn progress(verbose: bool, msg: impl FnOnce() -> String) {
    if verbose {
        eprintln!("{}", msg());
    }
}
