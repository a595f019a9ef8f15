//! `pelab analyze`: compare every cell of a sweep with a reference scheme
//! (attention cosine and JSD, Procrustes-aligned PE distance) and rank
//! correlate those agreements with held-out performance across the
//! learnable-σ sweep.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pelab::analysis::{self, ReportRow};
use pelab::transformer::AttentionRecord;
use serde_json::Value;

use crate::config::{Experiment, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::sweep::{self, Cell};

pub const REPORT_FILE: &str = "report.csv";
pub const DEFAULT_REFERENCE: &str = "2d-fixed";

/// Model name used for rows that summarize the whole learnable sweep.
pub const SWEEP_MODEL: &str = "learnable-sweep";

#[derive(Debug, Clone)]
pub struct AnalyzeOptions {
    pub run_dir: PathBuf,
    pub reference_dir: PathBuf,
    /// Label of the reference scheme inside `reference_dir`.
    pub reference: String,
    /// Report path; defaults to `<run_dir>/report.csv`.
    pub out: Option<PathBuf>,
}

/// One analyzed cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellReport {
    pub label: String,
    pub sigma: Option<f64>,
    pub seed: u64,
    /// Held-out accuracy (LST) or validation MSE (masked prediction).
    pub performance: f64,
    pub attention_cosine: f64,
    pub attention_jsd: f64,
    pub pe_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub cells: Vec<CellReport>,
    pub rows: Vec<ReportRow>,
    pub path: PathBuf,
}

impl Report {
    /// A sweep-level value by metric name.
    pub fn sweep_metric(&self, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.model == SWEEP_MODEL && r.metric == metric).map(|r| r.value)
    }
}

struct Artifacts {
    label: String,
    sigma: Option<f64>,
    seed: u64,
    performance: f64,
    attention: AttentionRecord,
    pe: Option<pelab::numerics::Tensor>,
}

fn performance_metric(cfg: &ExperimentConfig) -> &'static str {
    match cfg.experiment {
        Experiment::Lst { .. } => "test_acc",
        _ => "val_mse",
    }
}

fn load_sweep(dir: &Path) -> CliResult<(ExperimentConfig, Vec<Artifacts>)> {
    let cfg = ExperimentConfig::load(&dir.join(sweep::CONFIG_FILE)).map_err(|e| e.context(format!("{} is not a sweep directory", dir.display())))?;
    let hash = cfg.hash();
    let metric = performance_metric(&cfg);
    let mut out = Vec::new();
    for cell in sweep::cells(&cfg) {
        if let Some(a) = load_cell(dir, &hash, metric, &cell)? {
            out.push(a);
        }
    }
    if out.is_empty() {
        return Err(CliError::validation(format!("{} holds no completed cells", dir.display())));
    }
    Ok((cfg, out))
}

fn load_cell(dir: &Path, hash: &str, metric: &str, cell: &Cell) -> CliResult<Option<Artifacts>> {
    let cdir = dir.join("runs").join(&cell.id);
    let Ok(result) = sweep::read_json::<Value>(&cdir.join(sweep::RESULT_FILE)) else {
        return Ok(None);
    };
    if result.get("config_hash").and_then(Value::as_str) != Some(hash) {
        return Ok(None);
    }
    let performance = result
        .get(metric)
        .and_then(Value::as_f64)
        .ok_or_else(|| CliError::validation(format!("{}: result lacks {metric}", cdir.display())))?;
    let path = cdir.join("attention.csv");
    let text = std::fs::read(&path)?;
    let attention = AttentionRecord::read_csv(&text[..], &path.display().to_string())?;
    let pe_path = cdir.join("pe.csv");
    let pe = if pe_path.exists() { Some(sweep::read_pe_csv(&pe_path)?) } else { None };
    Ok(Some(Artifacts {
        label: cell.pe.label(),
        sigma: cell.pe.sigma,
        seed: cell.seed,
        performance,
        attention,
        pe,
    }))
}

fn dims(a: &AttentionRecord) -> (usize, usize, usize) {
    (a.n_layers, a.n_heads, a.context)
}

/// Runs the comparison and writes the report.
pub fn analyze(opts: &AnalyzeOptions) -> CliResult<Report> {
    let (cfg, cells) = load_sweep(&opts.run_dir)?;
    let (ref_cfg, ref_cells) = load_sweep(&opts.reference_dir)?;
    let refs: Vec<&Artifacts> = ref_cells.iter().filter(|a| a.label == opts.reference).collect();
    if refs.is_empty() {
        return Err(CliError::validation(format!(
            "{} has no completed {} cells",
            opts.reference_dir.display(),
            opts.reference
        )));
    }
    let mismatch = |what: &str, a: String, b: String| {
        CliError::validation(format!(
            "{what} differ: config {:?} ({}) has {a}, reference config {:?} ({}) has {b}",
            cfg.name,
            opts.run_dir.display(),
            ref_cfg.name,
            opts.reference_dir.display()
        ))
    };
    let d_ref = dims(&refs[0].attention);
    let mut reports = Vec::new();
    for c in &cells {
        if dims(&c.attention) != d_ref {
            return Err(mismatch("attention dimensions (layers, heads, context)", format!("{:?}", dims(&c.attention)), format!("{d_ref:?}")));
        }
        let r = refs.iter().find(|r| r.seed == c.seed).unwrap_or(&refs[0]);
        let pe_distance = match (&c.pe, &r.pe) {
            (Some(p), Some(q)) => {
                if p.shape() != q.shape() {
                    return Err(mismatch("PE table shapes", format!("{:?}", p.shape()), format!("{:?}", q.shape())));
                }
                Some(analysis::pe_alignment_distance(p, q)?)
            }
            _ => None,
        };
        reports.push(CellReport {
            label: c.label.clone(),
            sigma: c.sigma,
            seed: c.seed,
            performance: c.performance,
            attention_cosine: analysis::attention_cosine(&c.attention, &r.attention)?,
            attention_jsd: analysis::attention_jsd(&c.attention, &r.attention)?,
            pe_distance,
        });
    }

    let perf = performance_metric(&cfg);
    let mut rows = Vec::new();
    for c in &reports {
        let mut push = |metric: &str, value: f64| {
            rows.push(ReportRow {
                model: c.label.clone(),
                seed: Some(c.seed),
                metric: metric.to_string(),
                value,
            })
        };
        push(perf, c.performance);
        push("attention_cosine", c.attention_cosine);
        push("attention_jsd", c.attention_jsd);
        if let Some(d) = c.pe_distance {
            push("pe_distance", d);
        }
    }
    rows.extend(sweep_correlations(&reports, &opts.reference, perf));

    let path = opts.out.clone().unwrap_or_else(|| opts.run_dir.join(REPORT_FILE));
    let mut buf = format!("# experiment: {}\n# reference: {} ({})\n", cfg.name, opts.reference, ref_cfg.name).into_bytes();
    analysis::write_report(&mut buf, &rows)?;
    sweep::write_atomic(&path, &buf)?;
    Ok(Report { cells: reports, rows, path })
}

/// Spearman ρ of each agreement measure against performance over the
/// learnable cells, once per cell and once on per-σ medians. Lists with
/// fewer than three points yield no row; constant ranks give NaN.
pub fn sweep_correlations(cells: &[CellReport], reference: &str, perf: &str) -> Vec<ReportRow> {
    let swept: Vec<&CellReport> = cells.iter().filter(|c| c.sigma.is_some() && c.label != reference).collect();
    type Measure = fn(&CellReport) -> Option<f64>;
    let measures: [(&str, Measure); 3] = [
        ("attention_cosine", |c| Some(c.attention_cosine)),
        ("attention_jsd", |c| Some(c.attention_jsd)),
        ("pe_distance", |c| c.pe_distance),
    ];
    let mut rows = Vec::new();
    for (name, f) in measures {
        let pts: Vec<(f64, f64, f64)> = swept.iter().filter_map(|c| f(c).map(|m| (c.sigma.unwrap_or(0.0), m, c.performance))).collect();
        let (x, y): (Vec<f64>, Vec<f64>) = pts.iter().map(|p| (p.1, p.2)).unzip();
        let mut push = |metric: String, v: Option<f64>| {
            if let Some(value) = v {
                rows.push(ReportRow {
                    model: SWEEP_MODEL.to_string(),
                    seed: None,
                    metric,
                    value,
                });
            }
        };
        push(format!("spearman_{name}_{perf}"), spearman(&x, &y));
        let mut groups: BTreeMap<u64, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for (s, m, p) in &pts {
            let g = groups.entry(s.to_bits()).or_default();
            g.0.push(*m);
            g.1.push(*p);
        }
        let medians: Option<(Vec<f64>, Vec<f64>)> = groups
            .values()
            .map(|(m, p)| Some((analysis::median(m).ok()?, analysis::median(p).ok()?)))
            .collect::<Option<Vec<_>>>()
            .map(|v| v.into_iter().unzip());
        push(
            format!("spearman_{name}_{perf}_sigma_medians"),
            medians.and_then(|(mx, my)| spearman(&mx, &my)),
        );
    }
    rows
}

fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    (x.len() >= 3).then(|| analysis::rank_correlation(x, y).unwrap_or(f64::NAN))
}
