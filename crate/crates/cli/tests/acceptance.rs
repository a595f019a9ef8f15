//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Environment:
//! - `PELAB_ACCEPTANCE_DIR`: persistent run directory for the trained
//!   criteria (default `<workspace>/target/acceptance`). Finished cells are
//!   reused, so only the first run pays for training.
//! - `PELAB_ACCEPTANCE_WORKERS`: parallel training jobs (default 1).
//! - `PELAB_ACCEPTANCE_QUICK=1`: report the trained criteria as SKIP.
//! - `PELAB_ACCEPTANCE_STRICT=1`: exit non-zero when any criterion fails.
//!
//! A positional argument filters criteria by substring.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use pelab::analysis::{self, Partition};
use pelab::lst::{self, Cell, Complexity, GeneratorConfig};
use pelab::numerics::gradcheck::{self, CheckOptions};
use pelab::numerics::{ParamStore, Tensor};
use pelab::pe::{self, RotaryAngles};
use pelab::rng;
use pelab::training::{Optimizer, OptimizerConfig, OptimizerKind};
use pelab_cli::analyze::{self as an, AnalyzeOptions};
use pelab_cli::config::{Experiment, ExperimentConfig};
use pelab_cli::lst_sweep;
use pelab_cli::masked;
use pelab_cli::sweep::{self, Existing, RunOptions};
use rand::Rng as _;

const LST_DESK: &str = include_str!("../../../configs/lst-desk.json");
const NMAR_DESK: &str = include_str!("../../../configs/nmar-desk.json");

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = fn() -> Outcome;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn acceptance_dir() -> PathBuf {
    std::env::var_os("PELAB_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance"))
}

fn quick() -> bool {
    std::env::var("PELAB_ACCEPTANCE_QUICK").is_ok_and(|v| v == "1")
}

fn run_options() -> RunOptions {
    RunOptions {
        existing: Existing::Resume,
        workers: std::env::var("PELAB_ACCEPTANCE_WORKERS").ok().and_then(|w| w.parse().ok()).unwrap_or(1),
        verbose: true,
    }
}

fn median(v: &[f64]) -> f64 {
    analysis::median(v).unwrap_or(f64::NAN)
}

// ---------------------------------------------------------------- gradients

fn gradient_soundness() -> Outcome {
    let t = Instant::now();
    let report = match gradcheck::run_suite(0, &CheckOptions::default()) {
        Ok(r) => r,
        Err(e) => return Outcome::Fail(format!("suite errored: {e}")),
    };
    let secs = t.elapsed().as_secs_f64();
    let has_model = report.results.iter().any(|r| r.name.starts_with("model"));
    let failures: Vec<String> = report.failures().map(|r| format!("{} ({:.2e})", r.name, r.rel_err)).collect();
    verdict(
        report.passed() && has_model && secs < 60.0 && report.tolerance <= 1e-4,
        format!(
            "{} checks, max rel err {:.2e} (tol {:.0e}), {:.1}s; failures: [{}]",
            report.results.len(),
            report.max_rel_err(),
            report.tolerance,
            secs,
            failures.join(", ")
        ),
    )
}

// ---------------------------------------------------------- positional codes

fn oracle_sinusoid(pos: f64, k: usize, width: usize) -> f64 {
    let i = k / 2;
    let angle = pos / 10000f64.powf(2.0 * i as f64 / width as f64);
    if k.is_multiple_of(2) {
        angle.sin()
    } else {
        angle.cos()
    }
}

fn pe_closed_forms() -> Outcome {
    let mut worst: f64 = 0.0;
    for d in [16, 64, 160] {
        let table = pe::build_1d_fixed(16, d).expect("1d table").values;
        for p in 0..16 {
            for k in 0..d {
                worst = worst.max((table.at(&[p, k]) - oracle_sinusoid(p as f64, k, d)).abs());
            }
        }
        let table = pe::build_2d_fixed(4, 4, d).expect("2d table").values;
        let half = d / 2;
        for t in 0..16 {
            let (r, c) = (t / 4, t % 4);
            for k in 0..d {
                let expect = if k < half {
                    oracle_sinusoid(r as f64, k, half)
                } else {
                    oracle_sinusoid(c as f64, k - half, half)
                };
                worst = worst.max((table.at(&[t, k]) - expect).abs());
            }
        }
    }
    // Isometry: distance depends only on (|Δrow|, |Δcol|).
    let mut spread: f64 = 0.0;
    let mut pairs = 0;
    for d in [16, 64, 160] {
        let table = pe::build_2d_fixed(4, 4, d).expect("2d table").values;
        let mut groups: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
        for a in 0..16 {
            for b in a + 1..16 {
                let dist = table.row(a).iter().zip(table.row(b)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                let key = ((a / 4).abs_diff(b / 4), (a % 4).abs_diff(b % 4));
                groups.entry(key).or_default().push(dist);
                pairs += 1;
            }
        }
        for g in groups.values() {
            let (lo, hi) = g.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            spread = spread.max(hi - lo);
        }
    }
    verdict(
        worst <= 1e-12 && spread <= 1e-12 && pairs == 360,
        format!("max |table − formula| {worst:.1e}; isometry spread {spread:.1e} over {} pairs per d", pairs / 3),
    )
}

fn rope_relativity() -> Outcome {
    let (context, d_head) = (16, 8);
    let angles = RotaryAngles::new(context, d_head).expect("angles");
    let mut r = rng::seeded(3);
    let mut worst: f64 = 0.0;
    let mut distinct_offsets = 0;
    for _ in 0..5 {
        let q: Vec<f64> = (0..d_head).map(|_| r.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..d_head).map(|_| r.random_range(-1.0..1.0)).collect();
        let tile = |v: &[f64]| Tensor::from_fn(&[context, d_head], |i| v[i % d_head]);
        let rq = pe::rope_rotate(&tile(&q), &angles).expect("rotate q");
        let rk = pe::rope_rotate(&tile(&k), &angles).expect("rotate k");
        let mut by_offset: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
        for m in 0..context {
            for n in 0..context {
                let dot: f64 = rq.row(m).iter().zip(rk.row(n)).map(|(a, b)| a * b).sum();
                by_offset.entry(m as i64 - n as i64).or_default().push(dot);
            }
        }
        distinct_offsets = by_offset.len();
        for g in by_offset.values() {
            for v in g {
                worst = worst.max((v - g[0]).abs());
            }
        }
    }
    verdict(
        worst <= 1e-10 && distinct_offsets == 2 * context - 1,
        format!("max deviation within an offset {worst:.1e} across {distinct_offsets} offsets, 5 random (q, k)"),
    )
}

// ------------------------------------------------------------------- LST data

/// Complexity recomputed from the probe's row and column.
fn oracle_complexity(cells: &[Cell; lst::N_CELLS], probe: usize) -> u8 {
    let line = |idx: &mut dyn Iterator<Item = usize>| -> u8 {
        idx.filter_map(|i| match cells[i] {
            Cell::Symbol(s) => Some(1u8 << s),
            _ => None,
        })
        .fold(0, |a, b| a | b)
    };
    let (r, c) = (probe / lst::SIDE, probe % lst::SIDE);
    let row = line(&mut (0..lst::SIDE).map(|j| r * lst::SIDE + j));
    let col = line(&mut (0..lst::SIDE).map(|i| i * lst::SIDE + c));
    if row.count_ones() == 3 || col.count_ones() == 3 {
        1
    } else if (row | col).count_ones() == 3 {
        2
    } else {
        3
    }
}

fn lst_integrity() -> Outcome {
    let squares = lst::enumerate_latin_squares();
    let mut distinct = squares.iter().map(|s| s.0).collect::<Vec<_>>();
    distinct.sort_unstable();
    distinct.dedup();
    let all_valid = squares.iter().all(|s| s.is_valid());
    let reduced = squares.iter().filter(|s| s.is_reduced()).count();

    let cfg = GeneratorConfig::default();
    let mut bad = Vec::new();
    let n = 10_000u64;
    for seed in 0..n {
        let want = Complexity::ALL[(seed % 3) as usize];
        let p = match lst::generate_puzzle(want, seed, &cfg) {
            Ok(p) => p,
            Err(e) => {
                bad.push(format!("seed {seed}: {e}"));
                continue;
            }
        };
        // Uniqueness by brute force over every square consistent with the clues.
        let mut answers = 0u8;
        for sq in &squares {
            let consistent = p.cells.iter().zip(sq.0.iter()).all(|(c, &s)| !matches!(c, Cell::Symbol(v) if *v != s));
            if consistent {
                answers |= 1 << sq.0[p.probe_index];
            }
        }
        let unique = answers.count_ones() == 1 && answers == 1 << p.solution;
        let class = oracle_complexity(&p.cells, p.probe_index);
        if !unique || class != want.level() || p.complexity != want {
            bad.push(format!("seed {seed}: unique {unique}, class {class} vs {}", want.level()));
        }
    }

    let spec: ExperimentConfig = ExperimentConfig::parse(LST_DESK).expect("lst-desk config");
    let Experiment::Lst { split } = &spec.experiment else {
        return Outcome::Fail("lst-desk is not an lst config".into());
    };
    let built = match lst::build_split(split) {
        Ok(s) => s,
        Err(e) => return Outcome::Fail(format!("split failed: {e}")),
    };
    let mut min_dis = f64::INFINITY;
    for t in &built.test {
        for r in &built.train {
            min_dis = min_dis.min(lst::jaccard_dissimilarity(&t.puzzle, &r.puzzle));
        }
    }
    let sizes_ok = built.train.len() == split.n_train && built.test.len() == split.n_test;
    verdict(
        squares.len() == 576 && distinct.len() == 576 && all_valid && reduced == 4 && bad.is_empty() && min_dis > 0.8 && sizes_ok,
        format!(
            "{} squares ({} reduced); {n} puzzles, {} failures{}; split {}×{} min dissimilarity {min_dis:.3}",
            squares.len(),
            reduced,
            bad.len(),
            bad.first().map(|b| format!(" (first: {b})")).unwrap_or_default(),
            built.test.len(),
            built.train.len()
        ),
    )
}

// ------------------------------------------------------------ trained sweeps

fn lst_config() -> Result<ExperimentConfig, String> {
    let cfg = ExperimentConfig::parse(LST_DESK).map_err(|e| e.to_string())?;
    let m = &cfg.model;
    let Experiment::Lst { split } = &cfg.experiment else {
        return Err("not an lst config".into());
    };
    let sigmas_ok = cfg.sigmas == [0.1, 0.2, 0.5, 1.0, 2.0];
    let opt_ok = cfg.optimizer.kind == OptimizerKind::Adam && cfg.optimizer.lr() == 1e-4;
    if !(m.d_model == 64 && m.n_layers == 2 && m.n_heads == 1 && split.n_train == 2000 && cfg.train.budget == 300 && opt_ok && cfg.seeds.len() == 5 && sigmas_ok) {
        return Err("configs/lst-desk.json no longer matches the criterion's settings".into());
    }
    Ok(cfg)
}

fn lst_sweep_results() -> Result<Vec<lst_sweep::LstResult>, String> {
    let cfg = lst_config()?;
    let dir = acceptance_dir().join("lst-desk");
    lst_sweep::run_lst(&cfg, &dir, &run_options()).map(|s| s.results).map_err(|e| e.to_string())
}

fn medians_by_label(results: &[lst_sweep::LstResult]) -> BTreeMap<String, f64> {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in results {
        groups.entry(r.pe.clone()).or_default().push(r.test_acc);
    }
    groups.into_iter().map(|(k, v)| (k, median(&v))).collect()
}

fn lst_initialization_effect() -> Outcome {
    if quick() {
        return Outcome::Skip("PELAB_ACCEPTANCE_QUICK=1".into());
    }
    let results = match lst_sweep_results() {
        Ok(r) => r,
        Err(e) => return Outcome::Fail(e),
    };
    let med = medians_by_label(&results);
    let get = |k: &str| med.get(k).copied().unwrap_or(f64::NAN);
    let gap = get("learn-0.2") - get("learn-2.0");
    let two_d = get("2d-fixed");
    let baselines = ["1d-fixed", "1d-relative", "1d-rope"];
    let beats = baselines.iter().all(|b| two_d >= get(b));
    let nope = get("nope");
    let slowest = results.iter().map(|r| r.wall_clock_secs).fold(0.0, f64::max);
    let table: Vec<String> = med.iter().map(|(k, v)| format!("{k} {v:.3}")).collect();
    verdict(
        gap >= 0.10 && beats && (0.20..=0.45).contains(&nope) && slowest <= 3600.0,
        format!(
            "median test acc: {}; learn-0.2 − learn-2.0 = {gap:.3} (need ≥ 0.10); 2d-fixed ≥ 1d baselines: {beats}; nope in [0.20, 0.45]: {}; slowest model {:.0}s",
            table.join(", "),
            (0.20..=0.45).contains(&nope),
            slowest
        ),
    )
}

fn pe_interpretability() -> Outcome {
    if quick() {
        return Outcome::Skip("PELAB_ACCEPTANCE_QUICK=1".into());
    }
    if let Err(e) = lst_sweep_results() {
        return Outcome::Fail(e);
    }
    let dir = acceptance_dir().join("lst-desk");
    let report = match an::analyze(&AnalyzeOptions {
        run_dir: dir.clone(),
        reference_dir: dir,
        reference: "2d-fixed".into(),
        out: None,
    }) {
        Ok(r) => r,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let rho = report.sweep_metric("spearman_pe_distance_test_acc_sigma_medians").unwrap_or(f64::NAN);
    let rho_cells = report.sweep_metric("spearman_pe_distance_test_acc").unwrap_or(f64::NAN);
    let mut per_sigma: BTreeMap<u64, (f64, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for c in report.cells.iter().filter(|c| c.sigma.is_some()) {
        let s = c.sigma.unwrap_or(0.0);
        let e = per_sigma.entry(s.to_bits()).or_insert((s, Vec::new(), Vec::new()));
        e.1.extend(c.pe_distance);
        e.2.push(c.performance);
    }
    let table: Vec<String> = per_sigma
        .values()
        .map(|(s, d, a)| format!("σ{s}: dist {:.2} acc {:.3}", median(d), median(a)))
        .collect();
    verdict(
        rho <= -0.6,
        format!(
            "Spearman ρ(PE distance to 2d-fixed, test acc) over per-σ medians = {rho:.3} (need ≤ −0.6); over all cells {rho_cells:.3}; {}",
            table.join("; ")
        ),
    )
}

fn nmar_structure_recovery() -> Outcome {
    if quick() {
        return Outcome::Skip("PELAB_ACCEPTANCE_QUICK=1".into());
    }
    let cfg = match ExperimentConfig::parse(NMAR_DESK) {
        Ok(c) => c,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let settings_ok = match &cfg.experiment {
        Experiment::Nmar {
            simulation,
            mask_level,
            null_shuffles,
            ..
        } => {
            simulation.steps == 20_000
                && *mask_level == 0.5
                && *null_shuffles == 1000
                && cfg.train.budget == 5000
                && cfg.model.d_model == 64
                && cfg.sigmas == [0.1, 2.0]
                && cfg.pes.is_empty()
                && cfg.seeds.len() == 5
        }
        _ => false,
    };
    if !settings_ok {
        return Outcome::Fail("configs/nmar-desk.json no longer matches the criterion's settings".into());
    }
    let dir = acceptance_dir().join("nmar-desk");
    let out = match masked::run_masked(&cfg, &dir, &run_options()) {
        Ok(o) => o,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let Some(partition) = out.partition.clone() else {
        return Outcome::Fail("simulation produced no partition".into());
    };
    let modularity_of = |label: &str| -> Vec<f64> { out.results.iter().filter(|r| r.pe == label).filter_map(|r| r.modularity).collect() };
    let (low, high) = (modularity_of("learn-0.1"), modularity_of("learn-2.0"));
    if low.len() != 5 || high.len() != 5 {
        return Outcome::Fail(format!("expected 5 modularity values per scheme, got {} and {}", low.len(), high.len()));
    }
    let null = match median_null(&out.sweep, &cfg, &partition, 1000) {
        Ok(n) => n,
        Err(e) => return Outcome::Fail(e),
    };
    let q95 = analysis::quantile(&null, 0.95).unwrap_or(f64::NAN);
    let (m_low, m_high) = (median(&low), median(&high));
    let slowest = out.results.iter().map(|r| r.wall_clock_secs).fold(0.0, f64::max);
    verdict(
        m_low > m_high && m_low > q95 && slowest <= 1800.0,
        format!(
            "median modularity learn-0.1 {m_low:.4} vs learn-2.0 {m_high:.4}; shuffle-null 95th pct {q95:.4}; slowest model {slowest:.0}s"
        ),
    )
}

/// Median-over-seeds learn-0.1 modularity under each label shuffle.
fn median_null(sw: &sweep::Sweep, cfg: &ExperimentConfig, partition: &Partition, n: usize) -> Result<Vec<f64>, String> {
    let mut weights = Vec::new();
    for cell in sweep::cells(cfg).iter().filter(|c| c.pe.label() == "learn-0.1") {
        let table = sweep::read_pe_csv(&sw.cell_dir(cell).join("pe.csv")).map_err(|e| e.to_string())?;
        weights.push(analysis::pe_distance_matrix(&table).map_err(|e| e.to_string())?.network_weights());
    }
    let mut r = rng::stream_rng(0, rng::stream::SHUFFLE);
    (0..n)
        .map(|_| {
            let p = partition.shuffled(&mut r);
            let qs: Vec<f64> = weights.iter().map(|w| analysis::modularity(w, &p)).collect::<pelab::Result<_>>().map_err(|e| e.to_string())?;
            Ok(median(&qs))
        })
        .collect()
}

// --------------------------------------------------------------- oracles

fn naive_modularity(w: &[f64], labels: &[usize]) -> f64 {
    let n = labels.len();
    let k: Vec<f64> = (0..n).map(|i| (0..n).map(|j| w[i * n + j]).sum()).collect();
    let l: f64 = k.iter().sum();
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            if labels[i] == labels[j] {
                q += w[i * n + j] - k[i] * k[j] / l;
            }
        }
    }
    q / l
}

fn naive_clustering(w: &[f64], labels: &[usize], modules: usize) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for m in 0..modules {
        let (mut win, mut nin, mut wout, mut nout) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if i == j || labels[i] != m {
                    continue;
                }
                if labels[j] == m {
                    win += w[i * n + j];
                    nin += 1.0;
                } else {
                    wout += w[i * n + j];
                    nout += 1.0;
                }
            }
        }
        let (a, b) = (win / nin, wout / nout);
        total += (a - b) / a;
    }
    total / modules as f64
}

/// Product of an even number of Householder reflections.
fn random_rotation(d: usize, r: &mut rng::Rng) -> Vec<f64> {
    let mut q: Vec<f64> = (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect();
    for _ in 0..2 * d {
        let v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let vv: f64 = v.iter().map(|x| x * x).sum();
        // q ← q (I − 2 v vᵀ / vᵀv)
        for row in 0..d {
            let dot: f64 = (0..d).map(|k| q[row * d + k] * v[k]).sum();
            for col in 0..d {
                q[row * d + col] -= 2.0 * dot * v[col] / vv;
            }
        }
    }
    q
}

fn metric_oracles() -> Outcome {
    let mut r = rng::seeded(11);
    let n = 20;
    let (mut dq, mut dc) = (0.0f64, 0.0f64);
    for trial in 0..20 {
        let modules = 2 + trial % 4;
        let labels: Vec<usize> = (0..n).map(|i| if i < 2 * modules { i % modules } else { r.random_range(0..modules) }).collect();
        let p = Partition::new(labels.clone()).expect("partition");
        let w: Vec<f64> = (0..n * n).map(|_| r.random_range(0.01..1.0)).collect();
        dq = dq.max((analysis::modularity(&w, &p).expect("Q") - naive_modularity(&w, &labels)).abs());
        dc = dc.max((analysis::network_clustering(&w, &p).expect("C") - naive_clustering(&w, &labels, modules)).abs());
    }
    let uniform_q = analysis::modularity(&vec![0.5; n * n], &Partition::new((0..n).map(|i| i % 4).collect()).expect("partition")).expect("Q");

    let mut resid: f64 = 0.0;
    let mut rot_err: f64 = 0.0;
    for (rows, d) in [(16, 8), (16, 16), (15, 64)] {
        let a = Tensor::from_fn(&[rows, d], |_| r.random_range(-1.0..1.0));
        let rot = random_rotation(d, &mut r);
        let b = Tensor::from_fn(&[rows, d], |i| {
            let (row, col) = (i / d, i % d);
            (0..d).map(|k| a.at(&[row, k]) * rot[k * d + col]).sum()
        });
        let fit = analysis::orthogonal_procrustes(&a, &b).expect("procrustes");
        resid = resid.max(fit.residual);
        if rows >= d {
            rot_err = rot_err.max(fit.rotation.data().iter().zip(&rot).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        }
    }
    let jsd = analysis::jsd(&[1.0, 0.0], &[0.5, 0.5]).unwrap_or(f64::NAN);
    verdict(
        dq <= 1e-12 && dc <= 1e-12 && uniform_q.abs() <= 1e-12 && resid <= 1e-8 && (jsd - 0.3113).abs() <= 1e-4,
        format!(
            "modularity vs naive {dq:.1e}, clustering vs naive {dc:.1e}; uniform Q {uniform_q:.1e}; Procrustes residual {resid:.1e} (rotation error {rot_err:.1e}); JSD {jsd:.6}"
        ),
    )
}

fn adamw_decay() -> Outcome {
    let mut store = ParamStore::default();
    let id = store.add("w", Tensor::from_fn(&[3, 4], |i| 0.5 + i as f64).with_grad());
    let start = store.get(id).data().to_vec();
    let cfg = OptimizerConfig::adamw().with_lr(1e-3);
    let (lr, wd) = (cfg.lr(), cfg.weight_decay());
    let mut opt = Optimizer::new(cfg, &store).expect("optimizer");
    for _ in 0..100 {
        store.zero_grad();
        opt.step(&mut store);
    }
    let factor = (1.0 - lr * wd).powi(100);
    let err = store.get(id).data().iter().zip(&start).map(|(v, s)| (v - s * factor).abs()).fold(0.0, f64::max);
    verdict(
        err <= 1e-12 && wd > 0.0,
        format!("lr {lr}, weight decay {wd}: max |w − w₀(1 − lr·wd)¹⁰⁰| = {err:.1e}"),
    )
}

fn main() -> ExitCode {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: [(&str, Check); 9] = [
        ("gradient-soundness", gradient_soundness),
        ("pe-closed-forms", pe_closed_forms),
        ("rope-relativity", rope_relativity),
        ("lst-data-integrity", lst_integrity),
        ("lst-initialization-effect", lst_initialization_effect),
        ("pe-interpretability-correlation", pe_interpretability),
        ("nmar-structure-recovery", nmar_structure_recovery),
        ("metric-oracles", metric_oracles),
        ("adamw-decay", adamw_decay),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let t = Instant::now();
        let outcome = check();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Outcome::Pass(d) => println!("PASS {name} [{secs:.1}s]: {d}"),
            Outcome::Fail(d) => {
                failed += 1;
                println!("FAIL {name} [{secs:.1}s]: {d}");
            }
            Outcome::Skip(d) => println!("SKIP {name}: {d}"),
        }
    }
    if failed > 0 && std::env::var("PELAB_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
