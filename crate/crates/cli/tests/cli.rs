use std::path::Path;
use std::process::Command;

use pelab_cli::analyze::{self, AnalyzeOptions};
use pelab_cli::config::{parse_seeds, ExperimentConfig};
use pelab_cli::ingest::{self, IngestOptions};
use pelab_cli::sweep::{Existing, RunOptions};
use pelab_cli::{lst_sweep, masked};
use proptest::prelude::*;

const TINY_LST: &str = r#"{
  "name": "tiny-lst",
  "experiment": {
    "kind": "lst",
    "split": { "n_train": 40, "n_test": 4, "threshold": 0.8, "complexity_mix": [1.0, 1.0, 1.0], "seed": 0, "max_candidates": 200000 }
  },
  "model": { "n_layers": 1, "d_model": 16, "n_heads": 1 },
  "pes": [{ "kind": "2d-fixed", "grid": [4, 4] }, { "kind": "nope" }],
  "sigmas": [0.1, 1.0, 2.0],
  "optimizer": { "kind": "adam", "lr": 0.001 },
  "train": { "batch_size": 8, "budget": 2, "eval_every": 1 },
  "seeds": [0]
}"#;

const TINY_NMAR: &str = r#"{
  "name": "tiny-nmar",
  "experiment": { "kind": "nmar", "simulation": { "steps": 300 }, "mask_level": 0.5, "null_shuffles": 20 },
  "model": { "n_layers": 1, "d_model": 16, "n_heads": 1 },
  "sigmas": [0.1],
  "optimizer": { "kind": "adam", "lr": 0.001 },
  "train": { "batch_size": 8, "budget": 6, "eval_every": 3 },
  "seeds": [0]
}"#;

fn opts(existing: Existing) -> RunOptions {
    RunOptions {
        existing,
        workers: 1,
        verbose: false,
    }
}

fn pelab(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_pelab")).args(args).output().unwrap()
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn config_hash_ignores_seeds_and_output_dir() {
    let a = ExperimentConfig::parse(TINY_LST).unwrap();
    let mut b = a.clone();
    b.seeds = vec![3, 4, 5];
    b.output_dir = Some("elsewhere".into());
    assert_eq!(a.hash(), b.hash());
    let mut c = a.clone();
    c.train.budget += 1;
    assert_ne!(a.hash(), c.hash());
    assert_eq!(a.hash().len(), 16);
}

#[test]
fn config_round_trips_through_json() {
    for text in [TINY_LST, TINY_NMAR] {
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(ExperimentConfig::parse(&cfg.to_json()).unwrap(), cfg);
    }
}

#[test]
fn unknown_config_fields_are_rejected() {
    let bad = TINY_LST.replace("\"seeds\"", "\"sedes\"");
    assert!(ExperimentConfig::parse(&bad).is_err());
}

#[test]
fn seed_lists_parse() {
    assert_eq!(parse_seeds("3").unwrap(), vec![0, 1, 2]);
    assert_eq!(parse_seeds("4,9").unwrap(), vec![4, 9]);
    assert!(parse_seeds("x").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn hash_is_stable_under_reserialization(budget in 1usize..1000, lr in 1e-6f64..1e-1) {
        let mut cfg = ExperimentConfig::parse(TINY_LST).unwrap();
        cfg.train.budget = budget;
        cfg.optimizer = cfg.optimizer.clone().with_lr(lr);
        let again = ExperimentConfig::parse(&cfg.to_json()).unwrap();
        prop_assert_eq!(cfg.hash(), again.hash());
    }
}

#[test]
fn lst_sweep_writes_results_refuses_rerun_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let cfg = ExperimentConfig::parse(TINY_LST).unwrap();
    let out = lst_sweep::run_lst(&cfg, &dir, &opts(Existing::Refuse)).unwrap();
    assert_eq!(out.results.len(), 5);
    for name in ["config.json", "summary.csv", "data/train.csv", "data/test.csv"] {
        assert!(dir.join(name).exists(), "{name} missing");
    }
    let cell = dir.join("runs/learn-0.1_s0");
    for name in ["metrics.csv", "attention.csv", "pe.csv", "checkpoint.bin", "result.json"] {
        assert!(cell.join(name).exists(), "{name} missing");
    }
    assert!(out.results.iter().all(|r| (0.0..=1.0).contains(&r.test_acc)));

    // A finished sweep is not silently overwritten.
    assert!(lst_sweep::run_lst(&cfg, &dir, &opts(Existing::Refuse)).is_err());

    // Removing one cell's result makes the sweep partial; only that cell retrains.
    let before = std::fs::read(dir.join("runs/nope_s0/result.json")).unwrap();
    std::fs::remove_file(cell.join("result.json")).unwrap();
    let again = lst_sweep::run_lst(&cfg, &dir, &opts(Existing::Refuse)).unwrap();
    assert_eq!(again.results.len(), 5);
    assert_eq!(std::fs::read(dir.join("runs/nope_s0/result.json")).unwrap(), before);

    // A different config in the same directory is refused.
    let mut other = cfg.clone();
    other.train.budget = 3;
    let err = lst_sweep::run_lst(&other, &dir, &opts(Existing::Resume)).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn analyze_self_comparison_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let cfg = ExperimentConfig::parse(TINY_LST).unwrap();
    lst_sweep::run_lst(&cfg, &dir, &opts(Existing::Refuse)).unwrap();
    let report = analyze::analyze(&AnalyzeOptions {
        run_dir: dir.clone(),
        reference_dir: dir.clone(),
        reference: "2d-fixed".into(),
        out: None,
    })
    .unwrap();
    let me = report.cells.iter().find(|c| c.label == "2d-fixed").unwrap();
    assert!((me.attention_cosine - 1.0).abs() < 1e-12);
    assert!(me.attention_jsd.abs() < 1e-12);
    assert!(me.pe_distance.unwrap() < 1e-9);
    assert!(report.sweep_metric("spearman_pe_distance_test_acc").is_some());
    assert!(dir.join("report.csv").exists());
}

#[test]
fn analyze_rejects_mismatched_dimensions() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let cfg = ExperimentConfig::parse(TINY_LST).unwrap();
    lst_sweep::run_lst(&cfg, &a, &opts(Existing::Refuse)).unwrap();
    let mut wide = cfg.clone();
    wide.name = "tiny-wide".into();
    wide.model.d_model = 32;
    lst_sweep::run_lst(&wide, &b, &opts(Existing::Refuse)).unwrap();
    let err = analyze::analyze(&AnalyzeOptions {
        run_dir: a,
        reference_dir: b,
        reference: "2d-fixed".into(),
        out: None,
    })
    .unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("tiny-lst") && msg.contains("tiny-wide"), "{msg}");
}

#[test]
fn nmar_sweep_reports_network_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let cfg = ExperimentConfig::parse(TINY_NMAR).unwrap();
    let out = masked::run_masked(&cfg, &dir, &opts(Existing::Refuse)).unwrap();
    let r = &out.results[0];
    assert!(r.val_mse.is_finite() && r.baseline_mse > 0.0);
    assert!(r.modularity.is_some() && r.clustering.is_some() && r.null_q95.is_some());
    assert_eq!(out.partition.unwrap().len(), 15);
    assert!(dir.join("runs/learn-0.1_s0/distance.csv").exists());
}

fn write_matrix(path: &Path, rows: usize) {
    let mut text = String::from("a,b,c,d\n");
    for t in 0..rows {
        let t = t as f64;
        text += &format!("{},{},{},{}\n", t.sin() * 3.0 + 1.0, t.cos(), (t * 0.3).sin() * 10.0, t % 7.0);
    }
    write(path, &text);
}

#[test]
fn ingest_z_scores_and_guards_its_output() {
    let tmp = tempfile::tempdir().unwrap();
    let matrix = tmp.path().join("m.csv");
    let partition = tmp.path().join("p.csv");
    write_matrix(&matrix, 50);
    write(&partition, "token,module\na,0\nb,0\nc,1\nd,1\n");
    let out = tmp.path().join("ds");
    let o = IngestOptions {
        matrix: matrix.clone(),
        partition: Some(partition.clone()),
        out: out.clone(),
        force: false,
    };
    let info = ingest::ingest(&o).unwrap();
    assert_eq!((info.n_timepoints, info.n_tokens), (50, 4));
    let series = pelab::nmar::load_series(&out.join("data.csv")).unwrap();
    let (means, sds) = pelab::nmar::column_stats(&series.series);
    assert!(means.iter().all(|m| m.abs() < 1e-9) && sds.iter().all(|s| (s - 1.0).abs() < 1e-9));

    let again = ingest::ingest(&o).unwrap_err();
    assert_eq!(again.exit_code(), 1);
    assert!(ingest::ingest(&IngestOptions { force: true, ..o.clone() }).is_ok());

    write(&partition, "token,module\na,0\nb,0\nc,1\n");
    let short = ingest::ingest(&IngestOptions {
        out: tmp.path().join("ds2"),
        ..o
    });
    assert!(short.is_err());
}

#[test]
fn ingest_rejects_constant_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let matrix = tmp.path().join("m.csv");
    write(&matrix, "a,b\n1,2\n1,3\n1,4\n");
    let err = ingest::ingest(&IngestOptions {
        matrix,
        partition: None,
        out: tmp.path().join("ds"),
        force: false,
    })
    .unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn binary_exit_codes() {
    assert!(pelab(&["--help"]).status.success());
    assert_eq!(pelab(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(pelab(&["lst", "--config", "/nonexistent/config.json"]).status.code(), Some(1));

    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    write(&cfg, TINY_NMAR);
    let dir = tmp.path().join("run");
    let args = ["lst", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()];
    // An nmar config handed to `lst` is a validation error.
    assert_eq!(pelab(&args).status.code(), Some(1));

    let missing = tmp.path().join("none.py");
    let out = Command::new(env!("CARGO_BIN_EXE_pelab"))
        .env("PELAB_PLOTS_SCRIPT", &missing)
        .args(["export-plots", "heatmap", "x.csv", "--output", "y.png"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_subcommand_passes_and_detects_corruption() {
    let ok = pelab(&["gradcheck"]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stdout));
    let bad = pelab(&["gradcheck", "--corrupt", "matmul"]);
    assert_eq!(bad.status.code(), Some(1));
}
