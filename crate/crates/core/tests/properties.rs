#![allow(clippy::needless_range_loop)]

use pelab::analysis::{self, Partition};
use pelab::lst::{self, Complexity, GeneratorConfig};
use pelab::nmar;
use pelab::numerics::{ParamStore, Tape, Tensor};
use pelab::pe::PeSpec;
use pelab::pe::PeKind;
use pelab::rng;
use pelab::training::{Optimizer, OptimizerConfig};
use pelab::transformer::{Input, InputMode, Model, ModelConfig};
use proptest::prelude::*;
use rand::Rng as _;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| Tensor::new(&[rows, cols], v).unwrap())
}

fn small_model(pe: PeSpec, seed: u64) -> Model {
    let mut cfg = ModelConfig::new(16, 16, InputMode::Tokens { vocab: 6 }, 4, pe);
    cfg.n_layers = 2;
    Model::new(cfg, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(x in matrix(3, 7), shift in -50.0f64..50.0) {
        let mut tape = Tape::new();
        let a = tape.leaf(x.clone());
        let shifted = tape.leaf(Tensor::from_fn(&[3, 7], |i| x.data()[i] + shift));
        let p = tape.softmax(a, 1).unwrap();
        let q = tape.softmax(shifted, 1).unwrap();
        for r in 0..3 {
            let row = tape.value(p).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0));
            for (u, v) in row.iter().zip(tape.value(q).row(r)) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(x in matrix(4, 9)) {
        prop_assume!((0..4).all(|r| {
            let row = x.row(r);
            let m = row.iter().sum::<f64>() / 9.0;
            row.iter().map(|v| (v - m).powi(2)).sum::<f64>() > 1e-3
        }));
        let mut tape = Tape::new();
        let a = tape.leaf(x);
        let g = tape.leaf(Tensor::full(&[9], 1.0));
        let b = tape.leaf(Tensor::zeros(&[9]));
        let y = tape.layer_norm(a, g, b, 0.0).unwrap();
        for r in 0..4 {
            let row = tape.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 9.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cross_entropy_matches_log_softmax(x in matrix(5, 4), targets in prop::collection::vec(0usize..4, 5)) {
        let mut tape = Tape::new();
        let a = tape.leaf(x.clone());
        let loss = tape.cross_entropy(a, &targets).unwrap();
        let mut want = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = x.row(r);
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            want += lse - row[t];
        }
        prop_assert!((tape.value(loss).item().unwrap() - want / 5.0).abs() < 1e-10);
    }

    #[test]
    fn adamw_decays_parameters_without_gradient(lr in 1e-5f64..1e-2, wd in 0.0f64..0.5, steps in 1usize..60) {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_fn(&[5], |i| i as f64 - 2.0).with_grad());
        let start = store.get(id).data().to_vec();
        let mut cfg = OptimizerConfig::adamw().with_lr(lr);
        cfg.weight_decay = Some(wd);
        let mut opt = Optimizer::new(cfg, &store).unwrap();
        for _ in 0..steps {
            store.zero_grad();
            opt.step(&mut store);
        }
        let f = (1.0 - lr * wd).powi(steps as i32);
        for (v, s) in store.get(id).data().iter().zip(&start) {
            prop_assert!((v - s * f).abs() < 1e-12);
        }
    }

    #[test]
    fn procrustes_recovers_planted_rotation(seed in 0u64..1000) {
        let mut r = rng::seeded(seed);
        let (n, d) = (12, 5);
        let a = Tensor::from_fn(&[n, d], |_| r.random_range(-1.0..1.0));
        // Planted rotation from Gram-Schmidt on a random matrix.
        let mut q: Vec<Vec<f64>> = Vec::new();
        while q.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
            for u in &q {
                let dot: f64 = v.iter().zip(u).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-3 {
                q.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        let b = Tensor::from_fn(&[n, d], |i| (0..d).map(|k| a.at(&[i / d, k]) * q[k][i % d]).sum());
        let fit = analysis::orthogonal_procrustes(&a, &b).unwrap();
        prop_assert!(fit.residual < 1e-9);
        for i in 0..d {
            for j in 0..d {
                prop_assert!((fit.rotation.at(&[i, j]) - q[i][j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn modularity_ignores_module_naming(seed in 0u64..1000, modules in 2usize..5) {
        let mut r = rng::seeded(seed);
        let n = 12;
        let labels: Vec<usize> = (0..n).map(|i| i % modules).collect();
        let renamed: Vec<usize> = labels.iter().map(|&l| modules - 1 - l).collect();
        let w: Vec<f64> = (0..n * n).map(|_| r.random_range(0.0..1.0)).collect();
        let a = analysis::modularity(&w, &Partition::new(labels.clone()).unwrap()).unwrap();
        let b = analysis::modularity(&w, &Partition::new(renamed.clone()).unwrap()).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        let ca = analysis::network_clustering(&w, &Partition::new(labels).unwrap()).unwrap();
        let cb = analysis::network_clustering(&w, &Partition::new(renamed).unwrap()).unwrap();
        prop_assert!((ca - cb).abs() < 1e-12);
    }

    #[test]
    fn jsd_is_symmetric_and_bounded(p in prop::collection::vec(0.0f64..1.0, 6), q in prop::collection::vec(0.0f64..1.0, 6)) {
        prop_assume!(p.iter().sum::<f64>() > 1e-6 && q.iter().sum::<f64>() > 1e-6);
        let norm = |v: &[f64]| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
        let (p, q) = (norm(&p), norm(&q));
        let pq = analysis::jsd(&p, &q).unwrap();
        let qp = analysis::jsd(&q, &p).unwrap();
        prop_assert!((pq - qp).abs() < 1e-12);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&pq));
        prop_assert!(analysis::jsd(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn spearman_is_one_under_monotone_maps(x in prop::collection::vec(-10.0f64..10.0, 3..20)) {
        let mut distinct = x.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        prop_assume!(distinct.len() == x.len());
        let y: Vec<f64> = x.iter().map(|v| v.powi(3) + 2.0).collect();
        let z: Vec<f64> = x.iter().map(|v| -v.exp()).collect();
        prop_assert!((analysis::rank_correlation(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((analysis::rank_correlation(&x, &z).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn puzzles_round_trip_through_tokens(seed in 0u64..5000, level in 1u8..4) {
        let want = Complexity::from_level(level).unwrap();
        let p = lst::generate_puzzle(want, seed, &GeneratorConfig::default()).unwrap();
        prop_assert_eq!(lst::classify_complexity(&p.cells).unwrap(), want);
        prop_assert_eq!(lst::solve(&p.cells).unwrap().single(), Some(p.solution));
        let back = lst::detokenize(&lst::tokenize(&p)).unwrap();
        prop_assert_eq!(back.cells, p.cells);
        prop_assert_eq!(back.solution, p.solution);
        prop_assert_eq!(back.probe_index, p.probe_index);
    }
}

#[test]
fn nope_model_is_permutation_equivariant() {
    let model = small_model(PeSpec::new(PeKind::Nope), 4);
    let mut r = rng::seeded(9);
    let tokens: Vec<usize> = (0..16).map(|_| r.random_range(0..6)).collect();
    let perm: Vec<usize> = (0..16).map(|i| (i * 5 + 3) % 16).collect();
    let permuted: Vec<usize> = perm.iter().map(|&p| tokens[p]).collect();
    let hidden = |t: &[usize]| {
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, Input::Tokens(t)).unwrap();
        tape.value(fwd.hidden).clone()
    };
    let (a, b) = (hidden(&tokens), hidden(&permuted));
    for (i, &p) in perm.iter().enumerate() {
        for (u, v) in b.row(i).iter().zip(a.row(p)) {
            assert!((u - v).abs() < 1e-10);
        }
    }
}

#[test]
fn fixed_position_codes_break_permutation_symmetry() {
    let model = small_model(PeSpec::fixed_2d(4, 4), 4);
    let tokens: Vec<usize> = (0..16).map(|i| i % 6).collect();
    let mut swapped = tokens.clone();
    swapped.swap(0, 1);
    let mut tape = Tape::new();
    let a = model.forward(&mut tape, Input::Tokens(&tokens)).unwrap();
    let b = model.forward(&mut tape, Input::Tokens(&swapped)).unwrap();
    let diff: f64 = tape.value(a.hidden).row(0).iter().zip(tape.value(b.hidden).row(1)).map(|(u, v)| (u - v).abs()).sum();
    assert!(diff > 1e-6);
}

#[test]
fn sigma_only_changes_the_position_table() {
    let a = small_model(PeSpec::learnable(0.1), 7);
    let b = small_model(PeSpec::learnable(2.0), 7);
    for ((name, ta), (_, tb)) in a.params.iter().zip(b.params.iter()) {
        if name == "pe" {
            let ratio = tb.data()[0] / ta.data()[0];
            assert!((ratio - 20.0).abs() < 1e-9, "pe scales with sigma, got {ratio}");
        } else {
            assert_eq!(ta.data(), tb.data(), "{name} differs across sigma");
        }
    }
}

#[test]
fn simulated_clusters_correlate_more_inside_than_across() {
    let system = nmar::sample_system(0);
    let series = nmar::simulate(&system, 20_000, 0).unwrap();
    assert!(series.values.iter().all(|v| v.is_finite()));
    let (intra, inter) = nmar::block_correlations(&series, &nmar::ground_truth_partition(&system));
    assert!(intra > inter, "intra {intra} vs inter {inter}");
}
