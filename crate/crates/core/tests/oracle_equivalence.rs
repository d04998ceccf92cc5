//! Production code against the naive references in `common::oracles`.

mod common;

use common::datasets::*;
use common::oracles::*;
use common::preset;
use duoserve_core::predictor::{
    bce_loss, evaluate, train_on_set, Architecture, ExpertPredictor, Result as PredResult, TrainHyper, TrainingSet,
};
use duoserve_core::trace::generate_traces;
use duoserve_core::{ActivationTrace, GeneratorParams, TraceStats};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn stats_match_brute_force_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..30 {
        let l = rng.random_range(2..=8);
        let m = rng.random_range(2..=16);
        let k = rng.random_range(1..m);
        let n = rng.random_range(1..=1000);
        let ds = random_dataset(case, l, m, k, n);
        let got = TraceStats::build(&ds, false).unwrap();
        let want = stats_oracle(&ds).unwrap();
        assert_eq!(got.popularity.counts, want.pop_counts, "case {case}");
        assert_eq!(got.affinity.counts, want.aff_counts, "case {case}");
        for (a, b) in got.popularity.values.iter().flatten().zip(want.pop.iter().flatten()) {
            assert!((a - b).abs() <= 1e-12, "case {case}: popularity {a} vs {b}");
        }
        for (a, b) in got
            .affinity
            .values
            .iter()
            .flatten()
            .flatten()
            .zip(want.aff.iter().flatten().flatten())
        {
            assert!((a - b).abs() <= 1e-12, "case {case}: affinity {a} vs {b}");
        }
    }
}

#[test]
fn empty_dataset_is_rejected_by_both() {
    let ds = random_dataset(0, 3, 4, 2, 0);
    assert!(stats_oracle(&ds).is_none());
    assert!(TraceStats::build(&ds, false).is_err());
}

#[test]
fn forward_pass_matches_explicit_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (input, output, rows) = (6, 4, 40);
    let x = Array2::from_shape_fn((rows, input), |_| rng.random_range(-1.0..1.0));
    let y = Array2::from_shape_fn((rows, output), |_| if rng.random::<bool>() { 1.0 } else { 0.0 });
    let set = TrainingSet { x: x.clone(), y };
    let hyper = TrainHyper {
        epochs: 3,
        batch_size: 8,
        learning_rate: 1e-2,
        seed: 9,
    };
    let (net, _) = train_on_set::<f64>(&set, Architecture::with_hidden(input, vec![8, 8, 8], output), &hyper).unwrap();
    let probs = net.forward(x.view()).unwrap();
    for r in 0..rows {
        let want = naive_forward(&net, x.row(r).as_slice().unwrap());
        for (a, b) in probs.row(r).iter().zip(&want) {
            assert!((a - b).abs() <= 1e-6, "row {r}: {a} vs {b}");
        }
    }
}

#[test]
fn bce_matches_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let (rows, cols) = (rng.random_range(1..10), rng.random_range(1..10));
        let p: Vec<Vec<f64>> = (0..rows)
            .map(|_| {
                (0..cols)
                    .map(|_| rng.random_range(-0.1..1.1f64).clamp(0.0, 1.0))
                    .collect()
            })
            .collect();
        let y: Vec<Vec<f64>> = (0..rows)
            .map(|_| {
                (0..cols)
                    .map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let pa = Array2::from_shape_fn((rows, cols), |(r, c)| p[r][c]);
        let ya = Array2::from_shape_fn((rows, cols), |(r, c)| y[r][c]);
        let got = bce_loss(pa.view(), ya.view()).unwrap();
        let want = bce_oracle(&p, &y);
        assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
    }
}

struct RandomGuess {
    experts: usize,
}

impl ExpertPredictor for RandomGuess {
    fn name(&self) -> &str {
        "random"
    }

    fn predict(&self, trace: &ActivationTrace, layer: usize) -> PredResult<Vec<usize>> {
        let key = trace.request_id * 1_000_003 + trace.token_index as u64 * 101 + layer as u64;
        Ok(random_set(
            &mut ChaCha8Rng::seed_from_u64(key),
            self.experts,
            trace.path[layer].len(),
        ))
    }
}

#[test]
fn random_guessing_meets_the_closed_form_rate() {
    let want = random_guess_rate(8, 2);
    assert!((want - (1.0 - 15.0 / 28.0)).abs() < 1e-15);
    let ds = random_dataset(77, 8, 8, 2, 4000);
    let report = evaluate(&RandomGuess { experts: 8 }, &ds).unwrap();
    assert_eq!(report.n_evaluated, 4000 * 7);
    assert!(
        (report.at_least_one_rate - want).abs() < 0.01,
        "{} vs {want}",
        report.at_least_one_rate
    );
}

#[test]
fn generator_matches_the_exact_subset_chain_on_a_small_model() {
    let (mut cfg, _) = preset("toy-4x2.json");
    cfg.num_layers = 3;
    let params = GeneratorParams::synthetic(&cfg, 0.7, 3);
    let chain = generator_chain(&params, cfg.num_experts, cfg.top_k);
    let ds = generate_traces(&params, &cfg, 4000, 4, 1).unwrap();
    let stats = TraceStats::build(&ds, false).unwrap();
    for l in 0..cfg.num_layers {
        for i in 0..cfg.num_experts {
            let want = chain.inclusion[l][i] / cfg.top_k as f64;
            let got = stats.popularity.values[l][i];
            assert!((got - want).abs() < 0.02, "popularity[{l}][{i}] {got} vs {want}");
        }
    }
    for l in 0..cfg.num_layers - 1 {
        for i in 0..cfg.num_experts {
            for j in 0..cfg.num_experts {
                let (got, want) = (stats.affinity.values[l][i][j], chain.affinity[l][i][j]);
                assert!((got - want).abs() < 0.03, "affinity[{l}][{i}][{j}] {got} vs {want}");
            }
        }
    }
    for mg in &chain.marginals {
        assert!((mg.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn layer_zero_frequencies_converge_to_base_popularity() {
    let (cfg, _) = preset("mixtral-8x7b.json");
    let params = GeneratorParams::synthetic(&cfg, 0.8, 21);
    let ds = generate_traces(&params, &cfg, 10_000, 1, 1)
        .unwrap()
        .only_phase(duoserve_core::Phase::Decode);
    let stats = TraceStats::build(&ds, false).unwrap();
    let worst = stats.popularity.values[0]
        .iter()
        .zip(&params.base_popularity[0])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 0.03, "L-inf {worst}");
}
