//! Seeded random datasets, configs and predictor stubs.

use duoserve_core::config::ModelShape;
use duoserve_core::predictor::{ExpertPredictor, Result as PredResult};
use duoserve_core::trace::{ModelRef, Provenance};
use duoserve_core::{ActivationTrace, CostModel, ModelConfig, Phase, TraceDataset};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A uniformly random `k`-subset of `0..m`, ascending.
pub fn random_set<R: Rng>(rng: &mut R, m: usize, k: usize) -> Vec<usize> {
    let mut s = sample(rng, m, k).into_vec();
    s.sort_unstable();
    s
}

pub fn shape_ref(layers: usize, experts: usize, top_k: usize) -> ModelRef {
    ModelRef {
        name: format!("random-{layers}x{experts}x{top_k}"),
        shape: ModelShape { layers, experts, top_k },
    }
}

/// `n` traces with uniformly random selections, spread over requests of up
/// to four tokens (first token prefill, the rest decode).
pub fn random_dataset(seed: u64, layers: usize, experts: usize, top_k: usize, n: usize) -> TraceDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let traces = (0..n)
        .map(|i| ActivationTrace {
            request_id: (i / 4) as u64,
            phase: if i % 4 == 0 { Phase::Prefill } else { Phase::Decode },
            token_index: (i % 4) as u32,
            path: (0..layers).map(|_| random_set(&mut rng, experts, top_k)).collect(),
        })
        .collect();
    TraceDataset::new(shape_ref(layers, experts, top_k), traces, Provenance::Recorded).expect("valid random dataset")
}

/// Memory footprint matching `(layers, experts, top_k)` with 10-unit experts.
pub fn random_config(layers: usize, experts: usize, top_k: usize) -> ModelConfig {
    ModelConfig {
        name: format!("random-{layers}x{experts}x{top_k}"),
        num_layers: layers,
        num_experts: experts,
        top_k,
        total_param_bytes: 100 + (layers * experts * 10) as u64,
        non_moe_bytes: 100,
        predictor_mem_bytes: 7,
        kv_reserve_bytes: 11,
    }
}

/// Every duration drawn from `[lo, hi)` seconds, bandwidth scaled to 10-unit experts.
pub fn random_cost<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> CostModel {
    let mut d = || rng.random_range(lo..hi);
    let transfer = d();
    CostModel {
        link_bandwidth_bytes_per_s: 10.0 / transfer,
        link_latency_s: d() * 0.1,
        expert_compute_base_s: d(),
        expert_compute_per_token_s: d() * 0.1,
        non_moe_compute_per_layer_s: d(),
        gate_compute_s: d() * 0.1,
        predictor_latency_s: d(),
    }
}

/// Returns the true set with probability `accuracy`, else a random set.
pub struct NoisyPredictor {
    pub accuracy: f64,
    pub seed: u64,
    pub experts: usize,
}

impl ExpertPredictor for NoisyPredictor {
    fn name(&self) -> &str {
        "noisy"
    }

    fn predict(&self, trace: &ActivationTrace, layer: usize) -> PredResult<Vec<usize>> {
        let key = self
            .seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(trace.request_id << 32)
            .wrapping_add((trace.token_index as u64) << 8)
            .wrapping_add(layer as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let k = trace.path[layer].len();
        if rng.random::<f64>() < self.accuracy {
            let mut s = trace.path[layer].clone();
            s.sort_unstable();
            Ok(s)
        } else {
            Ok(random_set(&mut rng, self.experts, k))
        }
    }
}
