//! Shared fixtures and independent reference implementations for the
//! integration tests. Nothing here calls into the production code paths it
//! is used to check.

#![allow(dead_code)]

pub mod datasets;
pub mod oracles;

use std::path::PathBuf;

use duoserve_core::config::load_config;
use duoserve_core::trace::RequestTraces;
use duoserve_core::{ActivationTrace, CostModel, ModelConfig, Phase};

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

pub fn preset(name: &str) -> (ModelConfig, CostModel) {
    load_config(config_path(name)).expect("shipped preset loads")
}

pub fn toy() -> (ModelConfig, CostModel) {
    preset("toy-4x2.json")
}

pub const MS: u64 = 1_000_000;

/// Toy cost model with transfer time `t_ms`, single-token expert compute
/// `c_ms`, and non-MoE plus gate time `front_ms` (gate fixed at 0.1 ms).
pub fn toy_cost(t_ms: f64, c_ms: f64, front_ms: f64) -> CostModel {
    let (_, base) = toy();
    CostModel {
        link_bandwidth_bytes_per_s: 2.0 / ((t_ms - 1.0) * 1e-3),
        link_latency_s: 1e-3,
        expert_compute_base_s: (c_ms - 0.1) * 1e-3,
        expert_compute_per_token_s: 1e-4,
        non_moe_compute_per_layer_s: (front_ms - 0.1) * 1e-3,
        gate_compute_s: 1e-4,
        ..base
    }
}

pub fn token(req: u64, phase: Phase, pos: u32, path: &[&[usize]]) -> ActivationTrace {
    ActivationTrace {
        request_id: req,
        phase,
        token_index: pos,
        path: path.iter().map(|s| s.to_vec()).collect(),
    }
}

pub fn request<'a>(prefill: &'a [ActivationTrace], decode: &'a [ActivationTrace]) -> RequestTraces<'a> {
    RequestTraces {
        request_id: prefill.first().or(decode.first()).map_or(0, |t| t.request_id),
        prefill: prefill.iter().collect(),
        decode: decode.iter().collect(),
    }
}
