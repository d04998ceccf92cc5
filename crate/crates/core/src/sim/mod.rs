//! Discrete-event simulation of expert offloading during inference.
//!
//! Three serial streams share integer-nanosecond time: `comm` (one
//! host-to-device link), `predict` and `compute`. The device holds a fixed
//! number of expert slots per policy; a slot is taken when a transfer starts
//! and given back when the expert is evicted.
//!
//! Policies:
//!
//! * `OnDemand`: after the gate, fetch then compute each activated expert.
//! * `PrefetchAll`: stream all experts of every layer, the next layer's
//!   transfers queued behind the current one's.
//! * `DuoServe`: prefill pipelines transfers against expert compute, the
//!   first transfer starting under the non-MoE block. Decode prefetches the
//!   predicted experts of layer `l + 1` once layer `l`'s first expert has
//!   finished and the prediction is ready (sync point 2), then checks them
//!   against the gate at layer `l + 1` (sync point 1) and refetches misses.
//! * `DuoServeOracle`: `DuoServe` with the true selections as predictions.

mod engine;
mod report;
mod timeline;

use thiserror::Error;

use crate::config::{CostModel, ModelConfig, SchedulerPolicy};
use crate::predictor::{ExpertPredictor, PredictorError};
use crate::trace::TraceDataset;

pub use engine::simulate_request;
pub use report::{
    percentile, speedup, throughput_cdf, Aggregate, CdfPoint, Comparison, PolicyRow, PrefetchCounts, RequestMetrics,
    SimReport, Speedup, CDF_POINTS, SIM_SCHEMA_VERSION,
};
pub use timeline::{Event, EventKind, EventTimeline, OpKind, Stream};

/// Simulated time.
pub type Nanos = u64;

pub(crate) fn ns(seconds: f64) -> Nanos {
    (seconds * 1e9).round() as Nanos
}

pub(crate) fn seconds(t: Nanos) -> f64 {
    t as f64 * 1e-9
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("request {0} has no decode tokens")]
    NoDecodeTokens(u64),
    #[error("policy {0} needs a predictor")]
    MissingPredictor(SchedulerPolicy),
    #[error("trace does not match the model: {0}")]
    TraceMismatch(String),
    #[error("dataset has no requests")]
    EmptyDataset,
    #[error("simulation invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
}

/// Device memory with every slot of `policy` occupied.
pub fn compute_peak_memory(policy: SchedulerPolicy, cfg: &ModelConfig) -> u64 {
    let predictor = if policy.uses_predictor() {
        cfg.predictor_mem_bytes
    } else {
        0
    };
    cfg.non_moe_bytes + policy.slot_count(cfg) as u64 * cfg.expert_bytes() + predictor + cfg.kv_reserve_bytes
}

/// Whole model resident plus the KV reserve.
pub fn gpu_only_memory(cfg: &ModelConfig) -> u64 {
    cfg.total_param_bytes + cfg.kv_reserve_bytes
}

/// Simulates every request of `ds` under each policy.
///
/// `seed` and `config_digest` are recorded in each report; the simulation
/// itself draws no random numbers.
pub fn run_experiment(
    policies: &[SchedulerPolicy],
    ds: &TraceDataset,
    cfg: &ModelConfig,
    cost: &CostModel,
    predictor: Option<&dyn ExpertPredictor>,
    seed: u64,
    config_digest: &str,
) -> Result<Vec<SimReport>, SimError> {
    let requests = ds.requests();
    if requests.is_empty() {
        return Err(SimError::EmptyDataset);
    }
    if ds.shape() != cfg.shape() {
        return Err(SimError::TraceMismatch(format!(
            "dataset is {}, config is {}",
            ds.shape(),
            cfg.shape()
        )));
    }
    policies
        .iter()
        .map(|&policy| {
            let metrics = requests
                .iter()
                .map(|r| simulate_request(policy, r, cfg, cost, predictor).map(|(m, _)| m))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(SimReport::new(
                policy,
                cfg.name.clone(),
                seed,
                config_digest.to_string(),
                compute_peak_memory(policy, cfg),
                gpu_only_memory(cfg),
                metrics,
            ))
        })
        .collect()
}
