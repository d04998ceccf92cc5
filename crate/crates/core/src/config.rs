//! Model, hardware and cost-model configuration.
//!
//! A config file is a JSON document with a `model` and a `cost` section.
//! Byte quantities are integers, times are seconds.
//!
//! ```json
//! {
//!   "model": { "name": "toy-4x2", "num_layers": 4, "num_experts": 4, "top_k": 2,
//!              "total_param_bytes": 36, "non_moe_bytes": 4,
//!              "predictor_mem_bytes": 1, "kv_reserve_bytes": 1 },
//!   "cost":  { "link_bandwidth_bytes_per_s": 250.0, "link_latency_s": 0.002, ... }
//! }
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config schema error at line {line}, column {column}: {message}")]
    Schema {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid config field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("unknown scheduler policy `{0}` (expected ondemand, prefetchall, duoserve or oracle)")]
    UnknownPolicy(String),
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

/// Static shape and memory footprint of an MoE model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub num_layers: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub total_param_bytes: u64,
    pub non_moe_bytes: u64,
    pub predictor_mem_bytes: u64,
    pub kv_reserve_bytes: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return invalid("name", "must be non-empty");
        }
        if self.num_layers < 1 {
            return invalid("num_layers", "must be at least 1");
        }
        if self.top_k < 1 {
            return invalid("top_k", "must be at least 1");
        }
        if self.top_k >= self.num_experts {
            return invalid(
                "top_k",
                format!(
                    "top_k ({}) must be smaller than num_experts ({})",
                    self.top_k, self.num_experts
                ),
            );
        }
        if self.non_moe_bytes >= self.total_param_bytes {
            return invalid(
                "non_moe_bytes",
                format!(
                    "non_moe_bytes ({}) must be below total_param_bytes ({})",
                    self.non_moe_bytes, self.total_param_bytes
                ),
            );
        }
        if self.expert_bytes() == 0 {
            return invalid(
                "total_param_bytes",
                "expert weights round down to zero bytes per expert",
            );
        }
        Ok(())
    }

    /// Bytes of one expert, assuming all experts in all layers are the same
    /// size. Rounded down.
    pub fn expert_bytes(&self) -> u64 {
        let slots = (self.num_layers * self.num_experts) as u64;
        if slots == 0 {
            return 0;
        }
        self.total_param_bytes.saturating_sub(self.non_moe_bytes) / slots
    }

    /// Number of layers that get a prediction (every layer but the first).
    pub fn predicted_layers(&self) -> usize {
        self.num_layers.saturating_sub(1)
    }

    /// Identity triple that trace files and model files are checked against.
    pub fn shape(&self) -> ModelShape {
        ModelShape {
            layers: self.num_layers,
            experts: self.num_experts,
            top_k: self.top_k,
        }
    }
}

/// `(L, M, k)` of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub layers: usize,
    pub experts: usize,
    pub top_k: usize,
}

impl fmt::Display for ModelShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L={} M={} k={}", self.layers, self.experts, self.top_k)
    }
}

/// Timing parameters for transfers and compute. All values are seconds or
/// bytes per second and must be strictly positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub link_bandwidth_bytes_per_s: f64,
    pub link_latency_s: f64,
    pub expert_compute_base_s: f64,
    pub expert_compute_per_token_s: f64,
    pub non_moe_compute_per_layer_s: f64,
    pub gate_compute_s: f64,
    pub predictor_latency_s: f64,
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let fields: [(&'static str, f64); 7] = [
            ("link_bandwidth_bytes_per_s", self.link_bandwidth_bytes_per_s),
            ("link_latency_s", self.link_latency_s),
            ("expert_compute_base_s", self.expert_compute_base_s),
            ("expert_compute_per_token_s", self.expert_compute_per_token_s),
            ("non_moe_compute_per_layer_s", self.non_moe_compute_per_layer_s),
            ("gate_compute_s", self.gate_compute_s),
            ("predictor_latency_s", self.predictor_latency_s),
        ];
        for (field, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return invalid(field, format!("must be finite and > 0, got {value}"));
            }
        }
        Ok(())
    }

    /// Host-to-device time for one transfer of `bytes`.
    pub fn transfer_time_s(&self, bytes: u64) -> f64 {
        self.link_latency_s + bytes as f64 / self.link_bandwidth_bytes_per_s
    }

    /// Time for one expert to process a grouped batch of `tokens`.
    pub fn expert_compute_s(&self, tokens: usize) -> f64 {
        self.expert_compute_base_s + tokens as f64 * self.expert_compute_per_token_s
    }
}

/// Expert scheduling policy under simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerPolicy {
    /// Fetch the activated experts after the gate, one at a time.
    OnDemand,
    /// Stream every expert of every layer through the device.
    PrefetchAll,
    /// Pipelined prefill plus predictor-driven decode prefetch.
    DuoServe,
    /// [`SchedulerPolicy::DuoServe`] with a perfect predictor.
    DuoServeOracle,
}

impl SchedulerPolicy {
    pub const ALL: [SchedulerPolicy; 4] = [
        SchedulerPolicy::OnDemand,
        SchedulerPolicy::PrefetchAll,
        SchedulerPolicy::DuoServe,
        SchedulerPolicy::DuoServeOracle,
    ];

    /// Device expert-cache slots provisioned under this policy.
    pub fn slot_count(self, cfg: &ModelConfig) -> usize {
        match self {
            SchedulerPolicy::OnDemand => cfg.top_k,
            SchedulerPolicy::DuoServe | SchedulerPolicy::DuoServeOracle => 2 * cfg.top_k,
            SchedulerPolicy::PrefetchAll => 2 * cfg.num_experts,
        }
    }

    pub fn uses_predictor(self) -> bool {
        matches!(self, SchedulerPolicy::DuoServe | SchedulerPolicy::DuoServeOracle)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SchedulerPolicy::OnDemand => "ondemand",
            SchedulerPolicy::PrefetchAll => "prefetchall",
            SchedulerPolicy::DuoServe => "duoserve",
            SchedulerPolicy::DuoServeOracle => "oracle",
        }
    }
}

impl fmt::Display for SchedulerPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchedulerPolicy {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ondemand" | "on-demand" | "acc" => Ok(SchedulerPolicy::OnDemand),
            "prefetchall" | "prefetch-all" | "moesys" => Ok(SchedulerPolicy::PrefetchAll),
            "duoserve" => Ok(SchedulerPolicy::DuoServe),
            "oracle" | "duoserve-oracle" | "duoserveoracle" => Ok(SchedulerPolicy::DuoServeOracle),
            other => Err(ConfigError::UnknownPolicy(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    model: ModelConfig,
    cost: CostModel,
}

/// Parses and validates a config document.
pub fn parse_config(text: &str) -> Result<(ModelConfig, CostModel)> {
    let file: ConfigFile = serde_json::from_str(text).map_err(|e| ConfigError::Schema {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    file.model.validate()?;
    file.cost.validate()?;
    Ok((file.model, file.cost))
}

pub fn load_config(path: impl AsRef<Path>) -> Result<(ModelConfig, CostModel)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

pub fn config_to_json(model: &ModelConfig, cost: &CostModel) -> String {
    let file = ConfigFile {
        model: model.clone(),
        cost: cost.clone(),
    };
    serde_json::to_string_pretty(&file).expect("config serializes")
}

pub fn save_config(path: impl AsRef<Path>, model: &ModelConfig, cost: &CostModel) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, config_to_json(model, cost) + "\n").map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn invalid<T>(field: &'static str, reason: impl Into<String>) -> Result<T> {
    Err(ConfigError::Invalid {
        field,
        reason: reason.into(),
    })
}
