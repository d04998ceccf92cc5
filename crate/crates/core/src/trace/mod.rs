//! Expert activation traces.
//!
//! One [`ActivationTrace`] records, for a single token of a single request,
//! the set of experts the gate selected at every MoE layer. A
//! [`TraceDataset`] is an ordered collection of traces for one model shape.

mod generate;
mod io;
mod split;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ModelConfig, ModelShape};

pub use generate::{generate_traces, sample_without_replacement, GeneratorParams};
pub use io::{load_traces, parse_traces, save_traces, traces_to_jsonl};
pub use split::split_dataset;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("trace file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("trace file has no header line")]
    MissingHeader,
    #[error("trace file was recorded for {found}, config describes {expected}")]
    ModelMismatch { expected: ModelShape, found: ModelShape },
    #[error("request {request_id}{}: {reason}", layer.map(|l| format!(" layer {l}")).unwrap_or_default())]
    Invalid {
        request_id: u64,
        layer: Option<usize>,
        reason: String,
    },
    #[error("trace generation failed: {0}")]
    Generation(String),
    #[error("cannot split dataset: {0}")]
    Split(String),
}

pub type Result<T, E = TraceError> = std::result::Result<T, E>;

/// Inference phase a token belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Prefill,
    Decode,
}

/// Per-layer expert selections of one token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationTrace {
    #[serde(rename = "req")]
    pub request_id: u64,
    pub phase: Phase,
    #[serde(rename = "pos")]
    pub token_index: u32,
    /// `path[l]` holds the `k` distinct experts selected at layer `l`.
    pub path: Vec<Vec<usize>>,
}

impl ActivationTrace {
    pub fn validate(&self, shape: ModelShape) -> Result<()> {
        let bad = |layer: Option<usize>, reason: String| TraceError::Invalid {
            request_id: self.request_id,
            layer,
            reason,
        };
        if self.path.len() != shape.layers {
            return Err(bad(
                None,
                format!(
                    "token {} has {} layers, expected {}",
                    self.token_index,
                    self.path.len(),
                    shape.layers
                ),
            ));
        }
        for (l, set) in self.path.iter().enumerate() {
            if set.len() != shape.top_k {
                return Err(bad(
                    Some(l),
                    format!("{} experts selected, expected {}", set.len(), shape.top_k),
                ));
            }
            for (i, &e) in set.iter().enumerate() {
                if e >= shape.experts {
                    return Err(bad(
                        Some(l),
                        format!("expert index {e} out of range [0, {})", shape.experts),
                    ));
                }
                if set[..i].contains(&e) {
                    return Err(bad(Some(l), format!("expert {e} selected twice")));
                }
            }
        }
        Ok(())
    }

    /// Experts selected at `layer`.
    pub fn layer(&self, layer: usize) -> &[usize] {
        &self.path[layer]
    }
}

/// Model identity a dataset was recorded for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRef {
    pub name: String,
    pub shape: ModelShape,
}

impl From<&ModelConfig> for ModelRef {
    fn from(cfg: &ModelConfig) -> Self {
        ModelRef {
            name: cfg.name.clone(),
            shape: cfg.shape(),
        }
    }
}

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Recorded,
    Synthetic {
        alpha: f64,
        seed: u64,
        requests: usize,
        decode_len: usize,
        prefill_len: usize,
        /// Digest of the config file the parameters were derived from.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        config_digest: Option<String>,
    },
    Split {
        part: SplitPart,
        train_fraction: f64,
        seed: u64,
        parent: Box<Provenance>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPart {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceDataset {
    pub model: ModelRef,
    pub traces: Vec<ActivationTrace>,
    pub provenance: Provenance,
}

/// Traces of one request, each phase ordered by token position.
#[derive(Debug, Clone)]
pub struct RequestTraces<'a> {
    pub request_id: u64,
    pub prefill: Vec<&'a ActivationTrace>,
    pub decode: Vec<&'a ActivationTrace>,
}

impl TraceDataset {
    pub fn new(model: ModelRef, traces: Vec<ActivationTrace>, provenance: Provenance) -> Result<Self> {
        let ds = TraceDataset {
            model,
            traces,
            provenance,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn empty(cfg: &ModelConfig) -> Self {
        TraceDataset {
            model: cfg.into(),
            traces: Vec::new(),
            provenance: Provenance::Recorded,
        }
    }

    pub fn shape(&self) -> ModelShape {
        self.model.shape
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    /// Checks every trace against the model shape and that each request's
    /// prefill positions precede its decode positions.
    pub fn validate(&self) -> Result<()> {
        let shape = self.shape();
        let mut bounds: BTreeMap<u64, (Option<u32>, Option<u32>)> = BTreeMap::new();
        for t in &self.traces {
            t.validate(shape)?;
            let entry = bounds.entry(t.request_id).or_default();
            match t.phase {
                Phase::Prefill => entry.0 = Some(entry.0.map_or(t.token_index, |m| m.max(t.token_index))),
                Phase::Decode => entry.1 = Some(entry.1.map_or(t.token_index, |m| m.min(t.token_index))),
            }
        }
        for (&request_id, &(max_prefill, min_decode)) in &bounds {
            if let (Some(p), Some(d)) = (max_prefill, min_decode) {
                if p >= d {
                    return Err(TraceError::Invalid {
                        request_id,
                        layer: None,
                        reason: format!("prefill position {p} does not precede decode position {d}"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Distinct request ids in ascending order.
    pub fn request_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.traces.iter().map(|t| t.request_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Groups traces by request, ascending by request id.
    pub fn requests(&self) -> Vec<RequestTraces<'_>> {
        let mut by_id: BTreeMap<u64, RequestTraces<'_>> = BTreeMap::new();
        for t in &self.traces {
            let r = by_id.entry(t.request_id).or_insert_with(|| RequestTraces {
                request_id: t.request_id,
                prefill: Vec::new(),
                decode: Vec::new(),
            });
            match t.phase {
                Phase::Prefill => r.prefill.push(t),
                Phase::Decode => r.decode.push(t),
            }
        }
        by_id
            .into_values()
            .map(|mut r| {
                r.prefill.sort_by_key(|t| t.token_index);
                r.decode.sort_by_key(|t| t.token_index);
                r
            })
            .collect()
    }

    /// Copy holding only traces of `phase`.
    pub fn only_phase(&self, phase: Phase) -> TraceDataset {
        TraceDataset {
            model: self.model.clone(),
            traces: self.traces.iter().filter(|t| t.phase == phase).cloned().collect(),
            provenance: self.provenance.clone(),
        }
    }
}
