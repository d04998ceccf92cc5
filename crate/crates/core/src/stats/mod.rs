//! Expert popularity and inter-layer affinity statistics.
//!
//! Both matrices are built from exact integer counts and normalized once at
//! the end, so results do not depend on trace order.
//!
//! * Popularity: `P[l][i] = count(i in E_l) / sum_m count(m in E_l)`. Every
//!   row sums to 1; the denominator is always `N * k`.
//! * Affinity: `A[l][i][j] = count(i in E_l and j in E_{l+1}) /
//!   sum_m count(i in E_l and m in E_{l+1})`. Rows of experts never seen at
//!   layer `l` stay all-zero.

mod export;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{ModelRef, Phase, TraceDataset};

pub use export::{load_stats, save_stats, StatsDocument};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StatsError {
    #[error("cannot build statistics from an empty dataset")]
    EmptyDataset,
    #[error("affinity needs at least 2 layers, model has {0}")]
    TooFewLayers(usize),
    #[error("statistics file: {0}")]
    Format(String),
}

pub type Result<T, E = StatsError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopularityMatrix {
    /// `L x M` selection probabilities.
    pub values: Vec<Vec<f64>>,
    /// `L x M` raw selection counts.
    pub counts: Vec<Vec<u64>>,
    /// Number of traces counted.
    pub n_episodes: u64,
}

impl PopularityMatrix {
    pub fn layer(&self, l: usize) -> &[f64] {
        &self.values[l]
    }

    /// Per-expert marginal selection frequency `count / N`.
    pub fn marginal(&self, l: usize) -> Vec<f64> {
        let n = self.n_episodes.max(1) as f64;
        self.counts[l].iter().map(|&c| c as f64 / n).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityMatrix {
    /// `(L-1) x M x M` conditional probabilities.
    pub values: Vec<Vec<Vec<f64>>>,
    /// Matching co-occurrence counts.
    pub counts: Vec<Vec<Vec<u64>>>,
}

impl AffinityMatrix {
    /// Row for expert `from` of the pair `(layer, layer + 1)`.
    pub fn row(&self, layer: usize, from: usize) -> &[f64] {
        &self.values[layer][from]
    }
}

pub fn build_popularity(ds: &TraceDataset) -> Result<PopularityMatrix> {
    if ds.is_empty() {
        return Err(StatsError::EmptyDataset);
    }
    let shape = ds.shape();
    let mut counts = vec![vec![0u64; shape.experts]; shape.layers];
    for t in &ds.traces {
        for (row, set) in counts.iter_mut().zip(&t.path) {
            for &e in set {
                row[e] += 1;
            }
        }
    }
    let values = counts.iter().map(|row| normalize(row)).collect();
    Ok(PopularityMatrix {
        values,
        counts,
        n_episodes: ds.len() as u64,
    })
}

pub fn build_affinity(ds: &TraceDataset) -> Result<AffinityMatrix> {
    if ds.is_empty() {
        return Err(StatsError::EmptyDataset);
    }
    let shape = ds.shape();
    if shape.layers < 2 {
        return Err(StatsError::TooFewLayers(shape.layers));
    }
    let m = shape.experts;
    let mut counts = vec![vec![vec![0u64; m]; m]; shape.layers - 1];
    for t in &ds.traces {
        for (pair, sets) in counts.iter_mut().zip(t.path.windows(2)) {
            for &i in &sets[0] {
                let row = &mut pair[i];
                for &j in &sets[1] {
                    row[j] += 1;
                }
            }
        }
    }
    let values = counts
        .iter()
        .map(|pair| pair.iter().map(|row| normalize(row)).collect())
        .collect();
    Ok(AffinityMatrix { values, counts })
}

fn normalize(row: &[u64]) -> Vec<f64> {
    let total: u64 = row.iter().sum();
    if total == 0 {
        return vec![0.0; row.len()];
    }
    row.iter().map(|&c| c as f64 / total as f64).collect()
}

/// Popularity and affinity built from the same trace set.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStats {
    pub model: ModelRef,
    pub popularity: PopularityMatrix,
    pub affinity: AffinityMatrix,
    /// Whether prefill traces were excluded.
    pub decode_only: bool,
}

impl TraceStats {
    pub fn build(ds: &TraceDataset, decode_only: bool) -> Result<Self> {
        let filtered;
        let source = if decode_only {
            filtered = ds.only_phase(Phase::Decode);
            &filtered
        } else {
            ds
        };
        Ok(TraceStats {
            model: source.model.clone(),
            popularity: build_popularity(source)?,
            affinity: build_affinity(source)?,
            decode_only,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.model.shape.experts
    }
}
