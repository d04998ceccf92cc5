//! JSON and CSV serialization of [`TraceStats`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AffinityMatrix, PopularityMatrix, Result, StatsError, TraceStats};
use crate::trace::ModelRef;

pub const STATS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Counts {
    popularity: Vec<Vec<u64>>,
    affinity: Vec<Vec<Vec<u64>>>,
}

/// On-disk layout of a statistics file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsDocument {
    pub schema_version: u32,
    pub model: ModelRef,
    pub decode_only: bool,
    pub n: u64,
    pub popularity: Vec<Vec<f64>>,
    pub affinity: Vec<Vec<Vec<f64>>>,
    counts: Counts,
    /// Digests of the artifacts these statistics were computed from.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
}

impl StatsDocument {
    pub fn new(stats: &TraceStats, inputs: BTreeMap<String, String>) -> Self {
        StatsDocument {
            schema_version: STATS_SCHEMA_VERSION,
            model: stats.model.clone(),
            decode_only: stats.decode_only,
            n: stats.popularity.n_episodes,
            popularity: stats.popularity.values.clone(),
            affinity: stats.affinity.values.clone(),
            counts: Counts {
                popularity: stats.popularity.counts.clone(),
                affinity: stats.affinity.counts.clone(),
            },
            inputs,
        }
    }

    pub fn into_stats(self) -> Result<TraceStats> {
        let shape = self.model.shape;
        let ok = self.popularity.len() == shape.layers
            && self.counts.popularity.len() == shape.layers
            && self.affinity.len() + 1 == shape.layers
            && self.counts.affinity.len() + 1 == shape.layers
            && self.popularity.iter().all(|r| r.len() == shape.experts)
            && self
                .affinity
                .iter()
                .all(|p| p.len() == shape.experts && p.iter().all(|r| r.len() == shape.experts));
        if !ok {
            return Err(StatsError::Format(format!("matrix dimensions do not match {shape}")));
        }
        Ok(TraceStats {
            model: self.model,
            popularity: PopularityMatrix {
                values: self.popularity,
                counts: self.counts.popularity,
                n_episodes: self.n,
            },
            affinity: AffinityMatrix {
                values: self.affinity,
                counts: self.counts.affinity,
            },
            decode_only: self.decode_only,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("stats serialize") + "\n"
    }
}

impl TraceStats {
    /// Popularity as CSV, one row per layer.
    pub fn popularity_csv(&self) -> String {
        let m = self.num_experts();
        let mut out = String::from("layer");
        for e in 0..m {
            let _ = write!(out, ",e{e}");
        }
        out.push('\n');
        for (l, row) in self.popularity.values.iter().enumerate() {
            let _ = write!(out, "{l}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Affinity of layer pair `(layer, layer + 1)` as an `M x M` CSV heatmap.
    pub fn affinity_csv(&self, layer: usize) -> String {
        let m = self.num_experts();
        let mut out = String::from("from");
        for e in 0..m {
            let _ = write!(out, ",e{e}");
        }
        out.push('\n');
        for (i, row) in self.affinity.values[layer].iter().enumerate() {
            let _ = write!(out, "e{i}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn save_stats(path: impl AsRef<Path>, doc: &StatsDocument) -> std::io::Result<()> {
    std::fs::write(path, doc.to_json())
}

pub fn load_stats(path: impl AsRef<Path>) -> Result<(TraceStats, StatsDocument)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| StatsError::Format(format!("{}: {e}", path.display())))?;
    let doc: StatsDocument = serde_json::from_str(&text)
        .map_err(|e| StatsError::Format(format!("{}: line {}: {e}", path.display(), e.line())))?;
    Ok((doc.clone().into_stats()?, doc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::fixtures::toy_ab;

    #[test]
    fn document_round_trip() {
        let stats = TraceStats::build(&toy_ab(), false).unwrap();
        let doc = StatsDocument::new(&stats, BTreeMap::new());
        let back: StatsDocument = serde_json::from_str(&doc.to_json()).unwrap();
        assert_eq!(back.into_stats().unwrap(), stats);
    }

    #[test]
    fn popularity_csv_layer0() {
        let stats = TraceStats::build(&toy_ab(), false).unwrap();
        let csv = stats.popularity_csv();
        assert_eq!(csv.lines().nth(1).unwrap(), "0,0.5,0.25,0.25,0");
        assert_eq!(stats.affinity_csv(0).lines().nth(1).unwrap(), "e0,0,0,0.5,0.5");
    }
}
