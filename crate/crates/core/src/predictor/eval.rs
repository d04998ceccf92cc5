//! Hit-rate evaluation over held-out traces.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ExpertPredictor, PredictorError, Result};
use crate::trace::{ActivationTrace, TraceDataset};

pub const HIT_RATE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerHitRate {
    pub layer: usize,
    pub n: usize,
    pub topk_hits: usize,
    pub at_least_one_hits: usize,
    pub topk_hit_rate: f64,
    pub at_least_one_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitRateReport {
    pub schema_version: u32,
    pub predictor: String,
    /// Fraction of predictions equal to the true set.
    pub topk_hit_rate: f64,
    /// Fraction of predictions sharing at least one expert with the true set.
    pub at_least_one_rate: f64,
    pub topk_hits: usize,
    pub at_least_one_hits: usize,
    pub n_evaluated: usize,
    pub per_layer: Vec<LayerHitRate>,
    /// Digests of the artifacts the report was computed from.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
}

fn rate(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

/// Scores `predictor` on every `(trace, layer >= 1)` pair of `ds_test`.
pub fn evaluate<P: ExpertPredictor + ?Sized>(predictor: &P, ds_test: &TraceDataset) -> Result<HitRateReport> {
    let layers = ds_test.shape().layers;
    if ds_test.is_empty() || layers < 2 {
        return Err(PredictorError::EmptyTestSet);
    }
    let queries: Vec<(&ActivationTrace, usize)> = ds_test
        .traces
        .iter()
        .flat_map(|t| (1..layers).map(move |l| (t, l)))
        .collect();
    let predictions = predictor.predict_many(&queries)?;

    let mut per_layer: Vec<(usize, usize, usize)> = vec![(0, 0, 0); layers];
    for (&(t, l), predicted) in queries.iter().zip(&predictions) {
        let truth = &t.path[l];
        let common = predicted.iter().filter(|e| truth.contains(e)).count();
        let entry = &mut per_layer[l];
        entry.0 += 1;
        if common == truth.len() && predicted.len() == truth.len() {
            entry.1 += 1;
        }
        if common > 0 {
            entry.2 += 1;
        }
    }
    let per_layer: Vec<LayerHitRate> = per_layer
        .into_iter()
        .enumerate()
        .skip(1)
        .map(|(layer, (n, topk, one))| LayerHitRate {
            layer,
            n,
            topk_hits: topk,
            at_least_one_hits: one,
            topk_hit_rate: rate(topk, n),
            at_least_one_rate: rate(one, n),
        })
        .collect();
    let n: usize = per_layer.iter().map(|r| r.n).sum();
    let topk: usize = per_layer.iter().map(|r| r.topk_hits).sum();
    let one: usize = per_layer.iter().map(|r| r.at_least_one_hits).sum();
    Ok(HitRateReport {
        schema_version: HIT_RATE_SCHEMA_VERSION,
        predictor: predictor.name().to_string(),
        topk_hit_rate: rate(topk, n),
        at_least_one_rate: rate(one, n),
        topk_hits: topk,
        at_least_one_hits: one,
        n_evaluated: n,
        per_layer,
        inputs: BTreeMap::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::OraclePredictor;
    use crate::trace::fixtures::toy_ab;

    struct Complement;

    impl ExpertPredictor for Complement {
        fn name(&self) -> &str {
            "complement"
        }

        fn predict(&self, trace: &ActivationTrace, layer: usize) -> Result<Vec<usize>> {
            Ok((0..4).filter(|e| !trace.path[layer].contains(e)).take(2).collect())
        }
    }

    #[test]
    fn oracle_scores_one() {
        let r = evaluate(&OraclePredictor, &toy_ab()).unwrap();
        assert_eq!((r.topk_hit_rate, r.at_least_one_rate), (1.0, 1.0));
        assert_eq!(r.n_evaluated, 6);
        assert_eq!(r.per_layer.len(), 3);
    }

    #[test]
    fn complement_scores_zero() {
        let r = evaluate(&Complement, &toy_ab()).unwrap();
        assert_eq!((r.topk_hit_rate, r.at_least_one_rate), (0.0, 0.0));
    }

    #[test]
    fn empty_test_set_is_rejected() {
        let mut ds = toy_ab();
        ds.traces.clear();
        assert!(matches!(
            evaluate(&OraclePredictor, &ds),
            Err(PredictorError::EmptyTestSet)
        ));
    }
}
