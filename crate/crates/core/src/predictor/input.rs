//! State-vector construction for next-layer prediction.

use serde::{Deserialize, Serialize};

use super::{PredictorError, Result};
use crate::config::ModelShape;
use crate::scalar::Scalar;
use crate::stats::{AffinityMatrix, PopularityMatrix};
use crate::trace::ActivationTrace;

/// How the affinity rows of the previous layer's `k` experts enter the input.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffinityMode {
    /// Element-wise mean of the `k` rows: `M` values.
    #[default]
    Pooled,
    /// The `k` rows side by side, ascending by expert: `k * M` values.
    Concat,
}

/// Fixed input geometry for one model shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputLayout {
    pub shape: ModelShape,
    pub affinity_mode: AffinityMode,
}

impl InputLayout {
    pub fn new(shape: ModelShape, affinity_mode: AffinityMode) -> Self {
        InputLayout { shape, affinity_mode }
    }

    /// Largest history depth, reached when predicting the last layer.
    pub fn max_history_layers(&self) -> usize {
        self.shape.layers.saturating_sub(1)
    }

    pub fn history_len(&self) -> usize {
        self.max_history_layers() * self.shape.top_k
    }

    pub fn affinity_len(&self) -> usize {
        match self.affinity_mode {
            AffinityMode::Pooled => self.shape.experts,
            AffinityMode::Concat => self.shape.top_k * self.shape.experts,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.history_len() + self.shape.experts + self.affinity_len() + 1
    }
}

/// Input of the predictor for one `(token, target layer)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    /// Experts of layers `0..l`, each stored as `index + 1`; `0` pads.
    pub history: Vec<usize>,
    /// Popularity row of the target layer.
    pub popularity: Vec<f64>,
    /// Affinity of the previous layer's experts towards the target layer.
    pub affinity: Vec<f64>,
    /// `l / (L - 1)`.
    pub layer_pos: f64,
}

impl StateVector {
    pub fn len(&self) -> usize {
        self.history.len() + self.popularity.len() + self.affinity.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Writes network features into `out`. History entries are scaled by `1 / M`.
    pub fn write_features<F: Scalar>(&self, experts: usize, out: &mut [F]) {
        debug_assert_eq!(out.len(), self.len());
        let inv_m = 1.0 / experts as f64;
        let values = self
            .history
            .iter()
            .map(|&h| h as f64 * inv_m)
            .chain(self.popularity.iter().copied())
            .chain(self.affinity.iter().copied())
            .chain(std::iter::once(self.layer_pos));
        for (slot, v) in out.iter_mut().zip(values) {
            *slot = F::of(v);
        }
    }

    pub fn features<F: Scalar>(&self, experts: usize) -> Vec<F> {
        let mut out = vec![F::zero(); self.len()];
        self.write_features(experts, &mut out);
        out
    }
}

/// Builds the state vector for predicting `layer` from `trace`'s earlier
/// layers, with pooled affinity.
pub fn construct_input(
    trace: &ActivationTrace,
    layer: usize,
    pop: &PopularityMatrix,
    aff: &AffinityMatrix,
) -> Result<StateVector> {
    let shape = ModelShape {
        layers: pop.values.len(),
        experts: pop.values.first().map_or(0, Vec::len),
        top_k: trace.path.first().map_or(0, Vec::len),
    };
    construct_input_with(trace, layer, pop, aff, InputLayout::new(shape, AffinityMode::Pooled))
}

pub fn construct_input_with(
    trace: &ActivationTrace,
    layer: usize,
    pop: &PopularityMatrix,
    aff: &AffinityMatrix,
    layout: InputLayout,
) -> Result<StateVector> {
    let shape = layout.shape;
    if layer == 0 {
        return Err(PredictorError::NoPredictionForFirstLayer);
    }
    if layer >= shape.layers || trace.path.len() < layer {
        return Err(PredictorError::Shape(format!(
            "target layer {layer} outside [1, {})",
            shape.layers
        )));
    }
    let mut history = vec![0usize; layout.history_len()];
    let mut slot = 0;
    for set in &trace.path[..layer] {
        let mut sorted = set.clone();
        sorted.sort_unstable();
        for e in sorted {
            history[slot] = e + 1;
            slot += 1;
        }
    }

    let mut previous = trace.path[layer - 1].clone();
    previous.sort_unstable();
    let m = shape.experts;
    let affinity = match layout.affinity_mode {
        AffinityMode::Pooled => {
            let mut mean = vec![0.0; m];
            for &i in &previous {
                for (acc, v) in mean.iter_mut().zip(aff.row(layer - 1, i)) {
                    *acc += v;
                }
            }
            let inv = 1.0 / previous.len() as f64;
            mean.iter_mut().for_each(|v| *v *= inv);
            mean
        }
        AffinityMode::Concat => previous
            .iter()
            .flat_map(|&i| aff.row(layer - 1, i).iter().copied())
            .collect(),
    };

    Ok(StateVector {
        history,
        popularity: pop.layer(layer).to_vec(),
        affinity,
        layer_pos: layer as f64 / (shape.layers - 1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{build_affinity, build_popularity};
    use crate::trace::fixtures::*;

    #[test]
    fn toy_trace_a_layer_one() {
        let ds = toy_ab();
        let pop = build_popularity(&ds).unwrap();
        let aff = build_affinity(&ds).unwrap();
        let s = construct_input(&ds.traces[0], 1, &pop, &aff).unwrap();
        assert_eq!(s.history, vec![1, 2, 0, 0, 0, 0]);
        // layer 1 sets are {2,3} in both traces
        assert_eq!(s.popularity, vec![0.0, 0.0, 0.5, 0.5]);
        // row 0 = [0,0,.5,.5]; row 1 (trace A only) = [0,0,.5,.5]
        assert_eq!(s.affinity, vec![0.0, 0.0, 0.5, 0.5]);
        assert!((s.layer_pos - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.len(), 3 * 2 + 2 * 4 + 1);
    }

    #[test]
    fn last_layer_fills_history() {
        let ds = toy_ab();
        let pop = build_popularity(&ds).unwrap();
        let aff = build_affinity(&ds).unwrap();
        let s = construct_input(&ds.traces[1], 3, &pop, &aff).unwrap();
        assert_eq!(s.history, vec![1, 3, 3, 4, 1, 2]);
        assert!(s.history.iter().all(|&h| h != 0));
        assert_eq!(s.layer_pos, 1.0);
        // layer 2 set {0,1}: row 0 sees {1,3} twice, row 1 sees {1,3} once
        assert_eq!(s.affinity, vec![0.0, 0.5, 0.0, 0.5]);
    }

    #[test]
    fn zero_statistics_leave_only_position() {
        let ds = toy_ab();
        let mut pop = build_popularity(&ds).unwrap();
        let mut aff = build_affinity(&ds).unwrap();
        pop.values.iter_mut().flatten().for_each(|v| *v = 0.0);
        aff.values.iter_mut().flatten().flatten().for_each(|v| *v = 0.0);
        let s = construct_input(&ds.traces[0], 2, &pop, &aff).unwrap();
        assert!(s.popularity.iter().chain(&s.affinity).all(|&v| v == 0.0));
        let f: Vec<f64> = s.features(4);
        assert_eq!(f[f.len() - 1], 2.0 / 3.0);
    }

    #[test]
    fn layer_zero_is_rejected() {
        let ds = toy_ab();
        let pop = build_popularity(&ds).unwrap();
        let aff = build_affinity(&ds).unwrap();
        assert!(matches!(
            construct_input(&ds.traces[0], 0, &pop, &aff),
            Err(PredictorError::NoPredictionForFirstLayer)
        ));
    }

    #[test]
    fn concat_mode_keeps_rows() {
        let ds = toy_ab();
        let pop = build_popularity(&ds).unwrap();
        let aff = build_affinity(&ds).unwrap();
        let layout = InputLayout::new(toy_shape(), AffinityMode::Concat);
        let s = construct_input_with(&ds.traces[0], 1, &pop, &aff, layout).unwrap();
        assert_eq!(s.affinity.len(), 8);
        assert_eq!(s.len(), layout.input_dim());
    }

    #[test]
    fn history_is_scaled_by_expert_count() {
        let ds = toy_ab();
        let pop = build_popularity(&ds).unwrap();
        let aff = build_affinity(&ds).unwrap();
        let s = construct_input(&ds.traces[0], 1, &pop, &aff).unwrap();
        let f: Vec<f32> = s.features(4);
        assert_eq!(&f[..3], &[0.25, 0.5, 0.0]);
    }
}
