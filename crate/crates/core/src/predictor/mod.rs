//! Next-layer expert prediction.
//!
//! A single multi-label MLP is shared by all layers. Its input for target
//! layer `l` is the flattened path `E_0..E_{l-1}`, the popularity row of `l`,
//! the pooled affinity of the experts chosen at `l - 1` and the normalized
//! layer position; its output is one sigmoid per expert of layer `l`.

mod eval;
mod input;
mod loss;
mod model_file;
mod network;
mod train;

use std::path::PathBuf;

use ndarray::Array2;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::stats::TraceStats;
use crate::trace::ActivationTrace;

pub use eval::{evaluate, HitRateReport, LayerHitRate, HIT_RATE_SCHEMA_VERSION};
pub use input::{construct_input, construct_input_with, AffinityMode, InputLayout, StateVector};
pub use loss::{bce_loss, bce_with_logits, EPSILON};
pub use model_file::{
    load_model, model_from_bytes, model_header, model_to_bytes, save_model, ModelHeader, MODEL_FORMAT_VERSION,
};
pub use network::{Architecture, BatchNorm, Dense, ExpertMlp, Gradients, Mode, DEFAULT_DROPOUT, HIDDEN_WIDTHS};
pub use train::{
    dataset_loss, gradient_check, train, train_on_set, GradientCheck, TrainHyper, TrainReport, Trainer, TrainingSet,
    GRADIENT_CHECK_FLOOR,
};

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("layer 0 has no prediction; its experts are fetched after the gate")]
    NoPredictionForFirstLayer,
    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} (learning rate {learning_rate:e}); lower the learning rate"
    )]
    NonFiniteLoss {
        learning_rate: f64,
        epoch: usize,
        batch: usize,
    },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("network must be in eval mode for inference")]
    NotInEvalMode,
    #[error("cannot access model file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("model file: {0}")]
    Format(String),
}

pub type Result<T, E = PredictorError> = std::result::Result<T, E>;

/// Indices of the `k` largest values, ascending by index. Ties go to the
/// lower index; NaN ranks below every number.
pub fn predict_topk<T: PartialOrd + Copy>(outputs: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..outputs.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (outputs[a], outputs[b]);
        match y.partial_cmp(&x) {
            Some(o) => o.then(a.cmp(&b)),
            None => {
                let (x_nan, y_nan) = (x.partial_cmp(&x).is_none(), y.partial_cmp(&y).is_none());
                x_nan.cmp(&y_nan).then(a.cmp(&b))
            }
        }
    });
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Anything that can name the `k` experts of `layer` from a token's path.
///
/// Implementations other than [`OraclePredictor`] read only
/// `trace.path[..layer]`.
pub trait ExpertPredictor {
    fn name(&self) -> &str;

    fn predict(&self, trace: &ActivationTrace, layer: usize) -> Result<Vec<usize>>;

    fn predict_many(&self, queries: &[(&ActivationTrace, usize)]) -> Result<Vec<Vec<usize>>> {
        queries.iter().map(|&(t, l)| self.predict(t, l)).collect()
    }
}

/// Trained network plus the statistics it was trained against.
#[derive(Debug, Clone, Copy)]
pub struct MlpPredictor<'a, F> {
    net: &'a ExpertMlp<F>,
    stats: &'a TraceStats,
    layout: InputLayout,
}

impl<'a, F: Scalar> MlpPredictor<'a, F> {
    pub fn new(net: &'a ExpertMlp<F>, stats: &'a TraceStats, layout: InputLayout) -> Result<Self> {
        if net.mode != Mode::Eval {
            return Err(PredictorError::NotInEvalMode);
        }
        if net.arch.input_dim != layout.input_dim() || net.arch.output_dim != layout.shape.experts {
            return Err(PredictorError::Shape(format!(
                "network is {}->{}, layout for {} needs {}->{}",
                net.arch.input_dim,
                net.arch.output_dim,
                layout.shape,
                layout.input_dim(),
                layout.shape.experts
            )));
        }
        if stats.model.shape != layout.shape {
            return Err(PredictorError::Shape(format!(
                "statistics are for {}, network for {}",
                stats.model.shape, layout.shape
            )));
        }
        Ok(MlpPredictor { net, stats, layout })
    }

    /// Sigmoid outputs for one state.
    pub fn probabilities(&self, s: &StateVector) -> Result<Vec<F>> {
        self.net.forward_one(&s.features::<F>(self.layout.shape.experts))
    }

    /// The `k` most probable experts for one state.
    pub fn predict_state(&self, s: &StateVector) -> Result<Vec<usize>> {
        Ok(predict_topk(&self.probabilities(s)?, self.layout.shape.top_k))
    }

    fn state(&self, trace: &ActivationTrace, layer: usize) -> Result<StateVector> {
        construct_input_with(trace, layer, &self.stats.popularity, &self.stats.affinity, self.layout)
    }
}

impl<F: Scalar> ExpertPredictor for MlpPredictor<'_, F> {
    fn name(&self) -> &str {
        "mlp"
    }

    fn predict(&self, trace: &ActivationTrace, layer: usize) -> Result<Vec<usize>> {
        self.predict_state(&self.state(trace, layer)?)
    }

    fn predict_many(&self, queries: &[(&ActivationTrace, usize)]) -> Result<Vec<Vec<usize>>> {
        let dim = self.layout.input_dim();
        let m = self.layout.shape.experts;
        let mut out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(2048) {
            let mut x = Array2::<F>::zeros((chunk.len(), dim));
            for (r, &(t, l)) in chunk.iter().enumerate() {
                self.state(t, l)?
                    .write_features(m, x.row_mut(r).as_slice_mut().expect("row-major"));
            }
            let p = self.net.forward(x.view())?;
            out.extend(
                p.rows()
                    .into_iter()
                    .map(|row| predict_topk(row.as_slice().expect("row-major"), self.layout.shape.top_k)),
            );
        }
        Ok(out)
    }
}

/// Returns the true selection. Upper bound for any predictor.
#[derive(Debug, Clone, Copy, Default)]
pub struct OraclePredictor;

impl ExpertPredictor for OraclePredictor {
    fn name(&self) -> &str {
        "oracle"
    }

    fn predict(&self, trace: &ActivationTrace, layer: usize) -> Result<Vec<usize>> {
        if layer == 0 {
            return Err(PredictorError::NoPredictionForFirstLayer);
        }
        let mut set = trace
            .path
            .get(layer)
            .ok_or_else(|| PredictorError::Shape(format!("trace has no layer {layer}")))?
            .clone();
        set.sort_unstable();
        Ok(set)
    }
}

/// Top-k of the target layer's popularity row, ignoring the path.
#[derive(Debug, Clone, Copy)]
pub struct PopularityPredictor<'a> {
    stats: &'a TraceStats,
}

impl<'a> PopularityPredictor<'a> {
    pub fn new(stats: &'a TraceStats) -> Self {
        PopularityPredictor { stats }
    }
}

impl ExpertPredictor for PopularityPredictor<'_> {
    fn name(&self) -> &str {
        "popularity"
    }

    fn predict(&self, _trace: &ActivationTrace, layer: usize) -> Result<Vec<usize>> {
        let shape = self.stats.model.shape;
        if layer == 0 {
            return Err(PredictorError::NoPredictionForFirstLayer);
        }
        if layer >= shape.layers {
            return Err(PredictorError::Shape(format!(
                "target layer {layer} outside [1, {})",
                shape.layers
            )));
        }
        Ok(predict_topk(self.stats.popularity.layer(layer), shape.top_k))
    }
}
