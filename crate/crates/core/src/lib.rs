//! Expert-activation statistics, a next-layer expert predictor and a
//! discrete-event simulator for dual-phase expert prefetching in
//! mixture-of-experts inference.
//!
//! The pipeline is trace driven:
//!
//! 1. [`trace`] records (or synthesizes) per-token expert activation paths.
//! 2. [`stats`] reduces a trace set to per-layer popularity and
//!    consecutive-layer affinity matrices.
//! 3. [`predictor`] trains a multi-label MLP that forecasts the experts of
//!    the next layer from the path so far plus those statistics.
//! 4. [`sim`] replays requests through a three-stream (compute, comm,
//!    predict) timeline under on-demand, prefetch-all and predictive
//!    policies and reports latency, throughput and memory.
//!
//! Network math is generic over the scalar type; [`ExpertMlpF32`] is the
//! production width type and [`ExpertMlpF64`] backs gradient checks.

pub mod config;
pub mod digest;
pub mod predictor;
pub mod scalar;
pub mod sim;
pub mod stats;
pub mod trace;

pub use config::{CostModel, ModelConfig, SchedulerPolicy};
pub use predictor::{ExpertMlp, ExpertPredictor, HitRateReport, StateVector, TrainReport};
pub use scalar::Scalar;
pub use sim::{RequestMetrics, SimReport};
pub use stats::{AffinityMatrix, PopularityMatrix, TraceStats};
pub use trace::{ActivationTrace, GeneratorParams, Phase, TraceDataset};

/// Single-precision predictor, used for full-width training and inference.
pub type ExpertMlpF32 = predictor::ExpertMlp<f32>;
/// Double-precision predictor, used where finite differences need headroom.
pub type ExpertMlpF64 = predictor::ExpertMlp<f64>;
/// Trainer state for [`ExpertMlpF32`].
pub type TrainerF32 = predictor::Trainer<f32>;
/// Trainer state for [`ExpertMlpF64`].
pub type TrainerF64 = predictor::Trainer<f64>;
