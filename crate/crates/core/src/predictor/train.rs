//! Mini-batch training with Adam, and a finite-difference gradient check.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::input::{construct_input_with, InputLayout};
use super::loss::{bce_loss, bce_with_logits};
use super::network::{Architecture, ExpertMlp, Gradients, Mode};
use super::{PredictorError, Result};
use crate::scalar::Scalar;
use crate::stats::TraceStats;
use crate::trace::TraceDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            epochs: 20,
            batch_size: 256,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub seed: u64,
    pub samples: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Mean training loss of each epoch (train mode, with dropout).
    pub epoch_losses: Vec<f64>,
    /// Eval-mode loss over the training set before the first update.
    pub initial_loss: f64,
    /// Eval-mode loss over the training set after the last update.
    pub final_loss: f64,
}

/// Feature matrix and multi-hot labels, one row per `(trace, layer >= 1)`.
#[derive(Debug, Clone)]
pub struct TrainingSet<F> {
    pub x: Array2<F>,
    pub y: Array2<F>,
}

impl<F: Scalar> TrainingSet<F> {
    pub fn build(ds: &TraceDataset, stats: &TraceStats, layout: InputLayout) -> Result<Self> {
        let shape = layout.shape;
        if ds.shape() != shape || stats.model.shape != shape {
            return Err(PredictorError::Shape(format!(
                "dataset {}, statistics {} and input layout {} disagree",
                ds.shape(),
                stats.model.shape,
                shape
            )));
        }
        let per_trace = shape.layers.saturating_sub(1);
        let rows = ds.len() * per_trace;
        let mut x = Array2::<F>::zeros((rows, layout.input_dim()));
        let mut y = Array2::<F>::zeros((rows, shape.experts));
        let mut r = 0;
        for t in &ds.traces {
            for l in 1..shape.layers {
                let s = construct_input_with(t, l, &stats.popularity, &stats.affinity, layout)?;
                s.write_features(shape.experts, x.row_mut(r).as_slice_mut().expect("row-major"));
                for &e in &t.path[l] {
                    y[[r, e]] = F::one();
                }
                r += 1;
            }
        }
        Ok(TrainingSet { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

/// Adam optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer<F> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(net: &mut ExpertMlp<F>, learning_rate: f64) -> Self {
        let shapes: Vec<usize> = net.trainable_mut().iter().map(|s| s.len()).collect();
        Trainer {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![F::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![F::zero(); n]).collect(),
        }
    }

    pub fn step(&mut self, net: &mut ExpertMlp<F>, grads: &Gradients<F>) {
        self.step += 1;
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let (one_b1, one_b2) = (F::one() - b1, F::one() - b2);
        let bias1 = 1.0 - self.beta1.powi(self.step);
        let bias2 = 1.0 - self.beta2.powi(self.step);
        let lr_t = F::of(self.learning_rate * bias2.sqrt() / bias1);
        let eps = F::of(self.eps * bias2.sqrt());
        for (((p, g), m), v) in net
            .trainable_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                p[i] -= lr_t * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

/// Eval-mode loss over a whole training set, evaluated in chunks.
pub fn dataset_loss<F: Scalar>(net: &ExpertMlp<F>, set: &TrainingSet<F>) -> Result<f64> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let mut eval = net.clone();
    eval.set_mode(Mode::Eval);
    let mut total = 0.0;
    let chunk = 4096;
    let mut start = 0;
    while start < set.len() {
        let end = (start + chunk).min(set.len());
        let p = eval.forward(set.x.slice(ndarray::s![start..end, ..]))?;
        total += bce_loss(p.view(), set.y.slice(ndarray::s![start..end, ..]))? * (end - start) as f64;
        start = end;
    }
    Ok(total / set.len() as f64)
}

/// Trains a fresh network of architecture `arch` on `set`.
///
/// Each epoch visits a seeded permutation of the rows in batches of
/// `batch_size`; a trailing batch of one row is skipped because batch
/// statistics are undefined for it.
pub fn train_on_set<F: Scalar>(
    set: &TrainingSet<F>,
    arch: Architecture,
    hyper: &TrainHyper,
) -> Result<(ExpertMlp<F>, TrainReport)> {
    if set.is_empty() {
        return Err(PredictorError::EmptyDataset);
    }
    if arch.input_dim != set.x.ncols() || arch.output_dim != set.y.ncols() {
        return Err(PredictorError::Shape(format!(
            "architecture is {}->{}, data is {}->{}",
            arch.input_dim,
            arch.output_dim,
            set.x.ncols(),
            set.y.ncols()
        )));
    }
    let batch_size = hyper.batch_size.max(2);
    let mut net = ExpertMlp::<F>::new(arch, hyper.seed);
    let mut opt = Trainer::new(&mut net, hyper.learning_rate);
    let mut order_rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    order_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    dropout_rng.set_stream(2);

    let initial_loss = dataset_loss(&net, set)?;
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);
    net.set_mode(Mode::Train);
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut order_rng);
        let mut sum = 0.0;
        let mut seen = 0usize;
        for (batch_index, idx) in order.chunks(batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let xb = set.x.select(Axis(0), idx);
            let yb = set.y.select(Axis(0), idx);
            let (logits, cache) = net.forward_train(xb.view(), Some(&mut dropout_rng))?;
            let (loss, d_logits) = bce_with_logits(logits.view(), yb.view())?;
            if !loss.is_finite() {
                return Err(PredictorError::NonFiniteLoss {
                    learning_rate: hyper.learning_rate,
                    epoch,
                    batch: batch_index,
                });
            }
            let grads = net.backward(&cache, &d_logits);
            opt.step(&mut net, &grads);
            net.update_running_stats(&cache, idx.len());
            sum += loss * idx.len() as f64;
            seen += idx.len();
        }
        epoch_losses.push(if seen > 0 { sum / seen as f64 } else { 0.0 });
    }
    net.set_mode(Mode::Eval);
    let final_loss = dataset_loss(&net, set)?;
    if !final_loss.is_finite() {
        return Err(PredictorError::NonFiniteLoss {
            learning_rate: hyper.learning_rate,
            epoch: hyper.epochs,
            batch: 0,
        });
    }
    let report = TrainReport {
        epochs: hyper.epochs,
        seed: hyper.seed,
        samples: set.len(),
        batch_size,
        learning_rate: hyper.learning_rate,
        epoch_losses,
        initial_loss,
        final_loss,
    };
    Ok((net, report))
}

/// Builds one sample per `(trace, layer >= 1)` of `ds_train` and trains.
pub fn train<F: Scalar>(
    ds_train: &TraceDataset,
    stats: &TraceStats,
    layout: InputLayout,
    arch: Architecture,
    hyper: &TrainHyper,
) -> Result<(ExpertMlp<F>, TrainReport)> {
    if ds_train.is_empty() {
        return Err(PredictorError::EmptyDataset);
    }
    let set = TrainingSet::<F>::build(ds_train, stats, layout)?;
    train_on_set(&set, arch, hyper)
}

/// Result of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    /// `(tensor index, element index)` of the worst parameter.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Denominator floor of the relative error, for parameters whose gradient
/// is analytically zero (pre-normalization biases).
pub const GRADIENT_CHECK_FLOOR: f64 = 1e-6;

/// Compares backprop gradients of the batch-mean BCE against central
/// differences with step `h`, with dropout off and batch-statistics
/// normalization over the fixed batch `x`.
///
/// Relative error is `|a - n| / max(|a|, |n|, GRADIENT_CHECK_FLOOR)`.
pub fn gradient_check(net: &ExpertMlp<f64>, x: ArrayView2<f64>, y: ArrayView2<f64>, h: f64) -> Result<GradientCheck> {
    let mut net = net.clone();
    net.arch.dropout = 0.0;
    let loss_of = |n: &ExpertMlp<f64>| -> Result<f64> {
        let (logits, _) = n.forward_train::<ChaCha8Rng>(x, None)?;
        Ok(bce_with_logits(logits.view(), y)?.0)
    };
    let (logits, cache) = net.forward_train::<ChaCha8Rng>(x, None)?;
    let (_, d_logits) = bce_with_logits(logits.view(), y)?;
    let analytic: Vec<Vec<f64>> = net
        .backward(&cache, &d_logits)
        .slices()
        .into_iter()
        .map(<[f64]>::to_vec)
        .collect();

    let mut worst = (0, 0);
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    for (t, grad) in analytic.iter().enumerate() {
        for (i, &a) in grad.iter().enumerate() {
            let original = net.trainable_mut()[t][i];
            net.trainable_mut()[t][i] = original + h;
            let plus = loss_of(&net)?;
            net.trainable_mut()[t][i] = original - h;
            let minus = loss_of(&net)?;
            net.trainable_mut()[t][i] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADIENT_CHECK_FLOOR);
            if rel > max_rel {
                max_rel = rel;
                worst = (t, i);
            }
            checked += 1;
        }
    }
    Ok(GradientCheck {
        max_relative_error: max_rel,
        worst,
        checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    fn random_batch(rows: usize, cols: usize, m: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_simple_fn((rows, cols), || rng.random::<f64>() * 2.0 - 1.0);
        let y = Array2::from_shape_simple_fn((rows, m), || if rng.random::<f64>() < 0.3 { 1.0 } else { 0.0 });
        (x, y)
    }

    #[test]
    fn small_net_gradients_match_finite_differences() {
        let (x, y) = random_batch(6, 5, 4, 1);
        let net = ExpertMlp::<f64>::new(Architecture::uniform(5, 8, 4), 2);
        let check = gradient_check(&net, x.view(), y.view(), 1e-4).unwrap();
        assert!(check.max_relative_error < 1e-4, "{check:?}");
        assert_eq!(check.checked, net.arch.param_count());
    }

    #[test]
    fn zero_net_output_bias_gradient_is_sigmoid_minus_label() {
        let arch = Architecture::uniform(3, 8, 4);
        let mut net = ExpertMlp::<f64>::zeroed(arch);
        net.arch.dropout = 0.0;
        let x = Array2::<f64>::zeros((2, 3));
        let y = ndarray::array![[1.0, 0.0, 1.0, 0.0], [1.0, 0.0, 0.0, 0.0]];
        let (logits, cache) = net.forward_train::<ChaCha8Rng>(x.view(), None).unwrap();
        let (_, d) = bce_with_logits(logits.view(), y.view()).unwrap();
        let g = net.backward(&cache, &d);
        let out_bias = &g.dense.last().unwrap().bias;
        // batch mean of (0.5 - y)
        assert_eq!(out_bias.to_vec(), vec![-0.5, 0.5, 0.0, 0.5]);
        let check = gradient_check(&net, x.view(), y.view(), 1e-4).unwrap();
        assert!(check.max_relative_error < 1e-4, "{check:?}");
    }

    #[test]
    fn symmetric_perturbation_is_second_order() {
        let (x, y) = random_batch(5, 4, 3, 7);
        let mut net = ExpertMlp::<f64>::new(Architecture::uniform(4, 8, 3), 8);
        net.arch.dropout = 0.0;
        let loss = |n: &ExpertMlp<f64>| {
            let (z, _) = n.forward_train::<ChaCha8Rng>(x.view(), None).unwrap();
            bce_with_logits(z.view(), y.view()).unwrap().0
        };
        let base = loss(&net);
        let w0 = net.dense[3].weight[[1, 2]];
        let mut asym = Vec::new();
        for h in [1e-2, 1e-3] {
            net.dense[3].weight[[1, 2]] = w0 + h;
            let up = loss(&net) - base;
            net.dense[3].weight[[1, 2]] = w0 - h;
            let down = base - loss(&net);
            net.dense[3].weight[[1, 2]] = w0;
            asym.push((up - down).abs());
        }
        // up - down is the second-order term: shrinks ~100x for 10x smaller h
        assert!(asym[1] < asym[0] / 50.0, "{asym:?}");
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_simple_fn((200, 6), || rng.random::<f32>());
        let y = x.map_axis(Axis(1), |r| [r[0] > 0.5, r[1] > 0.5, r[2] < r[3]]);
        let y = Array2::from_shape_fn((200, 3), |(i, j)| if y[i][j] { 1.0f32 } else { 0.0 });
        let set = TrainingSet { x, y };
        let hyper = TrainHyper {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-2,
            seed: 5,
        };
        let (net_a, rep_a) = train_on_set(&set, Architecture::uniform(6, 16, 3), &hyper).unwrap();
        let (net_b, rep_b) = train_on_set(&set, Architecture::uniform(6, 16, 3), &hyper).unwrap();
        assert_eq!(rep_a, rep_b);
        assert_eq!(net_a, net_b);
        assert!(rep_a.final_loss < rep_a.initial_loss);
        assert!(rep_a.epoch_losses.last().unwrap() < &rep_a.epoch_losses[0]);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let set = TrainingSet {
            x: Array2::<f64>::zeros((4, 3)),
            y: Array2::<f64>::zeros((4, 2)),
        };
        let hyper = TrainHyper {
            epochs: 0,
            ..TrainHyper::default()
        };
        let arch = Architecture::uniform(3, 8, 2);
        let (net, rep) = train_on_set(&set, arch.clone(), &hyper).unwrap();
        assert_eq!(rep.epochs, 0);
        assert!(rep.epoch_losses.is_empty());
        assert_eq!(net, ExpertMlp::new(arch, 0));
    }

    #[test]
    fn diverging_run_reports_non_finite_loss() {
        let set = TrainingSet {
            x: Array2::<f64>::from_elem((8, 3), 1.0),
            y: Array2::<f64>::from_elem((8, 2), 1.0),
        };
        let hyper = TrainHyper {
            epochs: 2,
            batch_size: 4,
            learning_rate: f64::NAN,
            seed: 0,
        };
        match train_on_set(&set, Architecture::uniform(3, 8, 2), &hyper) {
            Err(PredictorError::NonFiniteLoss { epoch, .. }) => assert!(epoch <= 2),
            other => panic!("expected non-finite loss, got {other:?}"),
        }
    }
}
