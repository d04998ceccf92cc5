//! The ExpertMLP network: dense layers with batch normalization, ReLU and
//! dropout on every hidden layer, a linear output layer and sigmoid outputs.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PredictorError, Result};
use crate::scalar::Scalar;

/// Hidden widths of the full-size network.
pub const HIDDEN_WIDTHS: [usize; 6] = [2048, 1024, 512, 256, 128, 64];
pub const DEFAULT_DROPOUT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Architecture {
    /// Full-size network: six hidden layers halving from 2048 to 64.
    pub fn standard(input_dim: usize, output_dim: usize) -> Self {
        Self::with_hidden(input_dim, HIDDEN_WIDTHS.to_vec(), output_dim)
    }

    /// Same depth with every hidden layer `width` wide.
    pub fn uniform(input_dim: usize, width: usize, output_dim: usize) -> Self {
        Self::with_hidden(input_dim, vec![width; HIDDEN_WIDTHS.len()], output_dim)
    }

    pub fn with_hidden(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        Architecture {
            input_dim,
            hidden,
            output_dim,
            dropout: DEFAULT_DROPOUT,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    /// Fully connected layer count (hidden plus output).
    pub fn depth(&self) -> usize {
        self.hidden.len() + 1
    }

    /// `(fan_in, fan_out)` of each dense layer.
    pub fn dense_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.depth());
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        let dense: usize = self.dense_dims().iter().map(|(i, o)| i * o + o).sum();
        dense + 2 * self.hidden.iter().sum::<usize>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    /// `fan_in x fan_out`.
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
}

impl<F: Scalar> BatchNorm<F> {
    fn identity(width: usize) -> Self {
        BatchNorm {
            gamma: Array1::from_elem(width, F::one()),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::from_elem(width, F::one()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertMlp<F> {
    pub arch: Architecture,
    pub dense: Vec<Dense<F>>,
    pub norms: Vec<BatchNorm<F>>,
    pub mode: Mode,
}

/// Gradients laid out like the trainable parameters of [`ExpertMlp`].
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub dense: Vec<Dense<F>>,
    /// `(d gamma, d beta)` per hidden layer.
    pub norms: Vec<(Array1<F>, Array1<F>)>,
}

impl<F: Scalar> Gradients<F> {
    /// Flat views in [`ExpertMlp::trainable_mut`] order.
    pub fn slices(&self) -> Vec<&[F]> {
        let mut out = Vec::with_capacity(4 * self.dense.len());
        for (i, d) in self.dense.iter().enumerate() {
            out.push(d.weight.as_slice().expect("standard layout"));
            out.push(d.bias.as_slice().expect("standard layout"));
            if let Some((g, b)) = self.norms.get(i) {
                out.push(g.as_slice().expect("standard layout"));
                out.push(b.as_slice().expect("standard layout"));
            }
        }
        out
    }
}

/// Activations kept from a training forward pass.
pub struct ForwardCache<F> {
    hidden: Vec<HiddenCache<F>>,
    /// Input of the output layer.
    last_input: Array2<F>,
    /// Batch mean and biased variance per hidden layer.
    pub batch_stats: Vec<(Array1<F>, Array1<F>)>,
}

struct HiddenCache<F> {
    input: Array2<F>,
    xhat: Array2<F>,
    inv_std: Array1<F>,
    /// Post-normalization pre-activation, for the ReLU mask.
    pre_relu: Array2<F>,
    /// Inverted-dropout multipliers (`0` or `1 / (1 - p)`).
    dropout: Option<Array2<F>>,
}

impl<F: Scalar> ExpertMlp<F> {
    /// Randomly initialized network. Weights and biases are uniform in
    /// `+-1/sqrt(fan_in)`; batch norms start as the identity.
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dense = arch
            .dense_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut draw = || F::of((2.0 * rng.random::<f64>() - 1.0) * bound);
                let weight = Array2::from_shape_simple_fn((fan_in, fan_out), &mut draw);
                let bias = Array1::from_shape_simple_fn(fan_out, &mut draw);
                Dense { weight, bias }
            })
            .collect();
        let norms = arch.hidden.iter().map(|&h| BatchNorm::identity(h)).collect();
        ExpertMlp {
            arch,
            dense,
            norms,
            mode: Mode::Eval,
        }
    }

    /// All weights and biases zero, batch norms identity.
    pub fn zeroed(arch: Architecture) -> Self {
        let dense = arch
            .dense_dims()
            .into_iter()
            .map(|(i, o)| Dense {
                weight: Array2::zeros((i, o)),
                bias: Array1::zeros(o),
            })
            .collect();
        let norms = arch.hidden.iter().map(|&h| BatchNorm::identity(h)).collect();
        ExpertMlp {
            arch,
            dense,
            norms,
            mode: Mode::Eval,
        }
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    fn check_input(&self, x: &ArrayView2<F>) -> Result<()> {
        if x.ncols() != self.arch.input_dim {
            return Err(PredictorError::Shape(format!(
                "input has {} features, network expects {}",
                x.ncols(),
                self.arch.input_dim
            )));
        }
        Ok(())
    }

    /// Logits for a batch. Eval mode normalizes with running statistics;
    /// train mode uses batch statistics. Dropout is never applied here.
    pub fn logits(&self, x: ArrayView2<F>) -> Result<Array2<F>> {
        self.check_input(&x)?;
        match self.mode {
            Mode::Eval => Ok(self.logits_eval(x)),
            Mode::Train => Ok(self.forward_train::<ChaCha8Rng>(x, None)?.0),
        }
    }

    /// Sigmoid probabilities for a batch, shape `batch x M`.
    pub fn forward(&self, x: ArrayView2<F>) -> Result<Array2<F>> {
        Ok(self.logits(x)?.mapv(sigmoid))
    }

    /// Probabilities for a single state.
    pub fn forward_one(&self, features: &[F]) -> Result<Vec<F>> {
        let x =
            ArrayView2::from_shape((1, features.len()), features).map_err(|e| PredictorError::Shape(e.to_string()))?;
        Ok(self.forward(x)?.into_raw_vec_and_offset().0)
    }

    fn logits_eval(&self, x: ArrayView2<F>) -> Array2<F> {
        let eps = F::of(self.arch.bn_eps);
        let mut a = x.to_owned();
        for (d, bn) in self.dense.iter().zip(&self.norms) {
            let mut h = a.dot(&d.weight) + &d.bias;
            let scale = Zip::from(&bn.gamma)
                .and(&bn.running_var)
                .map_collect(|&g, &v| g / (v + eps).sqrt());
            let shift = Zip::from(&bn.beta)
                .and(&bn.running_mean)
                .and(&scale)
                .map_collect(|&b, &m, &s| b - m * s);
            h *= &scale;
            h += &shift;
            h.mapv_inplace(relu);
            a = h;
        }
        let out = self.dense.last().expect("output layer");
        a.dot(&out.weight) + &out.bias
    }

    /// Training forward pass with batch statistics. Dropout is applied when
    /// `rng` is given and the rate is positive.
    pub fn forward_train<R: Rng>(
        &self,
        x: ArrayView2<F>,
        mut rng: Option<&mut R>,
    ) -> Result<(Array2<F>, ForwardCache<F>)> {
        self.check_input(&x)?;
        let batch = x.nrows();
        if batch < 2 {
            return Err(PredictorError::Shape(
                "batch normalization with batch statistics needs at least 2 rows".into(),
            ));
        }
        let eps = F::of(self.arch.bn_eps);
        let n = F::of(batch as f64);
        let p = self.arch.dropout;
        let keep_scale = F::of(1.0 / (1.0 - p));

        let mut hidden = Vec::with_capacity(self.norms.len());
        let mut batch_stats = Vec::with_capacity(self.norms.len());
        let mut a = x.to_owned();
        for (d, bn) in self.dense.iter().zip(&self.norms) {
            let h = a.dot(&d.weight) + &d.bias;
            let mean = h.sum_axis(Axis(0)) / n;
            let centered = &h - &mean;
            let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
            let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());
            let xhat = &centered * &inv_std;
            let pre_relu = &xhat * &bn.gamma + &bn.beta;
            let mut out = pre_relu.mapv(relu);
            let dropout = match rng.as_deref_mut() {
                Some(rng) if p > 0.0 => {
                    let mask = Array2::from_shape_simple_fn(out.raw_dim(), || {
                        if rng.random::<f64>() < p {
                            F::zero()
                        } else {
                            keep_scale
                        }
                    });
                    out *= &mask;
                    Some(mask)
                }
                _ => None,
            };
            hidden.push(HiddenCache {
                input: std::mem::replace(&mut a, out),
                xhat,
                inv_std,
                pre_relu,
                dropout,
            });
            batch_stats.push((mean, var));
        }
        let last = self.dense.last().expect("output layer");
        let logits = a.dot(&last.weight) + &last.bias;
        Ok((
            logits,
            ForwardCache {
                hidden,
                last_input: a,
                batch_stats,
            },
        ))
    }

    /// Backpropagates `d_logits` through a cached training pass.
    pub fn backward(&self, cache: &ForwardCache<F>, d_logits: &Array2<F>) -> Gradients<F> {
        let depth = self.dense.len();
        let mut dense_grads: Vec<Option<Dense<F>>> = vec![None; depth];
        let mut norm_grads: Vec<Option<(Array1<F>, Array1<F>)>> = vec![None; depth - 1];

        let last = &self.dense[depth - 1];
        dense_grads[depth - 1] = Some(Dense {
            weight: cache.last_input.t().dot(d_logits),
            bias: d_logits.sum_axis(Axis(0)),
        });
        let mut d_a = d_logits.dot(&last.weight.t());

        for i in (0..depth - 1).rev() {
            let c = &cache.hidden[i];
            let bn = &self.norms[i];
            if let Some(mask) = &c.dropout {
                d_a *= mask;
            }
            Zip::from(&mut d_a).and(&c.pre_relu).for_each(|g, &z| {
                if z <= F::zero() {
                    *g = F::zero();
                }
            });
            let d_gamma = (&d_a * &c.xhat).sum_axis(Axis(0));
            let d_beta = d_a.sum_axis(Axis(0));
            let d_xhat = &d_a * &bn.gamma;
            let n = F::of(d_a.nrows() as f64);
            let sum_dxhat = d_xhat.sum_axis(Axis(0));
            let sum_dxhat_xhat = (&d_xhat * &c.xhat).sum_axis(Axis(0));
            let mut d_h = d_xhat * n;
            d_h -= &sum_dxhat;
            d_h -= &(&c.xhat * &sum_dxhat_xhat);
            d_h *= &(&c.inv_std / n);

            dense_grads[i] = Some(Dense {
                weight: c.input.t().dot(&d_h),
                bias: d_h.sum_axis(Axis(0)),
            });
            norm_grads[i] = Some((d_gamma, d_beta));
            if i > 0 {
                d_a = d_h.dot(&self.dense[i].weight.t());
            }
        }
        Gradients {
            dense: dense_grads.into_iter().map(|g| g.expect("filled")).collect(),
            norms: norm_grads.into_iter().map(|g| g.expect("filled")).collect(),
        }
    }

    /// Blends batch statistics into the running estimates. The running
    /// variance uses the unbiased batch variance.
    pub fn update_running_stats(&mut self, cache: &ForwardCache<F>, batch: usize) {
        let momentum = F::of(self.arch.bn_momentum);
        let keep = F::one() - momentum;
        let unbias = F::of(batch as f64 / (batch as f64 - 1.0).max(1.0));
        for (bn, (mean, var)) in self.norms.iter_mut().zip(&cache.batch_stats) {
            Zip::from(&mut bn.running_mean)
                .and(mean)
                .for_each(|r, &m| *r = keep * *r + momentum * m);
            Zip::from(&mut bn.running_var)
                .and(var)
                .for_each(|r, &v| *r = keep * *r + momentum * v * unbias);
        }
    }

    /// Mutable flat views of every trainable parameter, ordered per dense
    /// layer as weight, bias, then gamma and beta of its batch norm.
    pub fn trainable_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = Vec::with_capacity(4 * self.dense.len());
        let mut norms = self.norms.iter_mut();
        for d in self.dense.iter_mut() {
            out.push(d.weight.as_slice_mut().expect("standard layout"));
            out.push(d.bias.as_slice_mut().expect("standard layout"));
            if let Some(bn) = norms.next() {
                out.push(bn.gamma.as_slice_mut().expect("standard layout"));
                out.push(bn.beta.as_slice_mut().expect("standard layout"));
            }
        }
        out
    }

    /// Every stored value flattened in model-file order: per dense layer
    /// weight then bias, then per batch norm gamma, beta, running mean and
    /// running variance.
    pub fn stored_flat(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.arch.param_count() + 2 * self.arch.hidden.iter().sum::<usize>());
        for d in &self.dense {
            out.extend(d.weight.iter().copied());
            out.extend(d.bias.iter().copied());
        }
        for bn in &self.norms {
            for arr in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
                out.extend(arr.iter().copied());
            }
        }
        out
    }

    /// Rebuilds a network from [`ExpertMlp::stored_flat`] output.
    pub fn from_stored_flat(arch: Architecture, values: &[F]) -> Result<Self> {
        let mut net = ExpertMlp::zeroed(arch);
        let expected = net.stored_flat().len();
        if values.len() != expected {
            return Err(PredictorError::Shape(format!(
                "model holds {} values, architecture needs {expected}",
                values.len()
            )));
        }
        let mut it = values.iter().copied();
        for d in net.dense.iter_mut() {
            d.weight.iter_mut().for_each(|v| *v = it.next().expect("counted"));
            d.bias.iter_mut().for_each(|v| *v = it.next().expect("counted"));
        }
        for bn in net.norms.iter_mut() {
            for arr in [&mut bn.gamma, &mut bn.beta, &mut bn.running_mean, &mut bn.running_var] {
                arr.iter_mut().for_each(|v| *v = it.next().expect("counted"));
            }
        }
        Ok(net)
    }
}

pub(crate) fn sigmoid<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

fn relu<F: Scalar>(v: F) -> F {
    if v > F::zero() {
        v
    } else {
        F::zero()
    }
}
