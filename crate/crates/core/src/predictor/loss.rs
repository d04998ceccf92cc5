//! Multi-label binary cross-entropy.

use ndarray::{Array2, ArrayView2, Zip};

use super::network::sigmoid;
use super::{PredictorError, Result};
use crate::scalar::Scalar;

/// Probabilities are clamped to `[EPSILON, 1 - EPSILON]` before the log.
pub const EPSILON: f64 = 1e-7;

fn check_shapes<F>(a: &ArrayView2<F>, b: &ArrayView2<F>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(PredictorError::Shape(format!(
            "predictions are {:?}, labels are {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn term(p: f64, y: f64) -> f64 {
    let p = p.clamp(EPSILON, 1.0 - EPSILON);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// `-sum_j [y log p + (1 - y) log(1 - p)]`, summed over experts and
/// averaged over the batch. Accumulated in `f64`.
pub fn bce_loss<F: Scalar>(probs: ArrayView2<F>, labels: ArrayView2<F>) -> Result<f64> {
    check_shapes(&probs, &labels)?;
    if probs.nrows() == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    Zip::from(&probs)
        .and(&labels)
        .for_each(|&p, &y| total += term(p.as_f64(), y.as_f64()));
    Ok(total / probs.nrows() as f64)
}

/// Loss of `logits` and its gradient with respect to them, `(sigmoid(z) - y) / B`.
pub fn bce_with_logits<F: Scalar>(logits: ArrayView2<F>, labels: ArrayView2<F>) -> Result<(f64, Array2<F>)> {
    check_shapes(&logits, &labels)?;
    let batch = logits.nrows().max(1);
    let inv_b = F::of(1.0 / batch as f64);
    let mut total = 0.0;
    let grad = Zip::from(&logits).and(&labels).map_collect(|&z, &y| {
        let p = sigmoid(z);
        total += term(p.as_f64(), y.as_f64());
        (p - y) * inv_b
    });
    Ok((total / batch as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    #[test]
    fn half_probabilities_cost_m_ln_two() {
        let p = Array2::<f64>::from_elem((3, 8), 0.5);
        let y = Array2::from_shape_fn((3, 8), |(i, j)| ((i + j) % 2) as f64);
        let loss = bce_loss(p.view(), y.view()).unwrap();
        assert!((loss - 8.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((loss - 5.5452).abs() < 1e-4);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let y = array![[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]];
        let loss = bce_loss(y.view(), y.view()).unwrap();
        assert!(loss > 0.0 && loss < 1e-5, "{loss}");
        let expected = -8.0 * (1.0 - EPSILON).ln();
        assert!((loss - expected).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Array2::<f32>::zeros((2, 3));
        let b = Array2::<f32>::zeros((2, 4));
        assert!(bce_loss(a.view(), b.view()).is_err());
    }

    #[test]
    fn logits_path_matches_probability_path() {
        let z = array![[0.3, -2.0, 4.0], [1.5, 0.0, -0.7]];
        let y = array![[1.0, 0.0, 1.0], [0.0, 0.0, 1.0]];
        let (loss, grad) = bce_with_logits(z.view(), y.view()).unwrap();
        let p = z.mapv(sigmoid);
        assert!((loss - bce_loss(p.view(), y.view()).unwrap()).abs() < 1e-12);
        assert!((grad[[0, 0]] - (sigmoid(0.3f64) - 1.0) / 2.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn loss_is_never_negative(
            ps in proptest::collection::vec(0.0f64..=1.0, 12),
            ys in proptest::collection::vec(0u8..2, 12),
        ) {
            let p = Array2::from_shape_vec((3, 4), ps).unwrap();
            let y = Array2::from_shape_vec((3, 4), ys.into_iter().map(f64::from).collect()).unwrap();
            prop_assert!(bce_loss(p.view(), y.view()).unwrap() >= 0.0);
        }
    }
}
