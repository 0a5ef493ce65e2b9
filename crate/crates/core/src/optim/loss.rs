use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Predictions are clamped to `[PRED_CLAMP, 1 - PRED_CLAMP]` before the
/// logarithms.
pub const PRED_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct LossReport<T> {
    pub value: f64,
    /// ∂value/∂pred, zero wherever the clamp is active.
    pub gradient: Tensor<T>,
}

/// Mean binary cross-entropy over every element.
pub fn bce_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<LossReport<T>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("bce_loss", pred.shape(), target.shape()));
    }
    if let Some(v) = target.data().iter().find(|&&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::OutOfRange(format!("bce target {v} outside [0, 1]")));
    }
    let count = pred.len() as f64;
    let (lo, hi) = (PRED_CLAMP, 1.0 - PRED_CLAMP);
    let mut total = 0.0f64;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &y) in pred.data().iter().zip(target.data()) {
        let (p, y) = (p.as_f64(), y.as_f64());
        if !p.is_finite() {
            return Err(Error::NonFinite("bce prediction".into()));
        }
        let pc = p.clamp(lo, hi);
        total -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        let g = if p < lo || p > hi {
            0.0
        } else {
            (-y / pc + (1.0 - y) / (1.0 - pc)) / count
        };
        grad.push(T::lit(g));
    }
    Ok(LossReport {
        value: total / count,
        gradient: Tensor::from_parts(pred.shape().to_vec(), grad),
    })
}
