//! Pointwise training losses with generalized labels.
//!
//! Label correction rewrites binary labels to arbitrary reals (alpha can
//! exceed 1, beta can go below 0), so both losses here accept any finite
//! label. For labels in {0, 1} they reduce to the ordinary squared error
//! and binary cross-entropy.

use super::KernelError;

/// Which pointwise loss a training run minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    MeanSquaredError,
    CrossEntropy,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::MeanSquaredError => "mse",
            LossKind::CrossEntropy => "cross-entropy",
        }
    }
}

/// Predictions are clamped to `[PRED_CLAMP, 1 - PRED_CLAMP]` before any log.
///
/// With out-of-range labels the per-sample cross-entropy is unbounded below
/// as the prediction approaches 0 or 1; the aggregate minimum stays interior
/// but individual batches need the guard.
pub const PRED_CLAMP: f64 = 1e-7;

/// Squared error `(label - pred)^2`.
pub fn loss_mse(pred: f64, label: f64) -> Result<f64, KernelError> {
    if !pred.is_finite() || !label.is_finite() {
        return Err(KernelError::NonFinite {
            context: "loss_mse",
        });
    }
    let d = label - pred;
    Ok(d * d)
}

/// Negative log-likelihood `-(y ln p + (1 - y) ln(1 - p))` with the label
/// `y` allowed outside `[0, 1]`.
///
/// A prediction of exactly 0 or 1 is clamped, not rejected; the result can
/// be negative when the label lies outside `[0, 1]`.
pub fn loss_xent_generalized(pred: f64, label: f64) -> Result<f64, KernelError> {
    if pred.is_nan() || !label.is_finite() {
        return Err(KernelError::NonFinite {
            context: "loss_xent_generalized",
        });
    }
    let p = pred.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP);
    Ok(-(label * p.ln() + (1.0 - label) * (1.0 - p).ln()))
}

/// Per-sample loss under `kind`.
pub fn loss_value(kind: LossKind, pred: f64, label: f64) -> Result<f64, KernelError> {
    match kind {
        LossKind::MeanSquaredError => loss_mse(pred, label),
        LossKind::CrossEntropy => loss_xent_generalized(pred, label),
    }
}

/// Derivative of the per-sample loss with respect to the prediction,
/// evaluated at the clamped prediction for cross-entropy.
pub fn loss_grad(kind: LossKind, pred: f64, label: f64) -> f64 {
    match kind {
        LossKind::MeanSquaredError => 2.0 * (pred - label),
        LossKind::CrossEntropy => {
            let p = pred.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP);
            -label / p + (1.0 - label) / (1.0 - p)
        }
    }
}
