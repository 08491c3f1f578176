//! Training objectives: focal classification loss and masked MSE for line
//! localization, each with its closed-form gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to the true-class probability before taking logs, so the
/// loss and its gradient stay finite when a softmax saturates.
pub const PROB_EPSILON: f64 = 1e-12;

/// Focal-loss shape: `alpha` balances the class term, `delta` focuses it —
/// the loss is −α·(1−p_t)^δ·log(p_t), which is α-scaled cross-entropy when
/// δ = 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub delta: f64,
}

impl Default for FocalParams {
    fn default() -> FocalParams {
        FocalParams {
            alpha: 0.25,
            delta: 2.0,
        }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid(format!(
                "focal alpha must be in (0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(Error::invalid(format!(
                "focal delta must be ≥ 0, got {}",
                self.delta
            )));
        }
        Ok(())
    }
}

/// Numerically-stable softmax over a logit slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

fn check_distribution(class_probs: &[f64], true_class: usize) -> Result<()> {
    if true_class >= class_probs.len() {
        return Err(Error::invalid(format!(
            "true class {true_class} out of range for {} probabilities",
            class_probs.len()
        )));
    }
    let sum: f64 = class_probs.iter().sum();
    if !sum.is_finite() || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "class probabilities sum to {sum}, expected 1 within 1e-6"
        )));
    }
    if class_probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
        return Err(Error::invalid("class probabilities must be finite and ≥ 0"));
    }
    Ok(())
}

/// −α·(1−p_t)^δ·log(p_t) with p_t clamped to [`PROB_EPSILON`].
pub fn focal_loss(class_probs: &[f64], true_class: usize, params: &FocalParams) -> Result<f64> {
    params.validate()?;
    check_distribution(class_probs, true_class)?;
    let p = class_probs[true_class].max(PROB_EPSILON);
    let damp = (1.0 - p).max(0.0);
    Ok(-params.alpha * damp.powf(params.delta) * p.ln())
}

/// Gradient of [`focal_loss`] with respect to the logits that produced
/// `class_probs` via softmax.
///
/// Writing p for the true-class probability, the chain rule through the
/// softmax gives dL/dz_j = g·(p_j − [j = t]) with
/// g = α·(1−p)^(δ−1)·((1−p) − δ·p·ln p). Both factors of g stay bounded:
/// at δ = 0 the (1−p)^(δ−1) pole cancels exactly and g reduces to α (the
/// cross-entropy slope), and as p → 1 the clamp below keeps the power
/// finite while g → 0 for δ ≥ 1.
pub fn focal_grad_wrt_logits(
    class_probs: &[f64],
    true_class: usize,
    params: &FocalParams,
) -> Result<Vec<f64>> {
    params.validate()?;
    check_distribution(class_probs, true_class)?;
    let p = class_probs[true_class].clamp(PROB_EPSILON, 1.0 - PROB_EPSILON);
    let q = 1.0 - p;
    let g = if params.delta == 0.0 {
        params.alpha
    } else {
        params.alpha * q.powf(params.delta - 1.0) * (q - params.delta * p * p.ln())
    };
    Ok(class_probs
        .iter()
        .enumerate()
        .map(|(j, &pj)| {
            let indicator = if j == true_class { 1.0 } else { 0.0 };
            g * (pj - indicator)
        })
        .collect())
}

/// Mean of the squared endpoint errors: ((Δstart)² + (Δend)²) / 2.
///
/// Callers mask this per sample — a non-vulnerable sample contributes
/// neither a term nor a slot in the batch mean.
pub fn loc_loss(pred: (f64, f64), truth: (f64, f64)) -> f64 {
    let ds = pred.0 - truth.0;
    let de = pred.1 - truth.1;
    (ds * ds + de * de) / 2.0
}

/// Gradient of [`loc_loss`] with respect to `pred`.
pub fn loc_grad(pred: (f64, f64), truth: (f64, f64)) -> (f64, f64) {
    (pred.0 - truth.0, pred.1 - truth.1)
}
