//! Alpha-balanced focal losses with analytic gradients, and the
//! theta-weighted combination of expert-head and hardness-head losses.
//!
//! The binary form is `-alpha * (1-p)^gamma * ln(p)` for positive targets and
//! `-(1-alpha) * p^gamma * ln(1-p)` for negative ones; probabilities are
//! clamped to `[1e-7, 1-1e-7]` before the logarithm. `gamma = 0` reduces to
//! alpha-weighted cross-entropy.

use serde::{Deserialize, Serialize};

/// Probability clamp keeping logarithms finite at saturation.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("probabilities must form a simplex of K >= 2 entries; {0}")]
    BadSimplex(String),
    #[error("invalid focal parameters: {0}")]
    InvalidParams(String),
}

/// Focal loss hyperparameters: `alpha` weighs the positive class
/// (`1 - alpha` the negative one), `gamma` focuses away from easy examples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        // the customary focal-loss defaults
        FocalParams {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(LossError::InvalidParams(format!(
                "alpha must lie in (0,1), got {}",
                self.alpha
            )));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(LossError::InvalidParams(format!(
                "gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Weight of the expert-head loss mean against the hardness-head loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossCombination {
    pub theta: f64,
}

impl Default for LossCombination {
    fn default() -> Self {
        LossCombination { theta: 0.5 }
    }
}

impl LossCombination {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(LossError::InvalidParams(format!(
                "theta must lie in [0,1], got {}",
                self.theta
            )));
        }
        Ok(())
    }
}

#[inline]
fn clamp_p(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Binary focal loss for a probability-of-class-1 `p` and target `y` in {0,1}.
pub fn focal_binary(p: f64, y: u8, params: &FocalParams) -> f64 {
    let p = clamp_p(p);
    if y == 1 {
        -params.alpha * (1.0 - p).powf(params.gamma) * p.ln()
    } else {
        -(1.0 - params.alpha) * p.powf(params.gamma) * (1.0 - p).ln()
    }
}

/// Analytic derivative of [`focal_binary`] with respect to `p`.
pub fn focal_binary_grad(p: f64, y: u8, params: &FocalParams) -> f64 {
    let p = clamp_p(p);
    let (alpha, gamma) = (params.alpha, params.gamma);
    if y == 1 {
        alpha * gamma * (1.0 - p).powf(gamma - 1.0) * p.ln()
            - alpha * (1.0 - p).powf(gamma) / p
    } else {
        (1.0 - alpha) * p.powf(gamma) / (1.0 - p)
            - (1.0 - alpha) * gamma * p.powf(gamma - 1.0) * (1.0 - p).ln()
    }
}

/// Multiclass focal loss `-alpha[y] * (1 - probs[y])^gamma * ln(probs[y])`.
pub fn focal_multiclass(
    probs: &[f64],
    y: usize,
    alpha_vec: &[f64],
    gamma: f64,
) -> Result<f64, LossError> {
    check_simplex(probs, y, alpha_vec)?;
    let p = clamp_p(probs[y]);
    Ok(-alpha_vec[y] * (1.0 - p).powf(gamma) * p.ln())
}

/// Derivative of [`focal_multiclass`] with respect to `probs[y]` (the loss
/// does not depend on the other components).
pub fn focal_multiclass_grad(
    probs: &[f64],
    y: usize,
    alpha_vec: &[f64],
    gamma: f64,
) -> Result<f64, LossError> {
    check_simplex(probs, y, alpha_vec)?;
    let p = clamp_p(probs[y]);
    let a = alpha_vec[y];
    Ok(a * gamma * (1.0 - p).powf(gamma - 1.0) * p.ln() - a * (1.0 - p).powf(gamma) / p)
}

fn check_simplex(probs: &[f64], y: usize, alpha_vec: &[f64]) -> Result<(), LossError> {
    if probs.len() < 2 {
        return Err(LossError::BadSimplex(format!(
            "need K >= 2 classes, got {}",
            probs.len()
        )));
    }
    if alpha_vec.len() != probs.len() {
        return Err(LossError::BadSimplex(format!(
            "alpha_vec has {} entries for {} classes",
            alpha_vec.len(),
            probs.len()
        )));
    }
    if y >= probs.len() {
        return Err(LossError::BadSimplex(format!(
            "class index {y} out of range for K={}",
            probs.len()
        )));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(LossError::BadSimplex(format!(
            "probabilities sum to {sum}, not 1"
        )));
    }
    Ok(())
}

/// `theta * mean(expert_losses) + (1 - theta) * hardness_loss`.
pub fn combined_loss(expert_losses: &[f64; 3], hardness_loss: f64, comb: &LossCombination) -> f64 {
    let mean = (expert_losses[0] + expert_losses[1] + expert_losses[2]) / 3.0;
    comb.theta * mean + (1.0 - comb.theta) * hardness_loss
}
