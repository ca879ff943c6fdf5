//! Loss terms: contrastive cross-entropy over prompt logits, a Beta prior
//! on final transmittance, and L1/L2 regularization of the transfer
//! function, plus the step schedule that switches terms on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tf::{map_color, map_color_deriv, map_density, map_density_deriv, TfParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    /// Shape of the symmetric Beta prior, `a = b`.
    pub beta_a: f64,
    pub density_weight: f64,
    /// L1 weight on control-point densities.
    pub lambda_density: f64,
    /// Squared-L2 weight pulling colors toward 0.5.
    pub lambda_color: f64,
    /// Steps `1..=gray_steps` use constant gray backgrounds.
    pub gray_steps: usize,
    /// First step (1-based) at which the transmittance prior is active.
    pub prior_start: usize,
    pub negatives_per_step: usize,
    pub transmittance_eps: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            beta_a: 0.5,
            density_weight: 0.02,
            lambda_density: 2e-5,
            lambda_color: 8e-4,
            gray_steps: 25,
            prior_start: 100,
            negatives_per_step: 128,
            transmittance_eps: 1e-4,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_a > 0.0 && self.beta_a < 1.0) {
            return Err(Error::invalid("beta_a must lie in (0, 1)"));
        }
        for (name, w) in [
            ("density_weight", self.density_weight),
            ("lambda_density", self.lambda_density),
            ("lambda_color", self.lambda_color),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::invalid(format!("{name} must be finite and non-negative")));
            }
        }
        if !(self.transmittance_eps > 0.0 && self.transmittance_eps < 0.5) {
            return Err(Error::invalid("transmittance_eps must lie in (0, 0.5)"));
        }
        if self.prior_start == 0 {
            return Err(Error::invalid("prior_start is a 1-based step index"));
        }
        Ok(())
    }

    pub fn schedule(&self, step: usize) -> Schedule {
        schedule(step, self.gray_steps, self.prior_start)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundPhase {
    Gray,
    Augmented,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub background: BackgroundPhase,
    pub prior_active: bool,
}

/// Term schedule for 1-based `step`.
pub fn schedule(step: usize, gray_steps: usize, prior_start: usize) -> Schedule {
    Schedule {
        background: if step <= gray_steps { BackgroundPhase::Gray } else { BackgroundPhase::Augmented },
        prior_active: step >= prior_start,
    }
}

/// Cross-entropy of a softmax over `[pos, negs...]` with the positive as
/// target. Returns the loss and its gradient with respect to every logit,
/// positive first.
pub fn contrastive_loss(pos_score: f64, neg_scores: &[f64]) -> Result<(f64, Vec<f64>)> {
    if neg_scores.is_empty() {
        return Err(Error::invalid("contrastive loss needs at least one negative"));
    }
    if !pos_score.is_finite() || neg_scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("logit".into()));
    }
    let max = neg_scores.iter().cloned().fold(pos_score, f64::max);
    let exps: Vec<f64> = std::iter::once(pos_score)
        .chain(neg_scores.iter().copied())
        .map(|s| (s - max).exp())
        .collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() - (pos_score - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / z).collect();
    grad[0] -= 1.0;
    Ok((loss, grad))
}

/// Mean over pixels of the symmetric Beta negative log-likelihood (without
/// its normalizing constant), with `T` clamped to `[eps, 1 - eps]`.
/// The gradient is per pixel and zero where the clamp is active.
pub fn beta_prior_loss(transmittance: &[f64], a: f64, eps: f64) -> (f64, Vec<f64>) {
    let n = transmittance.len().max(1) as f64;
    let k = a - 1.0;
    let mut loss = 0.0;
    let grad = transmittance
        .iter()
        .map(|&t| {
            let tc = t.clamp(eps, 1.0 - eps);
            loss -= k * (tc.ln() + (1.0 - tc).ln());
            if t > eps && t < 1.0 - eps {
                -k * (1.0 / tc - 1.0 / (1.0 - tc)) / n
            } else {
                0.0
            }
        })
        .collect();
    (loss / n, grad)
}

/// `λ1 Σ|σ_k| + λ2 Σ (c_k - 0.5)^2` over mapped control-point values, with
/// the gradient with respect to the flat raw parameters.
pub fn tf_reg_loss(params: &TfParams, lambda_density: f64, lambda_color: f64) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; params.len()];
    let d_off = params.density_offset();
    let c_off = params.color_offset();
    let mut l1 = 0.0;
    for (k, &raw) in params.raw_density.iter().enumerate() {
        let d = map_density(raw);
        l1 += d.abs();
        let sign = if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
        grad[d_off + k] = lambda_density * sign * map_density_deriv(raw);
    }
    let mut l2 = 0.0;
    for (k, rgb) in params.raw_color.iter().enumerate() {
        for ch in 0..3 {
            let dev = map_color(rgb[ch]) - 0.5;
            l2 += dev * dev;
            grad[c_off + 3 * k + ch] = lambda_color * 2.0 * dev * map_color_deriv(rgb[ch]);
        }
    }
    (lambda_density * l1 + lambda_color * l2, grad)
}

/// Per-term losses and the assembled gradient for one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveReport {
    pub l_clip: f64,
    pub l_density: f64,
    pub l_reg: f64,
    pub density_weight: f64,
    pub grad_phi: Vec<f64>,
}

impl ObjectiveReport {
    pub fn total(&self) -> f64 {
        self.l_clip + self.density_weight * self.l_density + self.l_reg
    }

    pub fn is_finite(&self) -> bool {
        self.l_clip.is_finite()
            && self.l_density.is_finite()
            && self.l_reg.is_finite()
            && self.grad_phi.iter().all(|g| g.is_finite())
    }
}
