//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

/// First/second moment estimates keyed by parameter name, plus the shared
/// step counter used for bias correction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

/// One parameter array taking part in an update.
pub struct ParamSlot<'a> {
    pub name: &'a str,
    pub value: &'a mut [f64],
    pub grad: &'a [f64],
    /// Whether decoupled weight decay applies to this array.
    pub decay: bool,
    /// Multiplier on the configured learning rate for this array.
    pub lr_scale: f64,
}

/// Applies one AdamW update to every slot, with `lr` scaled per slot:
///
/// ```text
/// θ ← θ·(1 − lr·wd)
/// m ← β₁m + (1 − β₁)g,   v ← β₂v + (1 − β₂)g²
/// θ ← θ − lr · m̂ / (√v̂ + ε),   m̂ = m/(1 − β₁ᵗ),  v̂ = v/(1 − β₂ᵗ)
/// ```
///
/// Gradients are checked before anything is modified.
pub fn adamw_step(slots: &mut [ParamSlot<'_>], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    for slot in slots.iter() {
        if slot.value.len() != slot.grad.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter `{}` has {} entries but its gradient has {}",
                slot.name,
                slot.value.len(),
                slot.grad.len()
            )));
        }
        if !(slot.lr_scale >= 0.0 && slot.lr_scale.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning-rate scale for `{}` must be non-negative", slot.name)));
        }
        if slot.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(slot.name.to_string()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for slot in slots.iter_mut() {
        let lr = cfg.learning_rate * slot.lr_scale;
        let n = slot.value.len();
        let (m, v) = state
            .moments
            .entry(slot.name.to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let shrink = if slot.decay { 1.0 - lr * cfg.weight_decay } else { 1.0 };
        for i in 0..n {
            let g = slot.grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            slot.value[i] = slot.value[i] * shrink - lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}
