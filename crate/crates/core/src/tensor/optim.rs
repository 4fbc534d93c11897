use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};
use crate::Scalar;

/// Adaptive-moment optimiser with decoupled weight decay and bias correction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment buffers, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T> {
    pub step: u64,
    pub rejected_steps: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> OptState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            step: 0,
            rejected_steps: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient contained NaN/inf; parameters and moments are untouched.
    Rejected,
}

impl AdamW {
    /// Applies one update with learning rate `lr` (overrides `self.lr`).
    pub fn step<T: Scalar>(
        &self,
        params: &mut [Tensor<T>],
        grads: &[Tensor<T>],
        state: &mut OptState<T>,
        lr: f64,
    ) -> Result<StepOutcome, TensorError> {
        if params.len() != grads.len() || params.len() != state.m.len() {
            return Err(TensorError::invalid(
                "optimizer_step",
                format!(
                    "{} params, {} grads, {} state slots",
                    params.len(),
                    grads.len(),
                    state.m.len()
                ),
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "optimizer_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        if !grads.iter().all(Tensor::all_finite) {
            state.rejected_steps += 1;
            return Ok(StepOutcome::Rejected);
        }
        state.step += 1;
        let t = state.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let bc1 = T::one() - T::lit(self.beta1.powi(t));
        let bc2 = T::one() - T::lit(self.beta2.powi(t));
        let lr_t = T::lit(lr);
        let decay = T::one() - T::lit(lr * self.weight_decay);
        let eps = T::lit(self.eps);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(state.m.iter_mut())
            .zip(state.v.iter_mut())
        {
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((pi, &gi), (mi, vi)) in iter {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi = *pi * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(StepOutcome::Applied)
    }
}

/// Cosine decay from `base` at step 0 to zero at `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f64) / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.sum_sq().as_f64())
        .sum::<f64>()
        .sqrt();
    if norm.is_finite() && norm > max_norm && max_norm > 0.0 {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }
    norm
}
