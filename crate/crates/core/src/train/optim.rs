//! Adaptive-moment optimizer with decoupled weight decay.
//!
//! Moment state is keyed by parameter name in a sorted map; updates are
//! elementwise with the global clip coefficient computed in f64 over every
//! gradient in the step, so the whole update is order-independent of how
//! callers enumerate parameters.

use std::collections::BTreeMap;

use crate::error::Error;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;

#[derive(Debug, Clone)]
struct Slot<S> {
    m: Vec<S>,
    v: Vec<S>,
}

#[derive(Debug, Clone)]
pub struct AdamW<S: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied only to rank-2 tensors (projection
    /// matrices); norm vectors and other rank-1 state decay nothing.
    pub weight_decay: f64,
    /// Global-norm clipping threshold; None disables clipping.
    pub clip_norm: Option<f64>,
    t: u64,
    state: BTreeMap<String, Slot<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(weight_decay: f64, clip_norm: Option<f64>) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay,
            clip_norm,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Global-norm clip coefficient for this step's gradients, accumulated
    /// in f64 over parameters in sorted-name order.
    pub fn clip_coefficient(&self, grads: &BTreeMap<String, Vec<S>>) -> f64 {
        match self.clip_norm {
            None => 1.0,
            Some(max_norm) => {
                let mut ss = 0.0f64;
                for g in grads.values() {
                    for &v in g {
                        let v = v.as_f64();
                        ss += v * v;
                    }
                }
                let norm = ss.sqrt();
                if norm > max_norm {
                    max_norm / (norm + 1e-12)
                } else {
                    1.0
                }
            }
        }
    }

    /// Marks the start of one optimizer step (advances bias correction).
    pub fn advance_step(&mut self) {
        self.t += 1;
    }

    /// Applies one parameter's update. `clip_coef` must come from
    /// `clip_coefficient` over the full gradient set of this step, and
    /// `advance_step` must already have run.
    pub fn update_param(
        &mut self,
        name: &str,
        tensor: &mut Tensor<S>,
        grad: &[S],
        clip_coef: f64,
        lr: f64,
    ) -> Result<()> {
        if self.t == 0 {
            return Err(Error::InvalidArgument("advance_step must run before updates".into()));
        }
        if !tensor.requires_grad() {
            return Err(Error::FreezeViolation(format!(
                "optimizer update attempted on frozen tensor `{name}`"
            )));
        }
        if grad.len() != tensor.numel() {
            return Err(Error::ShapeMismatch {
                op: "optimizer_update",
                lhs: tensor.shape().to_vec(),
                rhs: vec![grad.len()],
            });
        }
        let slot = self.state.entry(name.to_string()).or_insert_with(|| Slot {
            m: vec![S::zero(); grad.len()],
            v: vec![S::zero(); grad.len()],
        });
        if slot.m.len() != grad.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer state for `{name}` has {} elements, gradient has {}",
                slot.m.len(),
                grad.len()
            )));
        }
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let one_m_b1 = S::from_f64(1.0 - self.beta1);
        let one_m_b2 = S::from_f64(1.0 - self.beta2);
        let bc1 = S::from_f64(1.0 / (1.0 - self.beta1.powi(self.t as i32)));
        let bc2 = S::from_f64(1.0 / (1.0 - self.beta2.powi(self.t as i32)));
        let eps = S::from_f64(self.eps);
        let step_lr = S::from_f64(lr);
        let decay = if tensor.shape().len() == 2 {
            S::from_f64(lr * self.weight_decay)
        } else {
            S::zero()
        };
        let cc = S::from_f64(clip_coef);
        let data = tensor.data_mut();
        for i in 0..grad.len() {
            let g = grad[i] * cc;
            slot.m[i] = b1 * slot.m[i] + one_m_b1 * g;
            slot.v[i] = b2 * slot.v[i] + one_m_b2 * g * g;
            let mhat = slot.m[i] * bc1;
            let vhat = slot.v[i] * bc2;
            data[i] = data[i] - step_lr * (mhat / (vhat.sqrt() + eps)) - decay * data[i];
        }
        Ok(())
    }

    /// Enumerates optimizer state for checkpointing: two tensors per
    /// parameter, named `{name}.m` and `{name}.v`.
    pub fn visit_state(&self, f: &mut impl FnMut(&str, &[S])) {
        for (name, slot) in &self.state {
            f(&format!("{name}.m"), &slot.m);
            f(&format!("{name}.v"), &slot.v);
        }
    }

    /// Restores one state slot pair; lengths must match between m and v.
    pub fn load_slot(&mut self, name: &str, m: Vec<S>, v: Vec<S>) -> Result<()> {
        if m.len() != v.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer slot `{name}` has mismatched moment lengths"
            )));
        }
        self.state.insert(name.to_string(), Slot { m, v });
        Ok(())
    }

    /// Sets the step counter when restoring from a checkpoint.
    pub fn set_steps(&mut self, t: u64) {
        self.t = t;
    }
}
