use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Default global ℓ2 threshold used by the trainers.
pub const GRAD_CLIP_NORM: f64 = 5.0;

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamSlot {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Bias-corrected Adam over the trainable parameters of a [`ParamStore`].
///
/// Moments are kept in `f64` regardless of the parameter precision and are
/// matched to parameters by name, so a store may gain or lose frozen
/// parameters between steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub slots: Vec<AdamSlot>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            slots: Vec::new(),
        }
    }

    /// Applies one update to every trainable parameter, then zeroes all
    /// gradients. Fails without touching any value if a gradient is not
    /// finite.
    pub fn step<T: Scalar, S: ParamStore<T> + ?Sized>(&mut self, store: &mut S) -> Result<()> {
        for p in store.params() {
            if p.trainable && p.grad.data().iter().any(|g| !g.is_finite()) {
                return Err(Error::NanGradient(p.name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for p in store.params_mut() {
            if !p.trainable {
                continue;
            }
            let idx = match self.slots.iter().position(|s| s.name == p.name) {
                Some(i) => i,
                None => {
                    self.slots.push(AdamSlot {
                        name: p.name.clone(),
                        m: vec![0.0; p.value.len()],
                        v: vec![0.0; p.value.len()],
                    });
                    self.slots.len() - 1
                }
            };
            let slot = &mut self.slots[idx];
            if slot.m.len() != p.value.len() {
                return Err(Error::Invalid(format!(
                    "optimizer state for `{}` has {} entries, parameter has {}",
                    p.name,
                    slot.m.len(),
                    p.value.len()
                )));
            }
            for (((w, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(slot.m.iter_mut())
                .zip(slot.v.iter_mut())
            {
                let g = g.as_f64();
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= T::of_f64(self.lr * mhat / (vhat.sqrt() + self.eps));
            }
        }
        store.zero_grad();
        Ok(())
    }
}

/// Rescales all trainable gradients so their joint ℓ2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar, S: ParamStore<T> + ?Sized>(store: &mut S, max_norm: f64) -> f64 {
    let total: f64 = store
        .params()
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.grad.norm_sq())
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total.is_finite() {
        let s = T::of_f64(max_norm / total);
        for p in store.params_mut() {
            if p.trainable {
                p.grad = Tensor::scale(&p.grad, s);
            }
        }
    }
    total
}
