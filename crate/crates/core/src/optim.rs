//! Learning-rate schedule and the AdamW optimizer.

use serde::{Deserialize, Serialize};

use crate::autograd::GradStore;
use crate::error::{Error, Result};
use crate::model::Param;
use crate::tensor::{Real, Tensor};

/// Linear warmup to `base` followed by cosine decay to zero.
pub fn lr_at(step: u64, base: f64, warmup_steps: u64, total_steps: u64) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return base * (step + 1) as f64 / warmup_steps as f64;
    }
    let decay_steps = total_steps.saturating_sub(warmup_steps).max(1);
    let progress = ((step - warmup_steps.min(step)) as f64 / decay_steps as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// AdamW with decoupled weight decay applied to parameters flagged `decay`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T: Real> {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &[Param<T>]) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        Self { config, step: 0, first: zeros.clone(), second: zeros }
    }

    /// Applies one update with gradients already averaged over the batch.
    pub fn update(&mut self, params: &mut [Param<T>], grads: &GradStore<T>, lr: f64) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::Internal("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let (one, eps) = (T::one(), T::c(c.eps));
        let step_size = T::c(lr / bc1);
        let inv_bc2 = T::c(1.0 / bc2);
        for (id, p) in params.iter_mut().enumerate() {
            if p.decay && c.weight_decay > 0.0 {
                let shrink = T::c(1.0 - lr * c.weight_decay);
                p.tensor.scale_assign(shrink);
            }
            let Some(g) = grads.get(id) else { continue };
            let m = self.first[id].data_mut();
            let v = self.second[id].data_mut();
            for (((w, &g), m), v) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *w = *w - step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
