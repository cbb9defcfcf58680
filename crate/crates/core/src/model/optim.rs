//! AdamW, cosine annealing and global-norm clipping.

use crate::gradcore::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// One AdamW update with decoupled weight decay and bias correction.
///
/// `grads` must line up with the store's parameters.
pub fn adamw_step(params: &mut ParamStore, grads: &[Tensor], lr: f64, cfg: &AdamConfig) {
    assert_eq!(grads.len(), params.len(), "one gradient per parameter");
    let t = params.advance_step() as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (p, g) in params.params_mut().iter_mut().zip(grads) {
        assert_eq!(p.value.shape(), g.shape(), "gradient shape for {}", p.name);
        let (r, c) = g.shape();
        let m = p.first_moment.get_or_insert_with(|| Tensor::zeros(r, c));
        let v = p.second_moment.get_or_insert_with(|| Tensor::zeros(r, c));
        let decay = 1.0 - lr * cfg.weight_decay;
        for (((w, m), v), &g) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *w *= decay;
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        }
    }
}

/// `lr_max * (1 + cos(pi * step / total)) / 2`, held at 0 past `total`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return if step == 0 { lr_max } else { 0.0 };
    }
    lr_max * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos())
}

/// Rescales every gradient so the global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sum_squares).sum::<f64>().sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }
    norm
}
