use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// One "Optimizer" block: AdamW with linear warm-up and cosine decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub batch_size: usize,
    pub max_lr: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl OptimizerConfig {
    /// Learning rate at a fractional epoch position.
    pub fn lr_at(&self, epoch_pos: f64) -> f64 {
        let warm = self.warmup_epochs as f64;
        if warm > 0.0 && epoch_pos < warm {
            return self.max_lr * (epoch_pos + 1e-12).min(warm) / warm;
        }
        let total = (self.epochs as f64 - warm).max(1e-12);
        let progress = ((epoch_pos - warm) / total).clamp(0.0, 1.0);
        self.min_lr + 0.5 * (self.max_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    grad_clip: Option<f64>,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: &OptimizerConfig) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: 1e-8,
            weight_decay: cfg.weight_decay,
            grad_clip: cfg.grad_clip,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient are left untouched
    /// (no decay either).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, &Tensor)], lr: f64) {
        self.step += 1;
        let scale = match self.grad_clip {
            Some(max_norm) => {
                let norm = grads.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt();
                if norm > max_norm {
                    max_norm / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for &(id, g) in grads {
            let i = id.0;
            let decay = if store.decays(id) { self.weight_decay } else { 0.0 };
            let p = store.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j] * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * p[j]);
            }
        }
    }
}
