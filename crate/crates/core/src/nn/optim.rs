//! AdamW with linear warm-up and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use super::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps over which the learning rate ramps linearly from `lr/warmup` to `lr`.
    pub warmup_steps: usize,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-5,
            warmup_steps: 0,
            clip: Some(0.25),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub step: usize,
    m: Vec<T>,
    v: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub lr: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig, n: usize) -> Self {
        Self {
            cfg,
            step: 0,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.cfg.warmup_steps {
            self.cfg.lr * (step + 1) as f64 / self.cfg.warmup_steps as f64
        } else {
            self.cfg.lr
        }
    }

    pub fn update(&mut self, params: &mut [T], grads: &mut [T]) -> StepInfo {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        let norm = grads.iter().map(|&g| g.f64() * g.f64()).sum::<f64>().sqrt();
        let mut clipped = false;
        if let Some(c) = self.cfg.clip {
            if norm > c {
                let s = T::c(c / norm);
                grads.iter_mut().for_each(|g| *g *= s);
                clipped = true;
            }
        }
        let lr = self.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = T::c(1.0 - b1.powi(t));
        let bc2 = T::c(1.0 - b2.powi(t));
        let (b1, b2) = (T::c(b1), T::c(b2));
        let (one, eps) = (T::one(), T::c(self.cfg.eps));
        let lr_t = T::c(lr);
        let decay = T::c(lr * self.cfg.weight_decay);
        for (((p, &g), m), v) in params.iter_mut().zip(grads.iter()).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p = *p - decay * *p - lr_t * mh / (vh.sqrt() + eps);
        }
        StepInfo {
            lr,
            grad_norm: norm,
            clipped,
        }
    }
}
