//! AdamW with decoupled weight decay and a warmup/linear-decay schedule.

use serde::{Deserialize, Serialize};

use crate::params::{Gradients, ParamMask, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.1 }
    }
}

struct Slot {
    m: Matrix,
    v: Matrix,
    t: i32,
}

/// Moments are kept per tensor and only advanced on steps where the tensor
/// received a gradient.
pub struct AdamW {
    config: AdamConfig,
    mask: ParamMask,
    decay: Vec<bool>,
    slots: Vec<Option<Slot>>,
}

/// Vectors (biases, layer-norm gains and offsets, the deviation embedding)
/// are not decayed.
pub fn decays(shape: (usize, usize)) -> bool {
    shape.0 > 1
}

impl AdamW {
    pub fn new(store: &ParamStore, mask: ParamMask, config: AdamConfig) -> Self {
        let decay = store.iter().map(|(_, _, m)| decays(m.shape())).collect();
        let slots = (0..store.len()).map(|_| None).collect();
        Self { config, mask, decay, slots }
    }

    pub fn mask(&self) -> &ParamMask {
        &self.mask
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        let c = self.config;
        for (id, g) in grads.iter() {
            if !self.mask.contains(id) {
                continue;
            }
            let p = store.get_mut(id);
            let slot = self.slots[id.index()].get_or_insert_with(|| Slot {
                m: Matrix::zeros(g.rows(), g.cols()),
                v: Matrix::zeros(g.rows(), g.cols()),
                t: 0,
            });
            slot.t += 1;
            let bc1 = 1.0 - c.beta1.powi(slot.t);
            let bc2 = 1.0 - c.beta2.powi(slot.t);
            let wd = if self.decay[id.index()] { c.weight_decay } else { 0.0 };
            let (m, v) = (slot.m.data_mut(), slot.v.data_mut());
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= lr * wd * *x;
                *x -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

/// Linear warmup to `peak` over `warmup_steps`, then linear decay to 0 at
/// `total_steps`. Update `k` (0-based) uses `lr_at(k)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LinearSchedule {
    pub fn new(peak: f64, warmup_steps: usize, total_steps: usize) -> Self {
        Self { peak, warmup_steps: warmup_steps.min(total_steps), total_steps }
    }

    /// The piecewise-linear rate at fractional step `s`.
    pub fn lr_at_f(&self, s: f64) -> f64 {
        let (w, t) = (self.warmup_steps as f64, self.total_steps as f64);
        if s < w {
            self.peak * s / w
        } else if t > w {
            (self.peak * (t - s) / (t - w)).max(0.0)
        } else {
            0.0
        }
    }

    pub fn lr_at(&self, k: usize) -> f64 {
        self.lr_at_f(k as f64)
    }
}
