//! AdamW with decoupled weight decay and warmup schedules.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameters, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Constant,
}

/// Linear warmup followed by cosine decay to zero, or a constant rate.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub base_lr: f32,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub kind: ScheduleKind,
}

impl LrSchedule {
    pub fn from_ratio(base_lr: f32, warmup_ratio: f32, total_steps: usize, kind: ScheduleKind) -> Self {
        LrSchedule {
            base_lr,
            warmup_steps: (warmup_ratio * total_steps as f32).ceil() as usize,
            total_steps,
            kind,
        }
    }

    pub fn lr(&self, step: usize) -> f32 {
        if step < self.warmup_steps {
            return self.base_lr * step as f32 / self.warmup_steps.max(1) as f32;
        }
        match self.kind {
            ScheduleKind::Constant => self.base_lr,
            ScheduleKind::Cosine => {
                let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
                let progress = ((step - self.warmup_steps) as f32 / span as f32).min(1.0);
                self.base_lr * 0.5 * (1.0 + (std::f32::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub max_grad_norm: Option<f32>,
    step: i32,
    state: HashMap<TensorId, (Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new(weight_decay: f32, max_grad_norm: Option<f32>) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            max_grad_norm,
            step: 0,
            state: HashMap::new(),
        }
    }

    /// Global L2 norm of the gradients of all trainable tensors.
    pub fn grad_norm(params: &mut [&mut dyn Parameters]) -> f32 {
        let mut sq = 0.0f64;
        for p in params.iter_mut() {
            p.visit(&mut |_, t| {
                if let (true, Some(g)) = (t.requires_grad(), t.grad()) {
                    sq += g.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>();
                }
            });
        }
        sq.sqrt() as f32
    }

    /// One update on every trainable tensor holding a gradient, then zeroes
    /// the gradients. Returns the pre-clipping gradient norm.
    pub fn step(&mut self, params: &mut [&mut dyn Parameters], lr: f32) -> f32 {
        let norm = Self::grad_norm(params);
        let clip = match self.max_grad_norm {
            Some(m) if norm > m && norm.is_finite() => m / norm,
            _ => 1.0,
        };
        self.step += 1;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let bc1 = 1.0 - b1.powi(self.step);
        let bc2 = 1.0 - b2.powi(self.step);
        let state = &mut self.state;
        for p in params.iter_mut() {
            p.visit_mut(&mut |_, t| {
                if !t.requires_grad() {
                    return;
                }
                let Some(g) = t.take_grad() else { return };
                let n = g.len();
                let (m, v) = state.entry(t.id()).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
                for i in 0..n {
                    let gi = g[i] * clip;
                    m[i] = b1 * m[i] + (1.0 - b1) * gi;
                    v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                }
                if lr != 0.0 {
                    let data = t.data_mut();
                    for i in 0..n {
                        let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                        data[i] -= lr * (update + wd * data[i]);
                    }
                }
            });
        }
        norm
    }
}
