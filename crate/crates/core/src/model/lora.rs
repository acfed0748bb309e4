//! Low-rank adapters for the attention projections.
//!
//! An adapter on a frozen `d1×d2` weight `W` contributes
//! `ΔW = (α/r)·A1·A2` with `A1: d1×r` and `A2: r×d2`. `A2` starts at zero,
//! so a freshly attached adapter leaves the model function unchanged.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameters, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

use super::config::TransformerConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Proj {
    Q,
    K,
    V,
    O,
}

impl Proj {
    pub const ALL: [Proj; 4] = [Proj::Q, Proj::K, Proj::V, Proj::O];

    pub fn name(self) -> &'static str {
        match self {
            Proj::Q => "wq",
            Proj::K => "wk",
            Proj::V => "wv",
            Proj::O => "wo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LoraTarget {
    pub layer: usize,
    pub proj: Proj,
}

impl std::fmt::Display for LoraTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "layers.{}.{}", self.layer, self.proj.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f32,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { rank: 4, alpha: 8.0 }
    }
}

#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub target: LoraTarget,
    pub a1: Tensor,
    pub a2: Tensor,
    pub rank: usize,
    pub alpha: f32,
}

impl LoraAdapter {
    pub fn new(target: LoraTarget, d1: usize, d2: usize, cfg: LoraConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.rank == 0 || cfg.rank >= d1.min(d2) {
            return Err(Error::InvalidConfig(format!(
                "LoRA rank {} must satisfy 0 < r < min({d1}, {d2})",
                cfg.rank
            )));
        }
        Ok(LoraAdapter {
            target,
            a1: Tensor::randn(&[d1, cfg.rank], 1.0 / (d1 as f32).sqrt(), rng).with_grad(),
            a2: Tensor::zeros(&[cfg.rank, d2]).with_grad(),
            rank: cfg.rank,
            alpha: cfg.alpha,
        })
    }

    pub fn scaling(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.a1.shape()[0], self.a2.shape()[1])
    }

    /// Materialized `ΔW = (α/r)·A1·A2`.
    pub fn delta(&self) -> Vec<f32> {
        let (d1, d2) = self.dims();
        let mut out = vec![0.0; d1 * d2];
        crate::autodiff::gemm(
            d1,
            self.rank,
            d2,
            self.a1.data(),
            false,
            self.a2.data(),
            false,
            0.0,
            &mut out,
        );
        let s = self.scaling();
        out.iter_mut().for_each(|v| *v *= s);
        out
    }

    pub fn check_against(&self, w: &Tensor) -> Result<()> {
        let (d1, d2) = self.dims();
        let consistent = self.a1.shape() == [d1, self.rank] && self.a2.shape() == [self.rank, d2];
        if !consistent || w.shape() != [d1, d2] {
            return Err(Error::AdapterShape {
                target: self.target.to_string(),
                got: vec![d1, d2],
                expected: w.shape().to_vec(),
            });
        }
        Ok(())
    }
}

/// Adapters for one ensemble member.
#[derive(Debug, Clone, Default)]
pub struct LoraSet {
    pub adapters: Vec<LoraAdapter>,
}

impl LoraSet {
    /// One adapter on each of the four attention projections of every layer.
    pub fn for_attention(config: &TransformerConfig, cfg: LoraConfig, rng: &mut Rng) -> Result<Self> {
        let d = config.d_model;
        let mut adapters = Vec::new();
        for layer in 0..config.n_layers {
            for proj in Proj::ALL {
                adapters.push(LoraAdapter::new(LoraTarget { layer, proj }, d, d, cfg, rng)?);
            }
        }
        Ok(LoraSet { adapters })
    }

    pub fn get(&self, target: LoraTarget) -> Option<&LoraAdapter> {
        self.adapters.iter().find(|a| a.target == target)
    }

    /// Closed-form `|A| = Σ r·(d1 + d2)` over adapted matrices.
    pub fn closed_form_count(config: &TransformerConfig, cfg: LoraConfig) -> usize {
        config.n_layers * Proj::ALL.len() * cfg.rank * (2 * config.d_model)
    }
}

impl Parameters for LoraSet {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for a in &self.adapters {
            f(&format!("adapter.{}.a1", a.target), &a.a1);
            f(&format!("adapter.{}.a2", a.target), &a.a2);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for a in &mut self.adapters {
            let t = a.target;
            f(&format!("adapter.{t}.a1"), &mut a.a1);
            f(&format!("adapter.{t}.a2"), &mut a.a2);
        }
    }
}
