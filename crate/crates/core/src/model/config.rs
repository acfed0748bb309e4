use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub ffn_mult: usize,
}

impl Default for TransformerConfig {
    /// Desk-scale reward backbone.
    fn default() -> Self {
        TransformerConfig {
            vocab_size: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 64,
            ffn_mult: 4,
        }
    }
}

impl TransformerConfig {
    /// Smaller default used for the policy, which is sampled autoregressively
    /// many times per experiment.
    pub fn policy_default() -> Self {
        TransformerConfig {
            d_model: 32,
            ..TransformerConfig::default()
        }
    }

    pub fn d_ffn(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
            ("ffn_mult", self.ffn_mult),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= super::tokens::FIRST_CONTENT as usize {
            return Err(Error::InvalidConfig(
                "vocab_size must leave room for content tokens".into(),
            ));
        }
        Ok(())
    }

    /// Closed-form backbone parameter count.
    pub fn backbone_params(&self) -> usize {
        let d = self.d_model;
        let f = self.d_ffn();
        let embed = self.vocab_size * d + self.max_seq_len * d;
        let attn = 4 * (d * d + d);
        let ffn = d * f + f + f * d + d;
        let norms = 2 * 2 * d;
        embed + self.n_layers * (attn + ffn + norms) + 2 * d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_configs() {
        assert!(TransformerConfig::default().validate().is_ok());
        let bad = TransformerConfig {
            n_heads: 3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let zero = TransformerConfig {
            n_layers: 0,
            ..Default::default()
        };
        assert!(zero.validate().is_err());
    }
}
