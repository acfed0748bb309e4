use crate::autodiff::{Parameters, Tape, Tensor, Var};
use crate::error::Result;
use crate::rng::Rng;
use crate::Token;

use super::backbone::Backbone;
use super::batch::TokenBatch;
use super::config::TransformerConfig;
use super::head::RewardHead;
use super::tokens;

/// Autoregressive token model with an LM head tied to the token embedding,
/// plus a scalar value head used by PPO.
#[derive(Debug, Clone)]
pub struct PolicyModel {
    pub backbone: Backbone,
    pub value_head: RewardHead,
}

pub struct PolicyOutput {
    /// `(batch·seq)×vocab` next-token log-probabilities.
    pub logprobs: Var,
    /// `(batch·seq)×d_model` final hidden states.
    pub hidden: Var,
}

impl PolicyModel {
    pub fn new(config: TransformerConfig, rng: &mut Rng) -> Result<Self> {
        let backbone = Backbone::new(config, rng)?;
        let value_head = RewardHead::new(config.d_model, rng);
        Ok(PolicyModel { backbone, value_head })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.backbone.config
    }

    /// Log-probabilities of `softmax(logits / temperature)` at every position.
    /// PAD and SEP are never emitted: their logits are pushed to -1e9.
    pub fn forward(&self, tape: &mut Tape, batch: &TokenBatch, temperature: f32) -> Result<PolicyOutput> {
        let hidden = self.backbone.forward(tape, batch, None)?;
        let emb = tape.param(&self.backbone.tok_emb);
        let logits = tape.matmul_t(hidden, emb, false, true)?;
        let logits = if temperature != 1.0 {
            tape.scale(logits, 1.0 / temperature)
        } else {
            logits
        };
        let mut mask = vec![0.0; self.config().vocab_size];
        mask[tokens::PAD as usize] = -1e9;
        mask[tokens::SEP as usize] = -1e9;
        let mask = tape.constant(vec![mask.len()], mask)?;
        let logits = tape.add_row(logits, mask)?;
        let logprobs = tape.log_softmax(logits);
        Ok(PolicyOutput { logprobs, hidden })
    }

    /// Next-token log-probability vector after each sequence's last token.
    pub fn next_token_logprobs<S: AsRef<[Token]>>(&self, seqs: &[S], temperature: f32) -> Result<Vec<Vec<f32>>> {
        let cfg = self.config();
        let batch = TokenBatch::new(seqs, cfg.max_seq_len, cfg.vocab_size)?;
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, &batch, temperature)?;
        let v = cfg.vocab_size;
        let lp = tape.value(out.logprobs);
        Ok(batch
            .last_rows()
            .into_iter()
            .map(|r| lp[r * v..(r + 1) * v].to_vec())
            .collect())
    }
}

impl Parameters for PolicyModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.backbone.visit(f);
        f("value_head.weight", &self.value_head.weight);
        f("value_head.bias", &self.value_head.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.backbone.visit_mut(f);
        f("value_head.weight", &mut self.value_head.weight);
        f("value_head.bias", &mut self.value_head.bias);
    }
}
