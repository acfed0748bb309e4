//! Small transformer used as reward backbone and as policy, low-rank
//! adapters, and the checkpoint format.

mod backbone;
mod batch;
pub mod checkpoint;
mod config;
mod head;
mod lora;
mod policy;
pub mod tokens;

pub use backbone::{Backbone, Layer};
pub use batch::TokenBatch;
pub use config::TransformerConfig;
pub use head::RewardHead;
pub use lora::{LoraAdapter, LoraConfig, LoraSet, LoraTarget, Proj};
pub use policy::{PolicyModel, PolicyOutput};

use crate::autodiff::{Parameters, Tape, Var};
use crate::error::Result;
use crate::Token;

/// Hidden state of each sequence's last token, `batch×d_model`.
pub fn last_hidden(
    tape: &mut Tape,
    backbone: &Backbone,
    adapters: Option<&LoraSet>,
    batch: &TokenBatch,
) -> Result<Var> {
    let hidden = backbone.forward(tape, batch, adapters)?;
    tape.gather_rows(hidden, &batch.last_rows())
}

/// Scalar reward for one `prompt ++ SEP ++ response` token sequence, read
/// by the head from the last token's final hidden state.
pub fn reward_forward(
    backbone: &Backbone,
    head: &RewardHead,
    adapters: Option<&LoraSet>,
    tokens: &[Token],
) -> Result<f32> {
    Ok(reward_batch(backbone, head, adapters, &[tokens])?[0])
}

/// Batched inference form of [`reward_forward`].
pub fn reward_batch<S: AsRef<[Token]>>(
    backbone: &Backbone,
    head: &RewardHead,
    adapters: Option<&LoraSet>,
    seqs: &[S],
) -> Result<Vec<f32>> {
    if seqs.is_empty() {
        return Ok(Vec::new());
    }
    let cfg = &backbone.config;
    let batch = TokenBatch::new(seqs, cfg.max_seq_len, cfg.vocab_size)?;
    let mut tape = Tape::inference();
    let h = last_hidden(&mut tape, backbone, adapters, &batch)?;
    let r = head.forward(&mut tape, h)?;
    Ok(tape.value(r).to_vec())
}

/// Model parts that can be frozen independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Backbone,
    Head,
    Adapters,
}

/// Mutable view of one reward model's parts.
pub struct RewardParts<'a> {
    pub backbone: &'a mut Backbone,
    pub head: &'a mut RewardHead,
    pub adapters: Option<&'a mut LoraSet>,
}

/// Marks every part listed in `frozen` as not requiring gradients and all
/// other parts as trainable.
pub fn set_trainable(parts: &mut RewardParts<'_>, frozen: &[Part]) {
    parts.backbone.set_trainable(!frozen.contains(&Part::Backbone));
    parts.head.set_trainable(!frozen.contains(&Part::Head));
    if let Some(a) = parts.adapters.as_deref_mut() {
        a.set_trainable(!frozen.contains(&Part::Adapters));
    }
}
