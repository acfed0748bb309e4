use std::collections::HashSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::gold::GoldReward;
use crate::autodiff::{Parameters, Tape};
use crate::error::{Error, Result};
use crate::model::{tokens, PolicyModel, TokenBatch, TransformerConfig};
use crate::optim::AdamW;
use crate::preftrain::PreferencePair;
use crate::rl::{sample_many, DecodeConfig};
use crate::rng::{derive_indexed, indexed_stream, stream, Rng};
use crate::Token;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for PromptSpec {
    fn default() -> Self {
        PromptSpec { min_len: 2, max_len: 4 }
    }
}

/// Draws a prompt of uniformly random length and content tokens.
pub fn random_prompt(spec: &PromptSpec, vocab: usize, rng: &mut Rng) -> Vec<Token> {
    let len = rng.random_range(spec.min_len..=spec.max_len);
    (0..len)
        .map(|_| rng.random_range(tokens::FIRST_CONTENT..vocab as Token))
        .collect()
}

/// `n` prompts from the stream `(seed, label)`.
pub fn prompt_set(spec: &PromptSpec, vocab: usize, n: usize, seed: u64, label: &str) -> Vec<Vec<Token>> {
    let mut rng = stream(seed, label);
    (0..n).map(|_| random_prompt(spec, vocab, &mut rng)).collect()
}

/// Supervised fine-tuning recipe for the reference policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftSpec {
    pub demos: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Probability that a demonstration token is a target token.
    pub target_rate: f64,
    /// Probability that a demonstration is cut off without EOS.
    pub truncate_rate: f64,
}

impl Default for SftSpec {
    fn default() -> Self {
        SftSpec {
            demos: 3000,
            epochs: 2,
            batch_size: 32,
            lr: 3e-3,
            target_rate: 0.15,
            truncate_rate: 0.15,
        }
    }
}

/// A demonstration: a few content tokens, some of them prompt targets, then
/// EOS (or a cut-off at `max_new` tokens).
fn demonstration(gold: &GoldReward, sft: &SftSpec, max_new: usize, rng: &mut Rng) -> Vec<Token> {
    let vocab = gold.spec.vocab_size as Token;
    if rng.random_bool(sft.truncate_rate) {
        return (0..max_new)
            .map(|_| rng.random_range(tokens::FIRST_CONTENT..vocab))
            .collect();
    }
    let len = rng.random_range(1..max_new);
    let targets = gold.targets();
    let mut out: Vec<Token> = (0..len)
        .map(|_| {
            if rng.random_bool(sft.target_rate) {
                targets[rng.random_range(0..targets.len())]
            } else {
                rng.random_range(tokens::FIRST_CONTENT..vocab)
            }
        })
        .collect();
    out.push(tokens::EOS);
    out
}

/// Trains the reference ("SFT") policy on demonstrations; deterministic in
/// `seed`.
pub fn train_reference_policy(
    config: TransformerConfig,
    gold: &GoldReward,
    prompts: &PromptSpec,
    sft: &SftSpec,
    max_new: usize,
    seed: u64,
) -> Result<PolicyModel> {
    let mut policy = PolicyModel::new(config, &mut stream(seed, "reference-init"))?;
    let mut rng = stream(seed, "demos");
    let demos: Vec<(Vec<Token>, Vec<Token>)> = (0..sft.demos)
        .map(|_| {
            let p = random_prompt(prompts, config.vocab_size, &mut rng);
            let r = demonstration(gold, sft, max_new, &mut rng);
            (p, r)
        })
        .collect();
    let mut opt = AdamW::new(0.0, Some(1.0));
    for epoch in 0..sft.epochs {
        let mut order: Vec<usize> = (0..demos.len()).collect();
        rand::seq::SliceRandom::shuffle(
            order.as_mut_slice(),
            &mut indexed_stream(seed, "sft-order", epoch as u64),
        );
        for idx in order.chunks(sft.batch_size) {
            let mut tape = Tape::new();
            let loss = sft_loss(&mut tape, &policy, idx.iter().map(|&i| &demos[i]))?;
            if !tape.item(loss).is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: 0,
                    lr: sft.lr,
                    grad_norm: f32::NAN,
                });
            }
            tape.backward(loss)?;
            policy.collect_grads(&tape);
            opt.step(&mut [&mut policy as &mut dyn Parameters], sft.lr);
        }
    }
    Ok(policy)
}

/// Mean next-token NLL over response tokens.
fn sft_loss<'a>(
    tape: &mut Tape,
    policy: &PolicyModel,
    demos: impl Iterator<Item = &'a (Vec<Token>, Vec<Token>)>,
) -> Result<crate::autodiff::Var> {
    let demos: Vec<_> = demos.collect();
    let seqs: Vec<Vec<Token>> = demos.iter().map(|(p, r)| tokens::join(p, r)).collect();
    let cfg = policy.config();
    let batch = TokenBatch::new(&seqs, cfg.max_seq_len, cfg.vocab_size)?;
    let out = policy.forward(tape, &batch, 1.0)?;
    let t = batch.seq();
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    for (b, (p, r)) in demos.iter().enumerate() {
        for (i, &tok) in r.iter().enumerate() {
            rows.push(b * t + p.len() + i);
            cols.push(tok as usize);
        }
    }
    let g = tape.gather_rows(out.logprobs, &rows)?;
    let lp = tape.pick(g, &cols)?;
    let m = tape.mean(lp);
    Ok(tape.neg(m))
}

/// Synthetic preference data recipe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthDatasetSpec {
    /// Training pairs, split into phase 1 and phase 2.
    pub n_pairs: usize,
    /// Fraction of training pairs in phase 1.
    pub phase1_frac: f32,
    /// Additional held-out pairs.
    pub n_heldout: usize,
    /// Probability that a label is flipped.
    pub noise: f32,
    pub prompts: PromptSpec,
    pub decode: DecodeConfig,
    pub seed: u64,
}

impl Default for SynthDatasetSpec {
    fn default() -> Self {
        SynthDatasetSpec {
            n_pairs: 8000,
            phase1_frac: 0.6,
            n_heldout: 1000,
            noise: 0.15,
            prompts: PromptSpec::default(),
            decode: DecodeConfig::best_of_n(),
            seed: 0,
        }
    }
}

impl SynthDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.noise) {
            return Err(Error::InvalidConfig(format!(
                "label noise must be in [0, 0.5), got {}",
                self.noise
            )));
        }
        if !(0.0..=1.0).contains(&self.phase1_frac) {
            return Err(Error::InvalidConfig("phase-1 fraction must be in [0, 1]".into()));
        }
        self.decode.validate()
    }
}

#[derive(Debug, Clone, Default)]
pub struct PreferenceSplits {
    pub phase1: Vec<PreferencePair>,
    pub phase2: Vec<PreferencePair>,
    pub heldout: Vec<PreferencePair>,
    /// Number of generated labels that were flipped.
    pub flipped: usize,
}

impl PreferenceSplits {
    /// Phase 1 followed by phase 2.
    pub fn train(&self) -> Vec<PreferencePair> {
        self.phase1.iter().chain(&self.phase2).cloned().collect()
    }
}

/// Unordered identity of a pair, so the same comparison cannot land in two
/// splits with opposite labels.
fn pair_key(p: &PreferencePair) -> (Vec<Token>, Vec<Token>, Vec<Token>) {
    let (a, b) = if p.chosen <= p.rejected {
        (p.chosen.clone(), p.rejected.clone())
    } else {
        (p.rejected.clone(), p.chosen.clone())
    };
    (p.prompt.clone(), a, b)
}

/// Samples prompts and response pairs from `policy`, labels them with the
/// gold reward and flips each label with probability `noise`. Duplicate
/// comparisons and identical responses are redrawn.
pub fn generate_preferences(
    spec: &SynthDatasetSpec,
    gold: &GoldReward,
    policy: &PolicyModel,
) -> Result<PreferenceSplits> {
    spec.validate()?;
    let total = spec.n_pairs + spec.n_heldout;
    let vocab = policy.config().vocab_size;
    let decode = DecodeConfig {
        seed: spec.seed,
        ..spec.decode
    };
    let mut prompt_rng = stream(spec.seed, "pair-prompts");
    let mut noise_rng = stream(spec.seed, "label-noise");
    let mut seen = HashSet::new();
    let mut pairs = Vec::with_capacity(total);
    let mut flipped = 0;
    let mut round = 0u64;
    while pairs.len() < total {
        let want = (total - pairs.len()).max(16);
        let prompts: Vec<Vec<Token>> = (0..want)
            .map(|_| random_prompt(&spec.prompts, vocab, &mut prompt_rng))
            .collect();
        let doubled: Vec<&[Token]> = prompts.iter().flat_map(|p| [p.as_slice(), p.as_slice()]).collect();
        let keys: Vec<u64> = (0..doubled.len() as u64)
            .map(|i| derive_indexed(round, "pair-sample", i))
            .collect();
        let samples = sample_many(policy, &doubled, &keys, &decode)?;
        round += 1;
        for (p, two) in prompts.into_iter().zip(samples.chunks(2)) {
            if pairs.len() == total {
                break;
            }
            let (a, b) = (two[0].response.clone(), two[1].response.clone());
            if a == b {
                continue;
            }
            let (ga, gb) = (gold.score(&p, &a), gold.score(&p, &b));
            let (mut chosen, mut rejected) = if ga >= gb { (a, b) } else { (b, a) };
            let flip = noise_rng.random_bool(spec.noise as f64);
            if flip {
                std::mem::swap(&mut chosen, &mut rejected);
            }
            let pair = PreferencePair {
                prompt: p,
                chosen,
                rejected,
            };
            if seen.insert(pair_key(&pair)) {
                flipped += flip as usize;
                pairs.push(pair);
            }
        }
    }
    let heldout = pairs.split_off(spec.n_pairs);
    let n1 = (spec.phase1_frac * spec.n_pairs as f32).round() as usize;
    let phase2 = pairs.split_off(n1.min(pairs.len()));
    Ok(PreferenceSplits {
        phase1: pairs,
        phase2,
        heldout,
        flipped,
    })
}
