//! Nucleus sampling, Best-of-n selection and PPO fine-tuning of a policy
//! against a (possibly ensembled) reward model.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameters, Tape, Var};
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::model::{tokens, PolicyModel, TokenBatch};
use crate::optim::{AdamW, LrSchedule, ScheduleKind};
use crate::rng::{derive_indexed, indexed_stream, Rng};
use crate::Token;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub temperature: f32,
    pub top_p: f32,
    pub max_new_tokens: usize,
    /// Argmax decoding (the zero-temperature limit).
    #[serde(default)]
    pub greedy: bool,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self::best_of_n()
    }
}

impl DecodeConfig {
    pub fn best_of_n() -> Self {
        DecodeConfig {
            temperature: 1.0,
            top_p: 0.9,
            max_new_tokens: 8,
            greedy: false,
            seed: 0,
        }
    }

    pub fn ppo() -> Self {
        DecodeConfig {
            temperature: 0.7,
            ..Self::best_of_n()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "top_p must be in (0, 1], got {}",
                self.top_p
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidConfig("max_new_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

/// Keeps the smallest set of most likely tokens whose total mass reaches
/// `top_p` (ties broken towards lower ids) and renormalizes.
pub fn nucleus(probs: &[f64], top_p: f32) -> Vec<f64> {
    if top_p >= 1.0 {
        let z: f64 = probs.iter().sum();
        return probs.iter().map(|p| p / z).collect();
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let total: f64 = probs.iter().sum();
    let target = top_p as f64 * total;
    let mut out = vec![0.0; probs.len()];
    let mut mass = 0.0;
    for &i in &order {
        out[i] = probs[i];
        mass += probs[i];
        if mass >= target - 1e-12 {
            break;
        }
    }
    out.iter_mut().for_each(|p| *p /= mass);
    out
}

/// Index of the first maximum; NaN scores never win.
pub fn argmax_first(scores: &[f32]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] || scores[best].is_nan() {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Generated tokens, ending in EOS when `finished`.
    pub response: Vec<Token>,
    /// Log-probability of each token under the temperature-scaled
    /// (untruncated) policy distribution.
    pub logprobs: Vec<f32>,
    pub finished: bool,
}

fn choose(logprobs: &[f32], cfg: &DecodeConfig, rng: &mut Rng) -> usize {
    if cfg.greedy {
        return argmax_first(logprobs);
    }
    let probs: Vec<f64> = logprobs.iter().map(|&l| (l as f64).exp()).collect();
    let p = nucleus(&probs, cfg.top_p);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.0 {
            acc += pi;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Sequences decoded per forward pass.
const DECODE_CHUNK: usize = 256;

/// Samples one response per prompt. Each sample draws from its own stream
/// keyed by `keys[i]`, so results do not depend on batching.
pub fn sample_many<P: AsRef<[Token]>>(
    policy: &PolicyModel,
    prompts: &[P],
    keys: &[u64],
    cfg: &DecodeConfig,
) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let max = policy.config().max_seq_len;
    let mut out = Vec::with_capacity(prompts.len());
    for (pc, kc) in prompts.chunks(DECODE_CHUNK).zip(keys.chunks(DECODE_CHUNK)) {
        let mut seqs: Vec<Vec<Token>> = Vec::with_capacity(pc.len());
        for p in pc {
            let p = p.as_ref();
            let len = p.len() + 1 + cfg.max_new_tokens;
            if len > max {
                return Err(Error::SequenceTooLong { len, max });
            }
            seqs.push(tokens::join(p, &[]));
        }
        let mut rngs: Vec<Rng> = kc.iter().map(|&k| indexed_stream(cfg.seed, "sample", k)).collect();
        let mut samples = vec![
            Sample {
                response: Vec::new(),
                logprobs: Vec::new(),
                finished: false,
            };
            pc.len()
        ];
        let mut active: Vec<usize> = (0..pc.len()).collect();
        for _ in 0..cfg.max_new_tokens {
            if active.is_empty() {
                break;
            }
            let batch: Vec<&[Token]> = active.iter().map(|&i| seqs[i].as_slice()).collect();
            let lps = policy.next_token_logprobs(&batch, cfg.temperature)?;
            for (&i, lp) in active.iter().zip(&lps) {
                let t = choose(lp, cfg, &mut rngs[i]);
                let s = &mut samples[i];
                s.response.push(t as Token);
                s.logprobs.push(lp[t]);
                seqs[i].push(t as Token);
                s.finished = t as Token == tokens::EOS;
            }
            active.retain(|&i| !samples[i].finished);
        }
        out.extend(samples);
    }
    Ok(out)
}

/// Samples a single response.
pub fn sample(policy: &PolicyModel, prompt: &[Token], cfg: &DecodeConfig, key: u64) -> Result<Sample> {
    Ok(sample_many(policy, &[prompt], &[key], cfg)?.remove(0))
}

/// Log-probabilities of each response token under `policy` at the given
/// temperature.
pub fn response_logprobs<P: AsRef<[Token]>, R: AsRef<[Token]>>(
    policy: &PolicyModel,
    prompts: &[P],
    responses: &[R],
    temperature: f32,
) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(prompts.len());
    for (pc, rc) in prompts.chunks(DECODE_CHUNK).zip(responses.chunks(DECODE_CHUNK)) {
        let layout = Layout::new(pc, rc, policy)?;
        let mut tape = Tape::inference();
        let o = policy.forward(&mut tape, &layout.batch, temperature)?;
        let lp = layout.token_logprobs(&mut tape, o.logprobs)?;
        out.extend(layout.split(tape.value(lp)));
    }
    Ok(out)
}

/// Scores (prompt, response) pairs.
pub trait RewardScorer {
    fn score(&self, prompts: &[&[Token]], responses: &[&[Token]]) -> Result<Vec<f32>>;
}

impl RewardScorer for Ensemble {
    fn score(&self, prompts: &[&[Token]], responses: &[&[Token]]) -> Result<Vec<f32>> {
        let seqs: Vec<Vec<Token>> = prompts.iter().zip(responses).map(|(p, r)| tokens::join(p, r)).collect();
        self.score_batch(&seqs)
    }
}

/// Adapts a plain function of one pair into a scorer.
pub struct FnScorer<F>(pub F);

impl<F: Fn(&[Token], &[Token]) -> f32> RewardScorer for FnScorer<F> {
    fn score(&self, prompts: &[&[Token]], responses: &[&[Token]]) -> Result<Vec<f32>> {
        Ok(prompts.iter().zip(responses).map(|(p, r)| (self.0)(p, r)).collect())
    }
}

/// Stream key of candidate `j` for prompt `p`; independent of n, so the
/// first m candidates of an n-draw equal an m-draw.
pub fn candidate_key(p: usize, j: usize) -> u64 {
    derive_indexed(p as u64, "candidate", j as u64)
}

/// Draws `n` candidates for every prompt.
pub fn draw_candidates<P: AsRef<[Token]>>(
    policy: &PolicyModel,
    prompts: &[P],
    n: usize,
    cfg: &DecodeConfig,
) -> Result<Vec<Vec<Sample>>> {
    if n == 0 {
        return Err(Error::InvalidConfig("best-of-n needs n >= 1".into()));
    }
    let flat_prompts: Vec<&[Token]> = prompts
        .iter()
        .flat_map(|p| std::iter::repeat_n(p.as_ref(), n))
        .collect();
    let keys: Vec<u64> = (0..prompts.len())
        .flat_map(|p| (0..n).map(move |j| candidate_key(p, j)))
        .collect();
    let flat = sample_many(policy, &flat_prompts, &keys, cfg)?;
    let mut it = flat.into_iter();
    Ok((0..prompts.len()).map(|_| it.by_ref().take(n).collect()).collect())
}

/// Scores every candidate of every prompt.
pub fn score_candidates<P: AsRef<[Token]>>(
    scorer: &dyn RewardScorer,
    prompts: &[P],
    candidates: &[Vec<Sample>],
) -> Result<Vec<Vec<f32>>> {
    let mut ps: Vec<&[Token]> = Vec::new();
    let mut rs: Vec<&[Token]> = Vec::new();
    for (p, cands) in prompts.iter().zip(candidates) {
        for c in cands {
            ps.push(p.as_ref());
            rs.push(&c.response);
        }
    }
    let flat = scorer.score(&ps, &rs)?;
    let mut it = flat.into_iter();
    Ok(candidates.iter().map(|c| it.by_ref().take(c.len()).collect()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub response: Vec<Token>,
    pub score: f32,
}

/// Best-of-n over the first `n` candidates of each prompt.
pub fn select_best(candidates: &[Vec<Sample>], scores: &[Vec<f32>], n: usize) -> Result<Vec<Selection>> {
    candidates
        .iter()
        .zip(scores)
        .map(|(c, s)| {
            if n == 0 || n > c.len() {
                return Err(Error::InvalidConfig(format!("best-of-{n} with {} candidates", c.len())));
            }
            let index = argmax_first(&s[..n]);
            Ok(Selection {
                index,
                response: c[index].response.clone(),
                score: s[index],
            })
        })
        .collect()
}

/// Draws `n` samples per prompt and keeps the one the scorer rates highest
/// (ties go to the lowest sample index).
pub fn best_of_n<P: AsRef<[Token]>>(
    policy: &PolicyModel,
    scorer: &dyn RewardScorer,
    prompts: &[P],
    n: usize,
    cfg: &DecodeConfig,
) -> Result<Vec<Selection>> {
    let cands = draw_candidates(policy, prompts, n, cfg)?;
    let scores = score_candidates(scorer, prompts, &cands)?;
    select_best(&cands, &scores, n)
}

/// Row layout of a batch of `prompt ++ SEP ++ response` sequences: which
/// rows of the `(batch·seq)` output predict each response token.
struct Layout {
    batch: TokenBatch,
    rows: Vec<usize>,
    targets: Vec<usize>,
    lens: Vec<usize>,
}

impl Layout {
    fn new<P: AsRef<[Token]>, R: AsRef<[Token]>>(prompts: &[P], responses: &[R], policy: &PolicyModel) -> Result<Self> {
        let seqs: Vec<Vec<Token>> = prompts
            .iter()
            .zip(responses)
            .map(|(p, r)| tokens::join(p.as_ref(), r.as_ref()))
            .collect();
        let cfg = policy.config();
        let batch = TokenBatch::new(&seqs, cfg.max_seq_len, cfg.vocab_size)?;
        let t = batch.seq();
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut lens = Vec::new();
        for (b, (p, r)) in prompts.iter().zip(responses).enumerate() {
            let (p, r) = (p.as_ref(), r.as_ref());
            for (i, &tok) in r.iter().enumerate() {
                // Position of SEP is p.len(); it predicts response token 0.
                rows.push(b * t + p.len() + i);
                targets.push(tok as usize);
            }
            lens.push(r.len());
        }
        Ok(Layout {
            batch,
            rows,
            targets,
            lens,
        })
    }

    fn token_logprobs(&self, tape: &mut Tape, logprobs: Var) -> Result<Var> {
        let g = tape.gather_rows(logprobs, &self.rows)?;
        tape.pick(g, &self.targets)
    }

    fn split(&self, flat: &[f32]) -> Vec<Vec<f32>> {
        let mut off = 0;
        self.lens
            .iter()
            .map(|&l| {
                let v = flat[off..off + l].to_vec();
                off += l;
                v
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub prompts_per_rollout: usize,
    pub samples_per_prompt: usize,
    pub step_batch: usize,
    pub lr: f32,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub kl_coef: f32,
    pub vf_coef: f32,
    pub clip: f32,
    pub total_steps: usize,
    /// Evaluate (and checkpoint) every this many steps.
    pub eval_every: usize,
    /// Training stops once the rollout KL to the reference exceeds this.
    pub kl_ceiling: f32,
    pub max_grad_norm: Option<f32>,
    pub decode: DecodeConfig,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            prompts_per_rollout: 16,
            samples_per_prompt: 4,
            step_batch: 32,
            lr: 1e-4,
            warmup_steps: 5,
            epochs: 2,
            kl_coef: 0.02,
            vf_coef: 0.1,
            clip: 0.2,
            total_steps: 300,
            eval_every: 100,
            kl_ceiling: 20.0,
            max_grad_norm: Some(1.0),
            decode: DecodeConfig::ppo(),
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn rollout_batch(&self) -> usize {
        self.prompts_per_rollout * self.samples_per_prompt
    }

    pub fn validate(&self) -> Result<()> {
        self.decode.validate()?;
        if !(self.kl_coef >= 0.0) {
            return Err(Error::InvalidConfig("kl coefficient must be >= 0".into()));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "clip ratio must be in (0, 1), got {}",
                self.clip
            )));
        }
        if self.rollout_batch() == 0 || self.step_batch == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig(
                "rollout batch, step batch and epochs must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// PPO surrogate for one token: `min(ρA, clip(ρ, 1-ε, 1+ε)A)`.
pub fn clipped_surrogate(ratio: f32, advantage: f32, clip: f32) -> f32 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

/// Rollouts with everything the update needs.
#[derive(Debug, Clone)]
pub struct TrajectoryBatch {
    pub prompts: Vec<Vec<Token>>,
    pub responses: Vec<Vec<Token>>,
    pub old_logprobs: Vec<Vec<f32>>,
    pub ref_logprobs: Vec<Vec<f32>>,
    pub rewards: Vec<f32>,
    pub values: Vec<Vec<f32>>,
    pub returns: Vec<Vec<f32>>,
    pub advantages: Vec<Vec<f32>>,
}

impl TrajectoryBatch {
    /// Mean over sequences of the summed per-token log-ratio to the
    /// reference.
    pub fn kl_to_ref(&self) -> f32 {
        mean_seq_kl(&self.old_logprobs, &self.ref_logprobs)
    }
}

fn mean_seq_kl(lp: &[Vec<f32>], ref_lp: &[Vec<f32>]) -> f32 {
    let total: f64 = lp
        .iter()
        .zip(ref_lp)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) as f64).sum::<f64>())
        .sum();
    (total / lp.len().max(1) as f64) as f32
}

/// KL-shaped returns and group-baselined advantages.
///
/// Each token earns `-kl_coef·(logπ - logπ_ref)`, the final token also the
/// sequence reward; returns are undiscounted reward-to-go. The baseline is
/// the mean full-sequence return over the responses sharing a prompt
/// (`group` consecutive entries).
pub fn shape_rewards(
    old_lp: &[Vec<f32>],
    ref_lp: &[Vec<f32>],
    rewards: &[f32],
    kl_coef: f32,
    group: usize,
) -> (Vec<Vec<f32>>, Vec<Vec<f32>>) {
    let returns: Vec<Vec<f32>> = old_lp
        .iter()
        .zip(ref_lp)
        .zip(rewards)
        .map(|((o, r), &reward)| {
            let n = o.len();
            let mut g = vec![0.0f32; n];
            let mut acc = 0.0f32;
            for t in (0..n).rev() {
                let mut step = -kl_coef * (o[t] - r[t]);
                if t + 1 == n {
                    step += reward;
                }
                acc += step;
                g[t] = acc;
            }
            g
        })
        .collect();
    let group = group.max(1);
    let advantages = returns
        .chunks(group)
        .flat_map(|grp| {
            let base = grp.iter().map(|g| g.first().copied().unwrap_or(0.0)).sum::<f32>() / grp.len() as f32;
            grp.iter().map(move |g| g.iter().map(|x| x - base).collect::<Vec<_>>())
        })
        .collect();
    (returns, advantages)
}

/// Inputs of a PPO run besides the trained policy.
pub struct PpoEnv<'a> {
    pub reference: &'a PolicyModel,
    pub reward: &'a dyn RewardScorer,
    /// Ground-truth scorer for monitoring only; never used for updates.
    pub gold: Option<&'a dyn RewardScorer>,
    pub train_prompts: &'a [Vec<Token>],
    pub eval_prompts: &'a [Vec<Token>],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PpoStep {
    pub step: usize,
    pub proxy_reward: f32,
    pub gold_reward: Option<f32>,
    pub kl_to_ref: f32,
    pub value_loss: f32,
}

/// Evaluation of the policy on the held-out prompts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PpoCheckpoint {
    pub step: usize,
    pub proxy_reward: f32,
    pub gold_reward: Option<f32>,
    pub kl_to_ref: f32,
}

#[derive(Debug, Clone, Default)]
pub struct PpoReport {
    pub steps: Vec<PpoStep>,
    pub checkpoints: Vec<PpoCheckpoint>,
    /// Step at which the KL ceiling stopped training.
    pub early_stop: Option<usize>,
}

impl PpoReport {
    /// `step,proxy_reward,gold_reward,kl_to_ref,value_loss`.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "proxy_reward", "gold_reward", "kl_to_ref", "value_loss"])?;
        for s in &self.steps {
            w.write_record([
                s.step.to_string(),
                s.proxy_reward.to_string(),
                s.gold_reward.map(|g| g.to_string()).unwrap_or_default(),
                s.kl_to_ref.to_string(),
                s.value_loss.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn mean(v: &[f32]) -> f32 {
    (v.iter().map(|&x| x as f64).sum::<f64>() / v.len().max(1) as f64) as f32
}

fn refs(v: &[Vec<Token>]) -> Vec<&[Token]> {
    v.iter().map(Vec::as_slice).collect()
}

/// Scores the policy on the eval prompts with one sample each, drawn from
/// streams that do not depend on the step.
pub fn evaluate_policy(
    policy: &PolicyModel,
    env: &PpoEnv<'_>,
    decode: &DecodeConfig,
    step: usize,
) -> Result<PpoCheckpoint> {
    let keys: Vec<u64> = (0..env.eval_prompts.len())
        .map(|i| derive_indexed(i as u64, "eval", 0))
        .collect();
    let samples = sample_many(policy, env.eval_prompts, &keys, decode)?;
    let responses: Vec<Vec<Token>> = samples.into_iter().map(|s| s.response).collect();
    let ps = refs(env.eval_prompts);
    let rs = refs(&responses);
    let proxy = mean(&env.reward.score(&ps, &rs)?);
    let gold = env.gold.map(|g| g.score(&ps, &rs)).transpose()?.map(|g| mean(&g));
    let lp = response_logprobs(policy, env.eval_prompts, &responses, decode.temperature)?;
    let ref_lp = response_logprobs(env.reference, env.eval_prompts, &responses, decode.temperature)?;
    Ok(PpoCheckpoint {
        step,
        proxy_reward: proxy,
        gold_reward: gold,
        kl_to_ref: mean_seq_kl(&lp, &ref_lp),
    })
}

/// Collects one rollout batch with the current policy.
fn rollout(
    policy: &PolicyModel,
    env: &PpoEnv<'_>,
    cfg: &PpoConfig,
    step: usize,
) -> Result<(TrajectoryBatch, Option<f32>)> {
    let mut rng = indexed_stream(cfg.seed, "ppo-prompts", step as u64);
    let picks: Vec<&Vec<Token>> = env
        .train_prompts
        .choose_multiple(&mut rng, cfg.prompts_per_rollout)
        .collect();
    let prompts: Vec<Vec<Token>> = picks
        .iter()
        .flat_map(|p| std::iter::repeat_n((*p).clone(), cfg.samples_per_prompt))
        .collect();
    let keys: Vec<u64> = (0..prompts.len())
        .map(|i| derive_indexed(step as u64, "rollout", i as u64))
        .collect();
    let decode = DecodeConfig {
        seed: cfg.seed,
        ..cfg.decode
    };
    let samples = sample_many(policy, &prompts, &keys, &decode)?;
    let responses: Vec<Vec<Token>> = samples.into_iter().map(|s| s.response).collect();
    let t = cfg.decode.temperature;
    let old_logprobs = response_logprobs(policy, &prompts, &responses, t)?;
    let ref_logprobs = response_logprobs(env.reference, &prompts, &responses, t)?;
    let (ps, rs) = (refs(&prompts), refs(&responses));
    let rewards = env.reward.score(&ps, &rs)?;
    let gold = env.gold.map(|g| g.score(&ps, &rs)).transpose()?.map(|g| mean(&g));
    let (returns, advantages) = shape_rewards(
        &old_logprobs,
        &ref_logprobs,
        &rewards,
        cfg.kl_coef,
        cfg.samples_per_prompt,
    );
    let values = returns.iter().map(|r| vec![0.0; r.len()]).collect();
    Ok((
        TrajectoryBatch {
            prompts,
            responses,
            old_logprobs,
            ref_logprobs,
            rewards,
            values,
            returns,
            advantages,
        },
        gold,
    ))
}

/// Clipped-surrogate plus value loss on a minibatch; returns the loss and
/// the value-loss term.
fn ppo_loss(
    tape: &mut Tape,
    policy: &PolicyModel,
    traj: &TrajectoryBatch,
    idx: &[usize],
    cfg: &PpoConfig,
) -> Result<(Var, Var)> {
    let prompts: Vec<&[Token]> = idx.iter().map(|&i| traj.prompts[i].as_slice()).collect();
    let responses: Vec<&[Token]> = idx.iter().map(|&i| traj.responses[i].as_slice()).collect();
    let layout = Layout::new(&prompts, &responses, policy)?;
    let out = policy.forward(tape, &layout.batch, cfg.decode.temperature)?;
    let lp = layout.token_logprobs(tape, out.logprobs)?;
    let flat = |v: &[Vec<f32>]| -> Vec<f32> { idx.iter().flat_map(|&i| v[i].iter().copied()).collect() };
    let n = layout.rows.len();
    let old = tape.constant(vec![n], flat(&traj.old_logprobs))?;
    let adv = tape.constant(vec![n], flat(&traj.advantages))?;
    let ret = tape.constant(vec![n], flat(&traj.returns))?;

    let diff = tape.sub(lp, old)?;
    let ratio = tape.exp(diff);
    let s1 = tape.mul(ratio, adv)?;
    let clipped = tape.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
    let s2 = tape.mul(clipped, adv)?;
    let surr = tape.minimum(s1, s2)?;
    let surr = tape.mean(surr);
    let pg = tape.neg(surr);

    let h = tape.gather_rows(out.hidden, &layout.rows)?;
    let v = policy.value_head.forward(tape, h)?;
    let err = tape.sub(v, ret)?;
    let sq = tape.square(err);
    let vl = tape.mean(sq);
    let weighted = tape.scale(vl, cfg.vf_coef);
    Ok((tape.add(pg, weighted)?, vl))
}

/// PPO against a frozen reward, with a per-token KL penalty to a frozen
/// reference policy.
pub fn ppo_train(policy: &mut PolicyModel, env: &PpoEnv<'_>, cfg: &PpoConfig) -> Result<PpoReport> {
    ppo_train_with(policy, env, cfg, &mut |_, _| Ok(()))
}

/// As [`ppo_train`], calling `on_checkpoint` after each evaluation.
pub fn ppo_train_with(
    policy: &mut PolicyModel,
    env: &PpoEnv<'_>,
    cfg: &PpoConfig,
    on_checkpoint: &mut dyn FnMut(&PpoCheckpoint, &PolicyModel) -> Result<()>,
) -> Result<PpoReport> {
    cfg.validate()?;
    if env.train_prompts.is_empty() {
        return Err(Error::EmptyData("ppo prompts"));
    }
    let sched = LrSchedule {
        base_lr: cfg.lr,
        warmup_steps: cfg.warmup_steps,
        total_steps: cfg.total_steps,
        kind: ScheduleKind::Constant,
    };
    let eval_decode = DecodeConfig {
        seed: cfg.seed,
        ..cfg.decode
    };
    let mut opt = AdamW::new(0.0, cfg.max_grad_norm);
    let mut report = PpoReport::default();
    let mut last_norm = 0.0;

    let mut checkpoint = |policy: &PolicyModel, step: usize, report: &mut PpoReport| -> Result<()> {
        if cfg.eval_every > 0 && !env.eval_prompts.is_empty() {
            let c = evaluate_policy(policy, env, &eval_decode, step)?;
            on_checkpoint(&c, policy)?;
            report.checkpoints.push(c);
        }
        Ok(())
    };
    checkpoint(policy, 0, &mut report)?;

    for step in 1..=cfg.total_steps {
        let (traj, gold) = rollout(policy, env, cfg, step)?;
        let kl = traj.kl_to_ref();
        let lr = sched.lr(step - 1);
        let mut vls = Vec::new();
        let mut order: Vec<usize> = (0..traj.prompts.len()).collect();
        let mut rng = indexed_stream(cfg.seed, "ppo-minibatch", step as u64);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for idx in order.chunks(cfg.step_batch) {
                let mut tape = Tape::new();
                let (loss, vl) = ppo_loss(&mut tape, policy, &traj, idx, cfg)?;
                let value = tape.item(loss);
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step,
                        lr,
                        grad_norm: last_norm,
                    });
                }
                vls.push(tape.item(vl));
                tape.backward(loss)?;
                policy.collect_grads(&tape);
                last_norm = opt.step(&mut [policy as &mut dyn Parameters], lr);
            }
        }
        report.steps.push(PpoStep {
            step,
            proxy_reward: mean(&traj.rewards),
            gold_reward: gold,
            kl_to_ref: kl,
            value_loss: mean(&vls),
        });
        if kl > cfg.kl_ceiling {
            log::warn!(
                "PPO stopped at step {step}: KL to reference {kl} exceeds {}",
                cfg.kl_ceiling
            );
            report.early_stop = Some(step);
            checkpoint(policy, step, &mut report)?;
            break;
        }
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
            checkpoint(policy, step, &mut report)?;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nucleus_keeps_smallest_prefix() {
        let p = nucleus(&[0.05, 0.5, 0.15, 0.3], 0.9);
        // Cumulative sums in descending order: 0.5, 0.8, 0.95 >= 0.9.
        let z = 0.95;
        let expect = [0.0, 0.5 / z, 0.15 / z, 0.3 / z];
        for (a, b) in p.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn nucleus_full_mass_is_identity() {
        let probs = [0.1, 0.2, 0.7];
        assert_eq!(nucleus(&probs, 1.0), probs.to_vec());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_first(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax_first(&[0.0; 4]), 0);
        assert_eq!(argmax_first(&[f32::NAN, -1.0]), 1);
    }

    #[test]
    fn clipped_matches_unclipped_inside_band() {
        for &r in &[0.8f32, 0.9, 1.0, 1.1, 1.2] {
            for &a in &[-2.0f32, 0.5, 3.0] {
                assert_eq!(clipped_surrogate(r, a, 0.2), r * a);
            }
        }
        assert_eq!(clipped_surrogate(1.5, 1.0, 0.2), 1.2);
        assert_eq!(clipped_surrogate(0.5, -1.0, 0.2), -0.8);
    }

    #[test]
    fn shaping_puts_reward_on_last_token() {
        let old = vec![vec![-1.0, -2.0], vec![-1.0]];
        let rf = vec![vec![-1.5, -2.0], vec![-1.0]];
        let (ret, adv) = shape_rewards(&old, &rf, &[1.0, 0.0], 0.1, 2);
        // Token 0 of sample 0 pays 0.1·0.5 of KL.
        assert!((ret[0][1] - 1.0).abs() < 1e-6);
        assert!((ret[0][0] - 0.95).abs() < 1e-6);
        assert_eq!(ret[1], vec![0.0]);
        let base = (0.95 + 0.0) / 2.0;
        assert!((adv[0][0] - (0.95 - base)).abs() < 1e-6);
        assert!((adv[1][0] + base).abs() < 1e-6);
    }

    #[test]
    fn constant_rewards_at_reference_give_zero_advantage() {
        let lp = vec![vec![-1.0, -0.5]; 4];
        let (_, adv) = shape_rewards(&lp, &lp, &[2.0; 4], 0.02, 4);
        assert!(adv.iter().flatten().all(|&a| a == 0.0));
    }
}
