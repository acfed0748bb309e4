use serde::{Deserialize, Serialize};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::model::tokens::{self, FIRST_CONTENT};
use crate::rl::RewardScorer;
use crate::rng::stream;
use crate::Token;

pub const GOLD_BOUND: f32 = 5.0;

/// Parameters of the programmatic ground-truth reward. Everything random
/// (token roles, network weights) is derived from `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoldSpec {
    pub seed: u64,
    pub vocab_size: usize,
    pub n_targets: usize,
    /// Reward per target token in the response, up to `target_cap` of them.
    pub target_bonus: f32,
    pub target_cap: usize,
    /// Penalty per target token beyond the cap.
    pub excess_penalty: f32,
    pub n_forbidden: usize,
    pub forbidden_penalty: f32,
    pub ideal_len: usize,
    pub length_penalty: f32,
    /// Penalty for responses that never emit EOS.
    pub truncation_penalty: f32,
    pub mlp_hidden: usize,
    pub mlp_scale: f32,
}

impl Default for GoldSpec {
    fn default() -> Self {
        GoldSpec {
            seed: 0,
            vocab_size: 64,
            n_targets: 6,
            target_bonus: 1.0,
            target_cap: 2,
            excess_penalty: 1.0,
            n_forbidden: 6,
            forbidden_penalty: 1.0,
            ideal_len: 4,
            length_penalty: 0.25,
            truncation_penalty: 1.0,
            mlp_hidden: 16,
            mlp_scale: 0.5,
        }
    }
}

/// Deterministic, bounded gold reward.
///
/// Structural terms are interpretable and exploitable: a policy that learns
/// "target tokens are good" without the cap over-produces them. A frozen
/// random network over bag-of-token features adds a smooth, hard-to-name
/// component so proxies make idiosyncratic errors.
#[derive(Debug, Clone)]
pub struct GoldReward {
    pub spec: GoldSpec,
    target: Vec<bool>,
    forbidden: Vec<bool>,
    w1: Vec<f32>,
    b1: Vec<f32>,
    w2: Vec<f32>,
}

impl GoldReward {
    pub fn new(spec: GoldSpec) -> Self {
        let v = spec.vocab_size;
        let content: Vec<Token> = (FIRST_CONTENT..v as Token).collect();
        let mut rng = stream(spec.seed, "gold-roles");
        let mut shuffled = content;
        shuffled.shuffle(&mut rng);
        let mut target = vec![false; v];
        let mut forbidden = vec![false; v];
        for &t in shuffled.iter().take(spec.n_targets) {
            target[t as usize] = true;
        }
        for &t in shuffled.iter().skip(spec.n_targets).take(spec.n_forbidden) {
            forbidden[t as usize] = true;
        }

        let mut rng = stream(spec.seed, "gold-net");
        let h = spec.mlp_hidden;
        let inputs = 2 * v;
        let n1 = Normal::new(0.0, 1.0 / (inputs as f32 / 8.0).sqrt()).expect("valid std");
        let n2 = Normal::new(0.0, 1.0 / (h as f32).sqrt()).expect("valid std");
        let w1 = (0..h * inputs).map(|_| n1.sample(&mut rng)).collect();
        let b1 = (0..h).map(|_| n1.sample(&mut rng) * 0.5).collect();
        let w2 = (0..h).map(|_| n2.sample(&mut rng)).collect();
        GoldReward {
            spec,
            target,
            forbidden,
            w1,
            b1,
            w2,
        }
    }

    pub fn is_target(&self, t: Token) -> bool {
        self.target[t as usize]
    }

    /// Target tokens in id order.
    pub fn targets(&self) -> Vec<Token> {
        (0..self.spec.vocab_size as Token)
            .filter(|&t| self.is_target(t))
            .collect()
    }

    pub fn is_forbidden(&self, t: Token) -> bool {
        self.forbidden[t as usize]
    }

    pub fn target_hits(&self, body: &[Token]) -> usize {
        body.iter().filter(|&&t| self.is_target(t)).count()
    }

    fn network(&self, prompt: &[Token], body: &[Token]) -> f32 {
        let v = self.spec.vocab_size;
        let mut hidden = self.b1.clone();
        // Bag-of-tokens features: response tokens in the first half, prompt
        // tokens in the second.
        let feats = body
            .iter()
            .map(|&t| t as usize)
            .chain(prompt.iter().map(|&t| v + t as usize));
        for f in feats {
            for (j, h) in hidden.iter_mut().enumerate() {
                *h += self.w1[j * 2 * v + f] * 0.5;
            }
        }
        hidden.iter().zip(&self.w2).map(|(h, w)| h.tanh() * w).sum()
    }

    pub fn score(&self, prompt: &[Token], response: &[Token]) -> f32 {
        let s = &self.spec;
        let body = tokens::body(response);
        let finished = response.last() == Some(&tokens::EOS);
        let hits = self.target_hits(body);
        let capped = hits.min(s.target_cap) as f32;
        let excess = hits.saturating_sub(s.target_cap) as f32;
        let forbidden = body.iter().filter(|&&t| self.is_forbidden(t)).count() as f32;
        let len_dev = (body.len() as f32 - s.ideal_len as f32).abs();
        let mut r = s.target_bonus * capped
            - s.excess_penalty * excess
            - s.forbidden_penalty * forbidden
            - s.length_penalty * len_dev
            + s.mlp_scale * self.network(prompt, body);
        if !finished {
            r -= s.truncation_penalty;
        }
        r.clamp(-GOLD_BOUND, GOLD_BOUND)
    }
}

impl RewardScorer for GoldReward {
    fn score(&self, prompts: &[&[Token]], responses: &[&[Token]]) -> Result<Vec<f32>> {
        Ok(prompts
            .iter()
            .zip(responses)
            .map(|(p, r)| GoldReward::score(self, p, r))
            .collect())
    }
}

/// A scorer mapped through `a·r + b`.
pub struct Calibrated<'a> {
    pub inner: &'a dyn RewardScorer,
    pub scale: f32,
    pub shift: f32,
}

impl Calibrated<'_> {
    /// Affine map that gives `raw` the mean and standard deviation of
    /// `target`.
    pub fn fit(raw: &[f32], target: &[f32]) -> (f32, f32) {
        let (mr, sr) = mean_std(raw);
        let (mt, st) = mean_std(target);
        let scale = if sr > 1e-8 { st / sr } else { 1.0 };
        (scale, mt - scale * mr)
    }
}

impl RewardScorer for Calibrated<'_> {
    fn score(&self, prompts: &[&[Token]], responses: &[&[Token]]) -> Result<Vec<f32>> {
        Ok(self
            .inner
            .score(prompts, responses)?
            .into_iter()
            .map(|r| self.scale * r + self.shift)
            .collect())
    }
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f32]) -> (f32, f32) {
    let n = v.len().max(1) as f64;
    let m = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / n;
    (m as f32, var.sqrt() as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roles_are_disjoint_content_tokens() {
        let g = GoldReward::new(GoldSpec::default());
        assert_eq!(g.targets().len(), 6);
        assert!(g.targets().iter().all(|&t| t >= FIRST_CONTENT && !g.is_forbidden(t)));
        let n = (FIRST_CONTENT..64).filter(|&t| g.is_forbidden(t)).count();
        assert_eq!(n, 6);
    }

    #[test]
    fn structural_terms_move_the_score() {
        let spec = GoldSpec {
            mlp_scale: 0.0,
            ..GoldSpec::default()
        };
        let g = GoldReward::new(spec);
        let prompt = [10u32, 11];
        let t = g.targets()[0];
        let plain: Vec<Token> = (FIRST_CONTENT..64)
            .filter(|&x| !g.is_forbidden(x) && !g.is_target(x))
            .take(4)
            .collect();
        let mut base = plain.clone();
        base.push(tokens::EOS);
        assert_eq!(g.score(&prompt, &base), 0.0);
        let mut hit = base.clone();
        hit[0] = t;
        assert_eq!(g.score(&prompt, &hit), 1.0);
        // Truncated: no EOS.
        assert_eq!(g.score(&prompt, &plain), -1.0);
        // Three hits: two rewarded, one penalized.
        let mut many = vec![t, t, t, plain[0], tokens::EOS];
        assert_eq!(g.score(&prompt, &many), 1.0);
        many[3] = t;
        assert_eq!(g.score(&prompt, &many), 0.0);
    }

    #[test]
    fn calibration_matches_moments() {
        let raw = [1.0, 2.0, 3.0, 4.0];
        let target = [10.0, 0.0, 5.0, -3.0];
        let (a, b) = Calibrated::fit(&raw, &target);
        let mapped: Vec<f32> = raw.iter().map(|r| a * r + b).collect();
        let (m1, s1) = mean_std(&mapped);
        let (m2, s2) = mean_std(&target);
        assert!((m1 - m2).abs() < 1e-5 && (s1 - s2).abs() < 1e-5);
    }
}
