use serde::Serialize;

use super::gold::GoldReward;
use crate::error::{Error, Result};
use crate::model::PolicyModel;
use crate::rl::{sample_many, DecodeConfig};
use crate::rng::derive_indexed;
use crate::Token;

/// Mean gold reward with its standard error over prompts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GoldEval {
    pub mean: f32,
    pub stderr: f32,
    pub n: usize,
}

impl GoldEval {
    /// Mean and standard error (sample std / sqrt n) of `values`.
    pub fn from_values(values: &[f32]) -> Self {
        let n = values.len();
        if n == 0 {
            return GoldEval {
                mean: f32::NAN,
                stderr: f32::NAN,
                n,
            };
        }
        let m = values.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = values.iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        GoldEval {
            mean: m as f32,
            stderr: stderr as f32,
            n,
        }
    }
}

/// Gold reward of fixed responses, one per prompt.
pub fn evaluate_gold<P: AsRef<[Token]>, R: AsRef<[Token]>>(
    gold: &GoldReward,
    prompts: &[P],
    responses: &[R],
) -> Result<GoldEval> {
    if prompts.len() != responses.len() {
        return Err(Error::SeriesLength(prompts.len(), responses.len()));
    }
    let scores: Vec<f32> = prompts
        .iter()
        .zip(responses)
        .map(|(p, r)| gold.score(p.as_ref(), r.as_ref()))
        .collect();
    Ok(GoldEval::from_values(&scores))
}

/// Gold reward of one policy sample per prompt.
pub fn evaluate_policy_gold<P: AsRef<[Token]>>(
    policy: &PolicyModel,
    gold: &GoldReward,
    prompts: &[P],
    decode: &DecodeConfig,
) -> Result<GoldEval> {
    let keys: Vec<u64> = (0..prompts.len())
        .map(|i| derive_indexed(i as u64, "gold-eval", 0))
        .collect();
    let samples = sample_many(policy, prompts, &keys, decode)?;
    let responses: Vec<&[Token]> = samples.iter().map(|s| s.response.as_slice()).collect();
    evaluate_gold(gold, prompts, &responses)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OveroptRow {
    /// PPO step or Best-of-n sample count.
    pub x: usize,
    pub proxy_reward: f32,
    pub gold_reward: f32,
    pub gap: f32,
    /// Proxy rose since the previous checkpoint while gold did not.
    pub event: bool,
}

/// Per-checkpoint proxy/gold gap with overoptimization events flagged.
pub fn overoptimization_report(x: &[usize], proxy: &[f32], gold: &[f32]) -> Result<Vec<OveroptRow>> {
    if proxy.len() != gold.len() {
        return Err(Error::SeriesLength(proxy.len(), gold.len()));
    }
    if x.len() != proxy.len() {
        return Err(Error::SeriesLength(x.len(), proxy.len()));
    }
    Ok((0..x.len())
        .map(|i| OveroptRow {
            x: x[i],
            proxy_reward: proxy[i],
            gold_reward: gold[i],
            gap: proxy[i] - gold[i],
            event: i > 0 && proxy[i] > proxy[i - 1] && gold[i] <= gold[i - 1],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_series_have_no_gap() {
        let s = [0.1, 0.5, 0.3];
        let r = overoptimization_report(&[0, 100, 200], &s, &s).unwrap();
        assert!(r.iter().all(|row| row.gap == 0.0 && !row.event));
    }

    #[test]
    fn rising_proxy_flat_gold_flags_every_rise() {
        let proxy = [0.0, 1.0, 2.0, 2.0, 3.0];
        let gold = [0.5; 5];
        let r = overoptimization_report(&[0, 1, 2, 3, 4], &proxy, &gold).unwrap();
        let events: Vec<bool> = r.iter().map(|row| row.event).collect();
        assert_eq!(events, [false, true, true, false, true]);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        assert!(overoptimization_report(&[0, 1], &[0.0, 1.0], &[0.0]).is_err());
    }

    #[test]
    fn standard_error_uses_sample_std() {
        let e = GoldEval::from_values(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.mean, 2.5);
        // sample variance 5/3, se = sqrt(5/12)
        assert!((e.stderr - (5.0f32 / 12.0).sqrt()).abs() < 1e-6);
    }
}
