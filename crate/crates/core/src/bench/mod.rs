//! Synthetic gold-reward environment, preference-data generation and the
//! overoptimization experiment harness.

mod data;
mod experiment;
mod gold;
mod report;

pub use data::{
    generate_preferences, prompt_set, random_prompt, train_reference_policy, PreferenceSplits, PromptSpec, SftSpec,
    SynthDatasetSpec,
};
pub use experiment::{
    bon_kl, fit_calibration, ppo_on_proxy, run_experiment_matrix, run_matrix_in, run_seed, train_proxy, Algo, BonPlan,
    BonPoint, BonPool, CellFailure, CellSummary, MatrixResult, MatrixSpec, PpoPlan, PpoRun, PpoSetup, ProxyRecipe,
    ResultRow, Rule, RuleScorer, PRESETS, RESULT_COLUMNS,
};
pub use gold::{mean_std, Calibrated, GoldReward, GoldSpec, GOLD_BOUND};
pub use report::{evaluate_gold, evaluate_policy_gold, overoptimization_report, GoldEval, OveroptRow};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{PolicyModel, TransformerConfig};

/// Everything fixed by the environment seed: gold reward and reference
/// policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub gold: GoldSpec,
    pub policy: TransformerConfig,
    pub sft: SftSpec,
    pub prompts: PromptSpec,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec {
            gold: GoldSpec::default(),
            policy: TransformerConfig::policy_default(),
            sft: SftSpec::default(),
            prompts: PromptSpec::default(),
            max_new_tokens: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Environment {
    pub spec: EnvSpec,
    pub gold: GoldReward,
    pub reference: PolicyModel,
}

impl Environment {
    pub fn build(spec: EnvSpec) -> Result<Self> {
        let gold = GoldReward::new(GoldSpec {
            seed: spec.seed,
            ..spec.gold
        });
        let reference = train_reference_policy(
            spec.policy,
            &gold,
            &spec.prompts,
            &spec.sft,
            spec.max_new_tokens,
            spec.seed,
        )?;
        Ok(Environment { spec, gold, reference })
    }
}
