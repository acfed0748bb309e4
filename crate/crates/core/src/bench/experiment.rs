//! The experiment matrix: proxy architectures × aggregation rules ×
//! {Best-of-n, PPO} × seeds, each cell scored against the gold reward.
//!
//! Per seed, the preference data and every proxy are trained once and
//! shared by all cells. Best-of-n candidates are drawn once at the largest
//! n; smaller n read a prefix of the same candidates, and every rule
//! re-aggregates the same member predictions.

use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::data::{generate_preferences, prompt_set, PreferenceSplits, SynthDatasetSpec};
use super::gold::Calibrated;
use super::report::GoldEval;
use super::{EnvSpec, Environment};
use crate::ensemble::{aggregate_members, Aggregation, Ensemble, EnsembleKind, Init, BETA_SWEEP};
use crate::error::{Error, Result};
use crate::model::{tokens, LoraConfig, PolicyModel, TransformerConfig};
use crate::preftrain::{pretrain_backbone, train_lora_members, train_reward_model, TrainConfig};
use crate::rl::{
    argmax_first, draw_candidates, ppo_train_with, sample_many, DecodeConfig, PpoCheckpoint, PpoConfig, PpoEnv,
    PpoReport, RewardScorer, Sample,
};
use crate::rng::derive_indexed;
use crate::Token;

/// How proxies are built and trained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxyRecipe {
    pub model: TransformerConfig,
    /// Ensemble size for every architecture except `none`.
    pub k: usize,
    pub train: TrainConfig,
    /// Adapter phase of the LoRA ensemble.
    pub lora_train: TrainConfig,
    pub lora: LoraConfig,
}

impl Default for ProxyRecipe {
    fn default() -> Self {
        ProxyRecipe {
            model: TransformerConfig::default(),
            k: 3,
            train: TrainConfig::default(),
            lora_train: TrainConfig::lora_default(),
            lora: LoraConfig::default(),
        }
    }
}

/// Trains a proxy of the given kind. The LoRA ensemble runs both phases:
/// backbone and heads on phase 1, adapters and heads on phase 2; all other
/// kinds train on phase 1 and phase 2 together.
pub fn train_proxy(kind: EnsembleKind, recipe: &ProxyRecipe, splits: &PreferenceSplits, seed: u64) -> Result<Ensemble> {
    let mut spec = kind.spec(recipe.k);
    spec.lora = recipe.lora;
    let train = TrainConfig { seed, ..recipe.train };
    match kind {
        EnsembleKind::Lora => {
            let (pre, _) = pretrain_backbone(
                recipe.model,
                &splits.phase1,
                &splits.phase2,
                &splits.heldout,
                recipe.k,
                &train,
                seed,
            )?;
            let mut ens = Ensemble::build(spec, Init::Pretrained(pre), seed)?;
            let lora_train = TrainConfig {
                seed,
                ..recipe.lora_train
            };
            train_lora_members(&mut ens, &splits.phase2, &splits.heldout, &lora_train)?;
            Ok(ens)
        }
        _ => {
            let mut ens = Ensemble::build(spec, Init::Fresh(recipe.model), seed)?;
            train_reward_model(&mut ens, &splits.train(), &splits.heldout, &train)?;
            Ok(ens)
        }
    }
}

/// Aggregation rule of a matrix cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub aggregation: Aggregation,
    /// Ignored by `mean`.
    #[serde(default)]
    pub beta: f32,
}

impl Rule {
    pub const MEAN: Rule = Rule {
        aggregation: Aggregation::Mean,
        beta: 0.0,
    };

    pub fn lcb(beta: f32) -> Self {
        Rule {
            aggregation: Aggregation::Lcb,
            beta,
        }
    }

    /// β as reported: 0 for `mean`.
    pub fn reported_beta(&self) -> f32 {
        match self.aggregation {
            Aggregation::Mean => 0.0,
            Aggregation::Lcb => self.beta,
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.aggregation {
            Aggregation::Mean => write!(f, "mean"),
            Aggregation::Lcb => write!(f, "lcb(beta={})", self.beta),
        }
    }
}

/// An ensemble scored under an explicit rule instead of its spec's.
pub struct RuleScorer<'a> {
    pub ensemble: &'a Ensemble,
    pub rule: Rule,
}

impl RewardScorer for RuleScorer<'_> {
    fn score(&self, prompts: &[&[Token]], responses: &[&[Token]]) -> Result<Vec<f32>> {
        let seqs: Vec<Vec<Token>> = prompts.iter().zip(responses).map(|(p, r)| tokens::join(p, r)).collect();
        aggregate_members(
            &self.ensemble.predict_batch(&seqs)?,
            self.rule.aggregation,
            self.rule.beta,
        )
    }
}

/// Analytic KL between Best-of-n and the sampling policy.
pub fn bon_kl(n: usize) -> f32 {
    let n = n as f64;
    (n.ln() - (n - 1.0) / n) as f32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BonPlan {
    pub ns: Vec<usize>,
    /// Prompts per seed.
    pub prompts: usize,
    pub seeds: Vec<u64>,
    pub decode: DecodeConfig,
}

impl Default for BonPlan {
    fn default() -> Self {
        BonPlan {
            ns: vec![50, 100, 200],
            prompts: 100,
            seeds: (0..10).collect(),
            decode: DecodeConfig::best_of_n(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoPlan {
    pub config: PpoConfig,
    pub seeds: Vec<u64>,
    /// PPO is expensive, so it runs only under these rules.
    pub rules: Vec<Rule>,
    /// Size of the training prompt pool per seed.
    pub train_prompts: usize,
}

impl Default for PpoPlan {
    fn default() -> Self {
        PpoPlan {
            config: PpoConfig::default(),
            seeds: (0..5).collect(),
            rules: vec![Rule::MEAN],
            train_prompts: 1000,
        }
    }
}

/// Missing fields of a deserialized spec take their `paper-fig2` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatrixSpec {
    pub env: EnvSpec,
    /// Dataset recipe; its seed is replaced by the cell seed.
    pub data: SynthDatasetSpec,
    pub proxy: ProxyRecipe,
    pub architectures: Vec<EnsembleKind>,
    /// Rules for Best-of-n cells.
    pub rules: Vec<Rule>,
    /// A missing table disables the algorithm.
    #[serde(default)]
    pub bon: Option<BonPlan>,
    #[serde(default)]
    pub ppo: Option<PpoPlan>,
    /// Held-out prompts for PPO evaluation.
    pub eval_prompts: usize,
    /// Reference samples per eval prompt used to calibrate PPO proxies.
    pub calibration_samples: usize,
}

pub const PRESETS: [&str; 2] = ["paper-fig2", "beta-sweep"];

impl Default for MatrixSpec {
    fn default() -> Self {
        Self::paper_fig2()
    }
}

impl MatrixSpec {
    /// Single model vs. the shared-backbone ensembles, Best-of-n and PPO.
    pub fn paper_fig2() -> Self {
        MatrixSpec {
            env: EnvSpec::default(),
            data: SynthDatasetSpec::default(),
            proxy: ProxyRecipe::default(),
            architectures: vec![EnsembleKind::None, EnsembleKind::Linear, EnsembleKind::Lora],
            rules: vec![Rule::MEAN],
            bon: Some(BonPlan::default()),
            ppo: Some(PpoPlan::default()),
            eval_prompts: 200,
            calibration_samples: 4,
        }
    }

    /// Mean vs. LCB across the β sweep, Best-of-n only.
    pub fn beta_sweep() -> Self {
        let mut rules = vec![Rule::MEAN];
        rules.extend(BETA_SWEEP.iter().map(|&b| Rule::lcb(b)));
        MatrixSpec {
            architectures: vec![EnsembleKind::Lora],
            rules,
            ppo: None,
            ..Self::paper_fig2()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper-fig2" => Ok(Self::paper_fig2()),
            "beta-sweep" => Ok(Self::beta_sweep()),
            _ => Err(Error::InvalidConfig(format!(
                "unknown preset `{name}` (expected one of {})",
                PRESETS.join(", ")
            ))),
        }
    }

    /// A matrix with no cells.
    pub fn empty() -> Self {
        MatrixSpec {
            architectures: Vec::new(),
            bon: None,
            ppo: None,
            ..Self::paper_fig2()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.proxy.train.validate()?;
        self.proxy.lora_train.validate()?;
        if self.proxy.k == 0 {
            return Err(Error::InvalidConfig("ensemble needs k >= 1".into()));
        }
        for r in self.rules.iter().chain(self.ppo.iter().flat_map(|p| &p.rules)) {
            if !(r.beta >= 0.0) || !r.beta.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "beta must be finite and >= 0, got {}",
                    r.beta
                )));
            }
        }
        if let Some(b) = &self.bon {
            if b.ns.contains(&0) {
                return Err(Error::InvalidConfig("best-of-n needs n >= 1".into()));
            }
            if b.prompts == 0 {
                return Err(Error::InvalidConfig("best-of-n needs at least one prompt".into()));
            }
            b.decode.validate()?;
        }
        if let Some(p) = &self.ppo {
            p.config.validate()?;
            if p.train_prompts == 0 || self.eval_prompts == 0 || self.calibration_samples == 0 {
                return Err(Error::InvalidConfig(
                    "ppo needs training prompts, eval prompts and calibration samples".into(),
                ));
            }
        }
        Ok(())
    }

    /// Every seed that runs at least one cell, in first-seen order.
    pub fn seeds(&self) -> Vec<u64> {
        let mut out: Vec<u64> = Vec::new();
        if self.architectures.is_empty() {
            return out;
        }
        let bon = self.bon.iter().flat_map(|b| &b.seeds);
        let ppo = self.ppo.iter().flat_map(|p| &p.seeds);
        for &s in bon.chain(ppo) {
            if !out.contains(&s) {
                out.push(s);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Bon,
    Ppo,
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algo::Bon => "bon",
            Algo::Ppo => "ppo",
        })
    }
}

/// One tidy results row: a cell, a seed and a checkpoint (PPO step or n).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResultRow {
    pub architecture: EnsembleKind,
    pub aggregation: Aggregation,
    pub beta: f32,
    pub algo: Algo,
    pub n_or_step: usize,
    pub seed: u64,
    pub proxy_reward: f32,
    pub gold_reward: f32,
    pub kl_to_ref: f32,
}

pub const RESULT_COLUMNS: [&str; 9] = [
    "architecture",
    "aggregation",
    "beta",
    "algo",
    "n_or_step",
    "seed",
    "proxy_reward",
    "gold_reward",
    "kl_to_ref",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellFailure {
    pub architecture: Option<EnsembleKind>,
    pub seed: u64,
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct MatrixResult {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<CellFailure>,
}

impl MatrixResult {
    /// Consolidated CSV; a header line even when there are no rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(RESULT_COLUMNS)?;
        for r in &self.rows {
            w.write_record([
                r.architecture.to_string(),
                r.aggregation.to_string(),
                r.beta.to_string(),
                r.algo.to_string(),
                r.n_or_step.to_string(),
                r.seed.to_string(),
                r.proxy_reward.to_string(),
                r.gold_reward.to_string(),
                r.kl_to_ref.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_failures(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["architecture", "seed", "stage", "error"])?;
        for f in &self.failures {
            w.write_record([
                f.architecture.map(|a| a.to_string()).unwrap_or_default(),
                f.seed.to_string(),
                f.stage.clone(),
                f.error.clone(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Seed-aggregated statistics of every (cell, checkpoint).
    pub fn summarize(&self) -> Vec<CellSummary> {
        let mut out: Vec<CellSummary> = Vec::new();
        for r in &self.rows {
            let key = (r.architecture, r.aggregation, r.beta, r.algo, r.n_or_step);
            let pos = out
                .iter()
                .position(|c| (c.architecture, c.aggregation, c.beta, c.algo, c.n_or_step) == key);
            let c = match pos {
                Some(i) => &mut out[i],
                None => {
                    out.push(CellSummary {
                        architecture: r.architecture,
                        aggregation: r.aggregation,
                        beta: r.beta,
                        algo: r.algo,
                        n_or_step: r.n_or_step,
                        proxy: Vec::new(),
                        gold: Vec::new(),
                        kl: Vec::new(),
                    });
                    out.last_mut().expect("just pushed")
                }
            };
            c.proxy.push(r.proxy_reward);
            c.gold.push(r.gold_reward);
            c.kl.push(r.kl_to_ref);
        }
        out
    }
}

/// Per-seed values of one (cell, checkpoint).
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub architecture: EnsembleKind,
    pub aggregation: Aggregation,
    pub beta: f32,
    pub algo: Algo,
    pub n_or_step: usize,
    pub proxy: Vec<f32>,
    pub gold: Vec<f32>,
    pub kl: Vec<f32>,
}

impl CellSummary {
    /// Mean and standard error of gold over seeds.
    pub fn gold_stats(&self) -> GoldEval {
        GoldEval::from_values(&self.gold)
    }

    /// Mean and standard error of proxy − gold over seeds.
    pub fn gap_stats(&self) -> GoldEval {
        let gaps: Vec<f32> = self.proxy.iter().zip(&self.gold).map(|(p, g)| p - g).collect();
        GoldEval::from_values(&gaps)
    }
}

/// Runs every cell of the matrix with up to `jobs` seeds in parallel.
/// Cell failures are recorded and logged; the rest of the matrix continues.
pub fn run_experiment_matrix(spec: &MatrixSpec, jobs: usize) -> Result<MatrixResult> {
    spec.validate()?;
    let seeds = spec.seeds();
    if seeds.is_empty() {
        return Ok(MatrixResult::default());
    }
    let env = Environment::build(spec.env)?;
    run_matrix_in(spec, &env, jobs)
}

/// As [`run_experiment_matrix`] in an already-built environment.
pub fn run_matrix_in(spec: &MatrixSpec, env: &Environment, jobs: usize) -> Result<MatrixResult> {
    spec.validate()?;
    let seeds = spec.seeds();
    let next = AtomicUsize::new(0);
    let done = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, seeds.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&seed) = seeds.get(i) else { break };
                let out = run_seed(spec, env, seed);
                done.lock().expect("worker panicked").push(out);
            });
        }
    });
    let mut result = MatrixResult::default();
    for part in done.into_inner().expect("worker panicked") {
        result.rows.extend(part.rows);
        result.failures.extend(part.failures);
    }
    let arch_pos = |a: EnsembleKind| spec.architectures.iter().position(|&x| x == a);
    result.rows.sort_by(|a, b| {
        (
            a.algo as u8,
            arch_pos(a.architecture),
            a.aggregation as u8,
            a.n_or_step,
            a.seed,
        )
            .cmp(&(
                b.algo as u8,
                arch_pos(b.architecture),
                b.aggregation as u8,
                b.n_or_step,
                b.seed,
            ))
            .then(a.beta.total_cmp(&b.beta))
    });
    result
        .failures
        .sort_by(|a, b| (a.seed, &a.stage).cmp(&(b.seed, &b.stage)));
    Ok(result)
}

/// All cells of one seed.
pub fn run_seed(spec: &MatrixSpec, env: &Environment, seed: u64) -> MatrixResult {
    let mut out = MatrixResult::default();
    let fail = |out: &mut MatrixResult, arch: Option<EnsembleKind>, stage: &str, e: Error| {
        log::warn!(
            "seed {seed}: {stage} failed{}: {e}",
            arch.map(|a| format!(" for {a}")).unwrap_or_default()
        );
        out.failures.push(CellFailure {
            architecture: arch,
            seed,
            stage: stage.to_string(),
            error: e.to_string(),
        });
    };

    log::info!("seed {seed}: generating preferences");
    let data = SynthDatasetSpec { seed, ..spec.data };
    let splits = match generate_preferences(&data, &env.gold, &env.reference) {
        Ok(s) => s,
        Err(e) => {
            fail(&mut out, None, "data", e);
            return out;
        }
    };

    let mut proxies = Vec::new();
    for &kind in &spec.architectures {
        log::info!("seed {seed}: training {kind} proxy");
        match train_proxy(kind, &spec.proxy, &splits, seed) {
            Ok(ens) => proxies.push((kind, ens)),
            Err(e) => fail(&mut out, Some(kind), "train", e),
        }
    }

    if let Some(plan) = spec.bon.as_ref().filter(|b| b.seeds.contains(&seed)) {
        log::info!("seed {seed}: best-of-n");
        match run_bon(spec, plan, env, &proxies, seed) {
            Ok(rows) => out.rows.extend(rows),
            Err(e) => fail(&mut out, None, "bon", e),
        }
    }

    if let Some(plan) = spec.ppo.as_ref().filter(|p| p.seeds.contains(&seed)) {
        for (kind, ens) in &proxies {
            for &rule in &plan.rules {
                log::info!("seed {seed}: ppo on {kind} proxy ({rule})");
                match run_ppo(spec, plan, env, *kind, ens, rule, seed) {
                    Ok(rows) => out.rows.extend(rows),
                    Err(e) => fail(&mut out, Some(*kind), "ppo", e),
                }
            }
        }
    }
    out
}

fn mean(v: &[f32]) -> f32 {
    (v.iter().map(|&x| x as f64).sum::<f64>() / v.len().max(1) as f64) as f32
}

/// Best-of-n candidates drawn once at the largest n, with gold scores.
pub struct BonPool {
    pub prompts: Vec<Vec<Token>>,
    pub candidates: Vec<Vec<Sample>>,
    pub n_max: usize,
    seqs: Vec<Vec<Token>>,
    gold: Vec<f32>,
}

/// One Best-of-n point for one proxy and rule.
#[derive(Debug, Clone, PartialEq)]
pub struct BonPoint {
    pub n: usize,
    /// Calibrated proxy score of each selected candidate.
    pub proxy: Vec<f32>,
    pub gold: Vec<f32>,
    /// Index of the selected candidate per prompt.
    pub selected: Vec<usize>,
}

impl BonPool {
    pub fn draw(env: &Environment, prompts: Vec<Vec<Token>>, n_max: usize, decode: &DecodeConfig) -> Result<Self> {
        let candidates = draw_candidates(&env.reference, &prompts, n_max, decode)?;
        let mut seqs = Vec::with_capacity(prompts.len() * n_max);
        let mut gold = Vec::with_capacity(prompts.len() * n_max);
        for (p, cs) in prompts.iter().zip(&candidates) {
            for c in cs {
                seqs.push(tokens::join(p, &c.response));
                gold.push(env.gold.score(p, &c.response));
            }
        }
        Ok(BonPool {
            prompts,
            candidates,
            n_max,
            seqs,
            gold,
        })
    }

    /// Member predictions for every candidate, `[member][prompt·n_max + j]`.
    pub fn predict(&self, ens: &Ensemble) -> Result<Vec<Vec<f32>>> {
        ens.predict_batch(&self.seqs)
    }

    /// Selects under `rule` for each n. Proxy scores are calibrated to the
    /// gold mean and spread over the whole pool; the map is increasing, so
    /// it never changes which candidate wins.
    pub fn select(&self, members: &[Vec<f32>], rule: Rule, ns: &[usize]) -> Result<Vec<BonPoint>> {
        let raw = aggregate_members(members, rule.aggregation, rule.beta)?;
        if raw.len() != self.gold.len() {
            return Err(Error::SeriesLength(raw.len(), self.gold.len()));
        }
        let (a, b) = Calibrated::fit(&raw, &self.gold);
        ns.iter()
            .map(|&n| {
                if n == 0 || n > self.n_max {
                    return Err(Error::InvalidConfig(format!(
                        "best-of-{n} from a pool of {}",
                        self.n_max
                    )));
                }
                let mut point = BonPoint {
                    n,
                    proxy: Vec::new(),
                    gold: Vec::new(),
                    selected: Vec::new(),
                };
                for p in 0..self.prompts.len() {
                    let off = p * self.n_max;
                    let j = argmax_first(&raw[off..off + n]);
                    point.proxy.push(a * raw[off + j] + b);
                    point.gold.push(self.gold[off + j]);
                    point.selected.push(j);
                }
                Ok(point)
            })
            .collect()
    }
}

fn run_bon(
    spec: &MatrixSpec,
    plan: &BonPlan,
    env: &Environment,
    proxies: &[(EnsembleKind, Ensemble)],
    seed: u64,
) -> Result<Vec<ResultRow>> {
    let n_max = plan.ns.iter().copied().max().unwrap_or(1);
    let prompts = prompt_set(
        &env.spec.prompts,
        env.spec.policy.vocab_size,
        plan.prompts,
        seed,
        "bon-prompts",
    );
    let decode = DecodeConfig { seed, ..plan.decode };
    let pool = BonPool::draw(env, prompts, n_max, &decode)?;
    let mut rows = Vec::new();
    for (kind, ens) in proxies {
        let members = pool.predict(ens)?;
        for &rule in &spec.rules {
            for point in pool.select(&members, rule, &plan.ns)? {
                rows.push(ResultRow {
                    architecture: *kind,
                    aggregation: rule.aggregation,
                    beta: rule.reported_beta(),
                    algo: Algo::Bon,
                    n_or_step: point.n,
                    seed,
                    proxy_reward: mean(&point.proxy),
                    gold_reward: mean(&point.gold),
                    kl_to_ref: bon_kl(point.n),
                });
            }
        }
    }
    Ok(rows)
}

/// Affine map taking `scorer` to the gold mean and spread on reference
/// samples: `per_prompt` samples for each prompt.
pub fn fit_calibration(
    env: &Environment,
    scorer: &dyn RewardScorer,
    prompts: &[Vec<Token>],
    per_prompt: usize,
    decode: &DecodeConfig,
) -> Result<(f32, f32)> {
    let ps: Vec<&[Token]> = prompts
        .iter()
        .flat_map(|p| std::iter::repeat_n(p.as_slice(), per_prompt))
        .collect();
    let keys: Vec<u64> = (0..ps.len() as u64)
        .map(|i| derive_indexed(decode.seed, "calibration", i))
        .collect();
    let samples = sample_many(&env.reference, &ps, &keys, decode)?;
    let rs: Vec<&[Token]> = samples.iter().map(|s| s.response.as_slice()).collect();
    let raw = scorer.score(&ps, &rs)?;
    let gold: Vec<f32> = ps.iter().zip(&rs).map(|(p, r)| env.gold.score(p, r)).collect();
    Ok(Calibrated::fit(&raw, &gold))
}

/// Prompt pools and calibration of a PPO run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoSetup {
    pub train_prompts: usize,
    pub eval_prompts: usize,
    pub calibration_samples: usize,
}

pub struct PpoRun {
    pub policy: PolicyModel,
    pub report: PpoReport,
    pub eval_prompts: Vec<Vec<Token>>,
    /// `(scale, shift)` applied to the proxy.
    pub calibration: (f32, f32),
}

/// PPO from the reference policy against the proxy `ens` under `rule`,
/// calibrated to gold on reference samples. `cfg.seed` drives prompts,
/// sampling and calibration.
pub fn ppo_on_proxy(
    env: &Environment,
    ens: &Ensemble,
    rule: Rule,
    cfg: &PpoConfig,
    setup: &PpoSetup,
    on_checkpoint: &mut dyn FnMut(&PpoCheckpoint, &PolicyModel) -> Result<()>,
) -> Result<PpoRun> {
    let seed = cfg.seed;
    let vocab = env.spec.policy.vocab_size;
    let eval = prompt_set(&env.spec.prompts, vocab, setup.eval_prompts, seed, "eval-prompts");
    let train = prompt_set(&env.spec.prompts, vocab, setup.train_prompts, seed, "ppo-train-prompts");
    let decode = DecodeConfig { seed, ..cfg.decode };
    let inner = RuleScorer { ensemble: ens, rule };
    // Same decoding distribution PPO starts from.
    let (scale, shift) = fit_calibration(env, &inner, &eval, setup.calibration_samples, &decode)?;
    let reward = Calibrated {
        inner: &inner,
        scale,
        shift,
    };
    let mut policy = env.reference.clone();
    let ppo_env = PpoEnv {
        reference: &env.reference,
        reward: &reward,
        gold: Some(&env.gold),
        train_prompts: &train,
        eval_prompts: &eval,
    };
    let report = ppo_train_with(&mut policy, &ppo_env, cfg, on_checkpoint)?;
    Ok(PpoRun {
        policy,
        report,
        eval_prompts: eval,
        calibration: (scale, shift),
    })
}

fn run_ppo(
    spec: &MatrixSpec,
    plan: &PpoPlan,
    env: &Environment,
    kind: EnsembleKind,
    ens: &Ensemble,
    rule: Rule,
    seed: u64,
) -> Result<Vec<ResultRow>> {
    let cfg = PpoConfig { seed, ..plan.config };
    let setup = PpoSetup {
        train_prompts: plan.train_prompts,
        eval_prompts: spec.eval_prompts,
        calibration_samples: spec.calibration_samples,
    };
    let run = ppo_on_proxy(env, ens, rule, &cfg, &setup, &mut |_, _| Ok(()))?;
    if let Some(step) = run.report.early_stop {
        log::warn!("seed {seed}: ppo on {kind} proxy stopped early at step {step} (KL ceiling)");
    }
    Ok(run
        .report
        .checkpoints
        .iter()
        .map(|c| ResultRow {
            architecture: kind,
            aggregation: rule.aggregation,
            beta: rule.reported_beta(),
            algo: Algo::Ppo,
            n_or_step: c.step,
            seed,
            proxy_reward: c.proxy_reward,
            gold_reward: c.gold_reward.unwrap_or(f32::NAN),
            kl_to_ref: c.kl_to_ref,
        })
        .collect())
}
