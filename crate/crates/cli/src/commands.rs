//! Subcommand configs and drivers. Every config is resolved as defaults,
//! then the `--config` file, then explicit flags, and is written to the run
//! directory before any work starts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context as _, Result};
use clap::Args;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use erlab_core::bench::{
    evaluate_gold, generate_preferences, overoptimization_report, ppo_on_proxy, prompt_set, run_experiment_matrix,
    BonPool, EnvSpec, Environment, GoldEval, MatrixSpec, PpoSetup, PreferenceSplits, Rule, SynthDatasetSpec, PRESETS,
};
use erlab_core::ensemble::{Aggregation, Architecture, Ensemble, EnsembleKind, Init, Pretrained, DEFAULT_BETA};
use erlab_core::model::{checkpoint, LoraConfig, PolicyModel, TransformerConfig};
use erlab_core::preftrain::{
    pretrain_backbone, read_jsonl, train_lora_members, train_reward_model, write_jsonl, PreferencePair, TrainConfig,
    TrainReport,
};
use erlab_core::rl::{sample_many, DecodeConfig, PpoConfig};
use erlab_core::rng::{derive_indexed, stream};
use erlab_core::{Error, Token};

use crate::output::RunDir;

pub struct Context {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub threads: usize,
}

impl Context {
    /// Defaults, overridden by the `--config` file when given.
    fn base<T: DeserializeOwned + Default>(&self) -> Result<T> {
        match &self.config {
            None => Ok(T::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    fn run_dir(&self, name: &str) -> Result<RunDir> {
        if self.threads > 1 {
            log::warn!(
                "numeric kernels are single-threaded; --threads {} has no effect",
                self.threads
            );
        }
        RunDir::create(self.out.as_deref(), name)
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

const PHASE1: &str = "phase1.jsonl";
const PHASE2: &str = "phase2.jsonl";
const HELDOUT: &str = "heldout.jsonl";
const MANIFEST: &str = "ensemble/ensemble.toml";

// gen-data

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenDataConfig {
    pub env: EnvSpec,
    pub data: SynthDatasetSpec,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Training pairs (phase 1 + phase 2).
    #[arg(long)]
    pairs: Option<usize>,
    /// Additional held-out pairs.
    #[arg(long)]
    heldout: Option<usize>,
    /// Label flip probability.
    #[arg(long)]
    noise: Option<f32>,
    /// Fraction of training pairs in phase 1.
    #[arg(long)]
    phase1_frac: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Seed of the gold reward and reference policy.
    #[arg(long)]
    env_seed: Option<u64>,
}

pub fn gen_data(ctx: &Context, a: GenDataArgs) -> Result<()> {
    let mut cfg: GenDataConfig = ctx.base()?;
    set(&mut cfg.data.n_pairs, a.pairs);
    set(&mut cfg.data.n_heldout, a.heldout);
    set(&mut cfg.data.noise, a.noise);
    set(&mut cfg.data.phase1_frac, a.phase1_frac);
    set(&mut cfg.data.seed, a.seed);
    set(&mut cfg.env.seed, a.env_seed);
    cfg.data.validate()?;
    let run = ctx.run_dir("gen-data")?;
    run.write_config(&cfg)?;

    let env = Environment::build(cfg.env)?;
    let splits = generate_preferences(&cfg.data, &env.gold, &env.reference)?;
    write_jsonl(&run.file(PHASE1), &splits.phase1)?;
    write_jsonl(&run.file(PHASE2), &splits.phase2)?;
    write_jsonl(&run.file(HELDOUT), &splits.heldout)?;
    log::info!(
        "wrote {} + {} training pairs and {} held-out pairs ({} labels flipped) to {}",
        splits.phase1.len(),
        splits.phase2.len(),
        splits.heldout.len(),
        splits.flipped,
        run.path.display()
    );
    run.seal()
}

fn read_splits(dir: &Path) -> Result<PreferenceSplits> {
    let read = |name: &str| -> Result<Vec<PreferencePair>> { Ok(read_jsonl(&dir.join(name))?) };
    Ok(PreferenceSplits {
        phase1: read(PHASE1)?,
        phase2: read(PHASE2)?,
        heldout: read(HELDOUT)?,
        flipped: 0,
    })
}

// train-reward

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// Phase 1 and phase 2.
    All,
    Phase1,
    Phase2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRewardConfig {
    /// Directory written by `gen-data`.
    pub data: PathBuf,
    pub ensemble: EnsembleKind,
    pub k: usize,
    pub aggregation: Aggregation,
    pub beta: f32,
    pub lora: LoraConfig,
    pub model: TransformerConfig,
    pub train: TrainConfig,
    /// Adapter phase of the LoRA ensemble.
    pub lora_train: TrainConfig,
    /// LoRA only: run the phase-1 backbone pretraining in this command.
    pub pretrain: bool,
    /// LoRA only: manifest of a linear-layer ensemble to use as the
    /// pretrained backbone and heads.
    pub pretrained: Option<PathBuf>,
    /// Training split for non-LoRA kinds.
    pub split: Split,
    pub seed: u64,
}

impl Default for TrainRewardConfig {
    fn default() -> Self {
        TrainRewardConfig {
            data: PathBuf::from("runs/gen-data"),
            ensemble: EnsembleKind::None,
            k: 3,
            aggregation: Aggregation::Mean,
            beta: DEFAULT_BETA,
            lora: LoraConfig::default(),
            model: TransformerConfig::default(),
            train: TrainConfig::default(),
            lora_train: TrainConfig::lora_default(),
            pretrain: false,
            pretrained: None,
            split: Split::All,
            seed: 0,
        }
    }
}

fn parse_kind(s: &str) -> std::result::Result<EnsembleKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_aggregation(s: &str) -> std::result::Result<Aggregation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args, Debug)]
pub struct TrainRewardArgs {
    /// Directory with phase1/phase2/heldout JSONL files.
    #[arg(long)]
    data: Option<PathBuf>,
    /// none | independent | linear | lora
    #[arg(long, value_parser = parse_kind)]
    ensemble: Option<EnsembleKind>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    beta: Option<f32>,
    /// mean | lcb
    #[arg(long, value_parser = parse_aggregation)]
    aggregation: Option<Aggregation>,
    /// Pretrain the LoRA backbone on phase 1 before adapter training.
    #[arg(long)]
    pretrain: bool,
    /// Linear-layer ensemble manifest to use as the pretrained LoRA backbone.
    #[arg(long, value_name = "MANIFEST")]
    pretrained: Option<PathBuf>,
    #[arg(long, value_enum)]
    split: Option<Split>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn train_reward(ctx: &Context, a: TrainRewardArgs) -> Result<()> {
    let mut cfg: TrainRewardConfig = ctx.base()?;
    set(&mut cfg.data, a.data);
    set(&mut cfg.ensemble, a.ensemble);
    set(&mut cfg.k, a.k);
    set(&mut cfg.beta, a.beta);
    set(&mut cfg.aggregation, a.aggregation);
    cfg.pretrain |= a.pretrain;
    if a.pretrained.is_some() {
        cfg.pretrained = a.pretrained;
    }
    set(&mut cfg.split, a.split);
    set(&mut cfg.train.epochs, a.epochs);
    set(&mut cfg.train.lr, a.lr);
    set(&mut cfg.seed, a.seed);
    cfg.train.seed = cfg.seed;
    cfg.lora_train.seed = cfg.seed;

    let mut spec = cfg.ensemble.spec(cfg.k);
    spec.aggregation = cfg.aggregation;
    spec.beta = cfg.beta;
    spec.lora = cfg.lora;
    spec.validate()?;
    if cfg.ensemble == EnsembleKind::Lora && !cfg.pretrain && cfg.pretrained.is_none() {
        return Err(anyhow::Error::new(Error::MissingPretrainedBackbone)
            .context("pass --pretrain to run phase-1 pretraining, or --pretrained <manifest>"));
    }
    let splits = read_splits(&cfg.data)?;
    let run = ctx.run_dir("train-reward")?;
    run.write_config(&cfg)?;

    let ens = if cfg.ensemble == EnsembleKind::Lora {
        let pre = match &cfg.pretrained {
            Some(path) => {
                let base = Ensemble::load(path)?;
                ensure!(
                    base.spec.architecture == Architecture::LinearLayer && base.heads.len() == cfg.k,
                    "{} is not a linear-layer ensemble with {} heads",
                    path.display(),
                    cfg.k
                );
                let Ensemble {
                    mut backbones, heads, ..
                } = base;
                Pretrained {
                    backbone: backbones.remove(0),
                    heads,
                }
            }
            None => {
                let (pre, report) = pretrain_backbone(
                    cfg.model,
                    &splits.phase1,
                    &splits.phase2,
                    &splits.heldout,
                    cfg.k,
                    &cfg.train,
                    cfg.seed,
                )?;
                report.write_csv(&run.file("pretrain_metrics.csv"))?;
                pre
            }
        };
        let mut ens = Ensemble::build(spec, Init::Pretrained(pre), cfg.seed)?;
        let report = train_lora_members(&mut ens, &splits.phase2, &splits.heldout, &cfg.lora_train)?;
        finish_training(&report, &run)?;
        ens
    } else {
        let data = match cfg.split {
            Split::All => splits.train(),
            Split::Phase1 => splits.phase1.clone(),
            Split::Phase2 => splits.phase2.clone(),
        };
        let mut ens = Ensemble::build(spec, Init::Fresh(cfg.model), cfg.seed)?;
        let report = train_reward_model(&mut ens, &data, &splits.heldout, &cfg.train)?;
        finish_training(&report, &run)?;
        ens
    };
    let manifest = ens.save(&run.file("ensemble"))?;
    log::info!("saved {}", manifest.display());
    run.seal()
}

fn finish_training(report: &TrainReport, run: &RunDir) -> Result<()> {
    report.write_csv(&run.file("metrics.csv"))?;
    log::info!("held-out pairwise accuracy per member: {:?}", report.final_accuracy);
    Ok(())
}

/// The ensemble's own rule unless overridden.
fn rule_for(ens: &Ensemble, aggregation: Option<Aggregation>, beta: Option<f32>) -> Rule {
    Rule {
        aggregation: aggregation.unwrap_or(ens.spec.aggregation),
        beta: beta.unwrap_or(ens.spec.beta),
    }
}

fn load_reward(path: &Path) -> Result<Ensemble> {
    let manifest = if path.is_dir() {
        path.join(MANIFEST)
    } else {
        path.to_path_buf()
    };
    Ensemble::load(&manifest).with_context(|| format!("loading reward model {}", manifest.display()))
}

#[derive(Serialize)]
struct ResponseRecord<'a> {
    prompt: &'a [Token],
    response: &'a [Token],
    #[serde(skip_serializing_if = "Option::is_none")]
    index: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    proxy: Option<f32>,
    gold: f32,
}

fn write_records(path: &Path, records: &[ResponseRecord<'_>]) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))
}

// best-of-n

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BestOfNConfig {
    pub env: EnvSpec,
    /// Reward model: a `train-reward` run directory or manifest.
    pub reward: PathBuf,
    pub aggregation: Option<Aggregation>,
    pub beta: Option<f32>,
    pub ns: Vec<usize>,
    pub prompts: usize,
    pub decode: DecodeConfig,
    pub seed: u64,
}

impl Default for BestOfNConfig {
    fn default() -> Self {
        BestOfNConfig {
            env: EnvSpec::default(),
            reward: PathBuf::from("runs/train-reward"),
            aggregation: None,
            beta: None,
            ns: vec![50, 100, 200],
            prompts: 100,
            decode: DecodeConfig::best_of_n(),
            seed: 0,
        }
    }
}

#[derive(Args, Debug)]
pub struct BestOfNArgs {
    /// Reward model run directory or manifest.
    #[arg(long)]
    reward: Option<PathBuf>,
    /// Sample counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    #[arg(long)]
    prompts: Option<usize>,
    #[arg(long, value_parser = parse_aggregation)]
    aggregation: Option<Aggregation>,
    #[arg(long)]
    beta: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn best_of_n(ctx: &Context, a: BestOfNArgs) -> Result<()> {
    let mut cfg: BestOfNConfig = ctx.base()?;
    set(&mut cfg.reward, a.reward);
    set(&mut cfg.ns, a.n);
    set(&mut cfg.prompts, a.prompts);
    if a.aggregation.is_some() {
        cfg.aggregation = a.aggregation;
    }
    if a.beta.is_some() {
        cfg.beta = a.beta;
    }
    set(&mut cfg.seed, a.seed);
    cfg.decode.seed = cfg.seed;
    ensure!(!cfg.ns.is_empty() && !cfg.ns.contains(&0), "--n needs values >= 1");
    cfg.decode.validate()?;
    let ens = load_reward(&cfg.reward)?;
    let run = ctx.run_dir("best-of-n")?;
    run.write_config(&cfg)?;

    let env = Environment::build(cfg.env)?;
    let rule = rule_for(&ens, cfg.aggregation, cfg.beta);
    let prompts = prompt_set(
        &env.spec.prompts,
        env.spec.policy.vocab_size,
        cfg.prompts,
        cfg.seed,
        "bon-prompts",
    );
    let n_max = cfg.ns.iter().copied().max().unwrap_or(1);
    let pool = BonPool::draw(&env, prompts, n_max, &cfg.decode)?;
    let members = pool.predict(&ens)?;
    let points = pool.select(&members, rule, &cfg.ns)?;

    let mut w = csv_writer(&run.file("metrics.csv"))?;
    w.write_record(["n", "proxy_reward", "gold_reward", "gold_stderr", "kl_to_ref"])?;
    for p in &points {
        let g = GoldEval::from_values(&p.gold);
        let proxy = GoldEval::from_values(&p.proxy).mean;
        w.write_record([
            p.n.to_string(),
            proxy.to_string(),
            g.mean.to_string(),
            g.stderr.to_string(),
            erlab_core::bench::bon_kl(p.n).to_string(),
        ])?;
        log::info!(
            "best-of-{}: proxy {proxy:.4}, gold {:.4} ± {:.4}",
            p.n,
            g.mean,
            g.stderr
        );
        let records: Vec<ResponseRecord<'_>> = (0..pool.prompts.len())
            .map(|i| ResponseRecord {
                prompt: &pool.prompts[i],
                response: &pool.candidates[i][p.selected[i]].response,
                index: Some(p.selected[i]),
                proxy: Some(p.proxy[i]),
                gold: p.gold[i],
            })
            .collect();
        write_records(&run.file(&format!("selections_n{}.jsonl", p.n)), &records)?;
    }
    w.flush()?;
    run.seal()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

// ppo

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoCliConfig {
    pub env: EnvSpec,
    pub reward: PathBuf,
    pub aggregation: Option<Aggregation>,
    pub beta: Option<f32>,
    pub ppo: PpoConfig,
    pub setup: PpoSetup,
}

impl Default for PpoCliConfig {
    fn default() -> Self {
        PpoCliConfig {
            env: EnvSpec::default(),
            reward: PathBuf::from("runs/train-reward"),
            aggregation: None,
            beta: None,
            ppo: PpoConfig::default(),
            setup: PpoSetup {
                train_prompts: 1000,
                eval_prompts: 200,
                calibration_samples: 4,
            },
        }
    }
}

#[derive(Args, Debug)]
pub struct PpoArgs {
    #[arg(long)]
    reward: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    kl_coef: Option<f32>,
    #[arg(long, value_parser = parse_aggregation)]
    aggregation: Option<Aggregation>,
    #[arg(long)]
    beta: Option<f32>,
    #[arg(long)]
    eval_prompts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn ppo(ctx: &Context, a: PpoArgs) -> Result<()> {
    let mut cfg: PpoCliConfig = ctx.base()?;
    set(&mut cfg.reward, a.reward);
    set(&mut cfg.ppo.total_steps, a.steps);
    set(&mut cfg.ppo.eval_every, a.eval_every);
    set(&mut cfg.ppo.kl_coef, a.kl_coef);
    set(&mut cfg.setup.eval_prompts, a.eval_prompts);
    if a.aggregation.is_some() {
        cfg.aggregation = a.aggregation;
    }
    if a.beta.is_some() {
        cfg.beta = a.beta;
    }
    set(&mut cfg.ppo.seed, a.seed);
    cfg.ppo.validate()?;
    let ens = load_reward(&cfg.reward)?;
    let run = ctx.run_dir("ppo")?;
    run.write_config(&cfg)?;

    let env = Environment::build(cfg.env)?;
    let rule = rule_for(&ens, cfg.aggregation, cfg.beta);
    let mut save = |c: &erlab_core::rl::PpoCheckpoint, policy: &PolicyModel| -> erlab_core::Result<()> {
        checkpoint::save(&run.file(&format!("policy_step{}.erlb", c.step)), policy)
    };
    let result = ppo_on_proxy(&env, &ens, rule, &cfg.ppo, &cfg.setup, &mut save)?;
    result.report.write_csv(&run.file("metrics.csv"))?;
    checkpoint::save(&run.file("policy.erlb"), &result.policy)?;

    let cps = &result.report.checkpoints;
    let x: Vec<usize> = cps.iter().map(|c| c.step).collect();
    let proxy: Vec<f32> = cps.iter().map(|c| c.proxy_reward).collect();
    let gold: Vec<f32> = cps.iter().map(|c| c.gold_reward.unwrap_or(f32::NAN)).collect();
    let rows = overoptimization_report(&x, &proxy, &gold)?;
    let mut w = csv_writer(&run.file("checkpoints.csv"))?;
    w.write_record([
        "step",
        "proxy_reward",
        "gold_reward",
        "gap",
        "kl_to_ref",
        "overoptimization",
    ])?;
    for (r, c) in rows.iter().zip(cps) {
        w.write_record([
            r.x.to_string(),
            r.proxy_reward.to_string(),
            r.gold_reward.to_string(),
            r.gap.to_string(),
            c.kl_to_ref.to_string(),
            r.event.to_string(),
        ])?;
        log::info!(
            "step {}: proxy {:.4}, gold {:.4}, KL {:.3}{}",
            r.x,
            r.proxy_reward,
            r.gold_reward,
            c.kl_to_ref,
            if r.event { " (overoptimization)" } else { "" }
        );
    }
    w.flush()?;
    if let Some(step) = result.report.early_stop {
        log::warn!("KL ceiling reached; stopped at step {step}");
    }
    let decode = DecodeConfig {
        seed: cfg.ppo.seed,
        ..cfg.ppo.decode
    };
    let g = dump_samples(&env, &result.policy, &result.eval_prompts, &decode, &run)?;
    log::info!("final policy gold reward {:.4} ± {:.4}", g.mean, g.stderr);
    run.seal()
}

/// One sample per prompt, with its gold score, to `samples.jsonl`.
fn dump_samples(
    env: &Environment,
    policy: &PolicyModel,
    prompts: &[Vec<Token>],
    decode: &DecodeConfig,
    run: &RunDir,
) -> Result<GoldEval> {
    let keys: Vec<u64> = (0..prompts.len() as u64)
        .map(|i| derive_indexed(i, "dump", 0))
        .collect();
    let samples = sample_many(policy, prompts, &keys, decode)?;
    let responses: Vec<&[Token]> = samples.iter().map(|s| s.response.as_slice()).collect();
    let records: Vec<ResponseRecord<'_>> = prompts
        .iter()
        .zip(&responses)
        .map(|(p, r)| ResponseRecord {
            prompt: p,
            response: r,
            index: None,
            proxy: None,
            gold: env.gold.score(p, r),
        })
        .collect();
    write_records(&run.file("samples.jsonl"), &records)?;
    Ok(evaluate_gold(&env.gold, prompts, &responses)?)
}

// evaluate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    pub env: EnvSpec,
    /// Policy checkpoint; the reference policy when absent.
    pub policy: Option<PathBuf>,
    pub prompts: usize,
    pub decode: DecodeConfig,
    pub seed: u64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            env: EnvSpec::default(),
            policy: None,
            prompts: 200,
            decode: DecodeConfig::ppo(),
            seed: 0,
        }
    }
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Policy checkpoint (default: the reference policy).
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long)]
    prompts: Option<usize>,
    #[arg(long)]
    temperature: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn evaluate(ctx: &Context, a: EvaluateArgs) -> Result<()> {
    let mut cfg: EvaluateConfig = ctx.base()?;
    if a.policy.is_some() {
        cfg.policy = a.policy;
    }
    set(&mut cfg.prompts, a.prompts);
    set(&mut cfg.decode.temperature, a.temperature);
    set(&mut cfg.seed, a.seed);
    cfg.decode.seed = cfg.seed;
    cfg.decode.validate()?;
    ensure!(cfg.prompts > 0, "--prompts must be at least 1");
    if let Some(p) = &cfg.policy {
        if !p.exists() {
            bail!("policy checkpoint {} does not exist", p.display());
        }
    }
    let run = ctx.run_dir("evaluate")?;
    run.write_config(&cfg)?;

    let env = Environment::build(cfg.env)?;
    let policy = match &cfg.policy {
        Some(path) => {
            let mut p = PolicyModel::new(cfg.env.policy, &mut stream(0, "load"))?;
            checkpoint::load_into(path, &mut p)?;
            p
        }
        None => env.reference.clone(),
    };
    let prompts = prompt_set(
        &env.spec.prompts,
        env.spec.policy.vocab_size,
        cfg.prompts,
        cfg.seed,
        "eval-prompts",
    );
    let g = dump_samples(&env, &policy, &prompts, &cfg.decode, &run)?;
    let mut w = csv_writer(&run.file("eval.csv"))?;
    w.write_record(["prompts", "gold_reward", "gold_stderr"])?;
    w.write_record([g.n.to_string(), g.mean.to_string(), g.stderr.to_string()])?;
    w.flush()?;
    println!("gold reward {:.4} ± {:.4} over {} prompts", g.mean, g.stderr, g.n);
    run.seal()
}

// matrix

#[derive(Args, Debug)]
pub struct MatrixArgs {
    /// Built-in matrix, used unless --config is given.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
    preset: Option<String>,
    /// Keep only the first N seeds of each plan.
    #[arg(long)]
    seeds: Option<usize>,
    /// Seeds run in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

pub fn matrix(ctx: &Context, a: MatrixArgs) -> Result<()> {
    let mut spec = match (&ctx.config, &a.preset) {
        (Some(_), Some(_)) => bail!("--preset and --config are mutually exclusive"),
        (Some(_), None) => ctx.base::<MatrixSpec>()?,
        (None, p) => MatrixSpec::preset(p.as_deref().unwrap_or("paper-fig2"))?,
    };
    if let Some(n) = a.seeds {
        if let Some(b) = spec.bon.as_mut() {
            b.seeds.truncate(n);
        }
        if let Some(p) = spec.ppo.as_mut() {
            p.seeds.truncate(n);
        }
    }
    ensure!(a.jobs >= 1, "--jobs must be at least 1");
    spec.validate()?;
    let run = ctx.run_dir("matrix")?;
    run.write_config(&spec)?;

    let result = run_experiment_matrix(&spec, a.jobs)?;
    result.write_csv(&run.file("results.csv"))?;
    result.write_failures(&run.file("failures.csv"))?;
    let mut w = csv_writer(&run.file("summary.csv"))?;
    w.write_record([
        "architecture",
        "aggregation",
        "beta",
        "algo",
        "n_or_step",
        "seeds",
        "proxy_reward",
        "gold_reward",
        "gold_stderr",
        "gap",
        "kl_to_ref",
    ])?;
    for c in result.summarize() {
        let g = c.gold_stats();
        w.write_record([
            c.architecture.to_string(),
            c.aggregation.to_string(),
            c.beta.to_string(),
            c.algo.to_string(),
            c.n_or_step.to_string(),
            c.gold.len().to_string(),
            GoldEval::from_values(&c.proxy).mean.to_string(),
            g.mean.to_string(),
            g.stderr.to_string(),
            c.gap_stats().mean.to_string(),
            GoldEval::from_values(&c.kl).mean.to_string(),
        ])?;
    }
    w.flush()?;
    if !result.failures.is_empty() {
        log::warn!("{} cell(s) failed; see failures.csv", result.failures.len());
    }
    log::info!(
        "{} result rows in {}",
        result.rows.len(),
        run.file("results.csv").display()
    );
    run.seal()
}
