//! Reward-model ensembles: independent models, a shared backbone with k
//! linear heads, and a frozen shared backbone with k (adapter, head) pairs.
//! Member predictions are combined by their mean or a lower confidence
//! bound.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameters, Tape};
use crate::error::{Error, Result};
use crate::model::{checkpoint, last_hidden, Backbone, LoraConfig, LoraSet, RewardHead, TokenBatch, TransformerConfig};
use crate::rng::stream;
use crate::Token;

/// How the k members share parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// k full reward models, each with its own backbone and head.
    Independent,
    /// One backbone trained jointly with k heads.
    #[serde(rename = "linear")]
    LinearLayer,
    /// One frozen reward-pretrained backbone, k adapter sets and heads.
    Lora,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Architecture::Independent, Architecture::LinearLayer, Architecture::Lora];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Independent => "independent",
            Architecture::LinearLayer => "linear",
            Architecture::Lora => "lora",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(Architecture::Independent),
            "linear" => Ok(Architecture::LinearLayer),
            "lora" => Ok(Architecture::Lora),
            _ => Err(Error::InvalidConfig(format!("unknown ensemble architecture `{s}`"))),
        }
    }
}

/// The reward-model choice offered to users: a single model or one of the
/// three ensemble architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleKind {
    None,
    Independent,
    Linear,
    Lora,
}

impl EnsembleKind {
    pub const ALL: [EnsembleKind; 4] = [
        EnsembleKind::None,
        EnsembleKind::Independent,
        EnsembleKind::Linear,
        EnsembleKind::Lora,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EnsembleKind::None => "none",
            EnsembleKind::Independent => "independent",
            EnsembleKind::Linear => "linear",
            EnsembleKind::Lora => "lora",
        }
    }

    /// Ensemble spec with `k` members (`None` always has one).
    pub fn spec(self, k: usize) -> EnsembleSpec {
        match self {
            EnsembleKind::None => EnsembleSpec::single(),
            EnsembleKind::Independent => EnsembleSpec::new(Architecture::Independent, k),
            EnsembleKind::Linear => EnsembleSpec::new(Architecture::LinearLayer, k),
            EnsembleKind::Lora => EnsembleSpec::new(Architecture::Lora, k),
        }
    }
}

impl fmt::Display for EnsembleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnsembleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        EnsembleKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown ensemble kind `{s}`")))
    }
}

/// Rule for collapsing member rewards into one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Lcb,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Mean => "mean",
            Aggregation::Lcb => "lcb",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "lcb" => Ok(Aggregation::Lcb),
            _ => Err(Error::InvalidConfig(format!("unknown aggregation `{s}`"))),
        }
    }
}

pub const DEFAULT_BETA: f32 = 0.5;
pub const BETA_SWEEP: [f32; 5] = [0.0, 0.25, 0.5, 1.0, 2.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub architecture: Architecture,
    pub k: usize,
    pub aggregation: Aggregation,
    pub beta: f32,
    #[serde(default)]
    pub lora: LoraConfig,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        EnsembleSpec {
            architecture: Architecture::Independent,
            k: 1,
            aggregation: Aggregation::Mean,
            beta: DEFAULT_BETA,
            lora: LoraConfig::default(),
        }
    }
}

impl EnsembleSpec {
    pub fn new(architecture: Architecture, k: usize) -> Self {
        EnsembleSpec {
            architecture,
            k,
            ..Default::default()
        }
    }

    /// A single reward model.
    pub fn single() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("ensemble needs k >= 1".into()));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "beta must be finite and >= 0, got {}",
                self.beta
            )));
        }
        Ok(())
    }

    pub fn aggregate(&self, rewards: &[f32]) -> Result<f32> {
        aggregate(rewards, self.aggregation, self.beta)
    }
}

/// Collapses one member reward set. LCB uses the population standard
/// deviation, so a single member gives `LCB == Mean`.
pub fn aggregate(rewards: &[f32], rule: Aggregation, beta: f32) -> Result<f32> {
    if rewards.is_empty() {
        return Err(Error::EmptyRewardSet);
    }
    let k = rewards.len() as f64;
    let mean = rewards.iter().map(|&r| r as f64).sum::<f64>() / k;
    Ok(match rule {
        Aggregation::Mean => mean as f32,
        Aggregation::Lcb => {
            let var = rewards.iter().map(|&r| (r as f64 - mean).powi(2)).sum::<f64>() / k;
            (mean - beta as f64 * var.sqrt()) as f32
        }
    })
}

/// Aggregates `[member][item]` predictions into one score per item.
pub fn aggregate_members(members: &[Vec<f32>], rule: Aggregation, beta: f32) -> Result<Vec<f32>> {
    let n = members.first().map_or(0, Vec::len);
    if let Some(bad) = members.iter().find(|m| m.len() != n) {
        return Err(Error::SeriesLength(n, bad.len()));
    }
    let mut set = vec![0.0; members.len()];
    (0..n)
        .map(|j| {
            for (s, m) in set.iter_mut().zip(members) {
                *s = m[j];
            }
            aggregate(&set, rule, beta)
        })
        .collect()
}

/// Sizes `|M|`, `|L|`, `|A|` of one backbone, head and adapter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartSizes {
    pub backbone: usize,
    pub head: usize,
    pub adapters: usize,
}

impl PartSizes {
    pub fn for_config(config: &TransformerConfig, lora: LoraConfig) -> Self {
        PartSizes {
            backbone: config.backbone_params(),
            head: RewardHead::closed_form_count(config.d_model),
            adapters: LoraSet::closed_form_count(config, lora),
        }
    }

    /// Parameters an ensemble of this architecture trains over its whole
    /// life: `k(|M|+|L|)`, `|M|+k|L|` or `|M|+k|L|+k|A|`.
    pub fn total(&self, arch: Architecture, k: usize) -> usize {
        match arch {
            Architecture::Independent => k * (self.backbone + self.head),
            Architecture::LinearLayer => self.backbone + k * self.head,
            Architecture::Lora => self.backbone + k * self.head + k * self.adapters,
        }
    }

    /// Parameters updated while training the ensemble members (for LoRA,
    /// after the backbone has been pretrained and frozen).
    pub fn member_phase(&self, arch: Architecture, k: usize) -> usize {
        match arch {
            Architecture::Lora => k * (self.head + self.adapters),
            _ => self.total(arch, k),
        }
    }
}

/// Backbone and heads produced by reward pretraining, the starting point of
/// a LoRA ensemble.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub backbone: Backbone,
    pub heads: Vec<RewardHead>,
}

pub enum Init {
    Fresh(TransformerConfig),
    Pretrained(Pretrained),
}

/// Seed of member `i`; member 0 reuses the base seed so a k-member ensemble
/// starts with the k=1 model.
pub fn member_seed(seed: u64, i: usize) -> u64 {
    seed ^ i as u64
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub spec: EnsembleSpec,
    /// One shared backbone, or k for independent members.
    pub backbones: Vec<Backbone>,
    pub heads: Vec<RewardHead>,
    /// k adapter sets for LoRA ensembles, empty otherwise.
    pub adapters: Vec<LoraSet>,
}

/// Read-only view of one member.
pub struct Member<'a> {
    pub backbone: &'a Backbone,
    pub head: &'a RewardHead,
    pub adapters: Option<&'a LoraSet>,
}

/// Sequences scored per forward pass.
const SCORE_CHUNK: usize = 256;

impl Ensemble {
    pub fn build(spec: EnsembleSpec, init: Init, seed: u64) -> Result<Self> {
        spec.validate()?;
        let k = spec.k;
        let fresh_backbone = |cfg: TransformerConfig, s: u64| Backbone::new(cfg, &mut stream(s, "backbone"));
        let fresh_head = |d: usize, s: u64| RewardHead::new(d, &mut stream(s, "head"));

        let (backbones, heads) = match (spec.architecture, init) {
            (Architecture::Lora, Init::Fresh(_)) => return Err(Error::MissingPretrainedBackbone),
            (arch, Init::Pretrained(p)) => {
                if p.heads.len() != k {
                    return Err(Error::InvalidConfig(format!(
                        "pretrained model has {} heads, ensemble needs {k}",
                        p.heads.len()
                    )));
                }
                let backbones = if arch == Architecture::Independent {
                    vec![p.backbone; k]
                } else {
                    vec![p.backbone]
                };
                (backbones, p.heads)
            }
            (Architecture::Independent, Init::Fresh(cfg)) => {
                let b = (0..k)
                    .map(|i| fresh_backbone(cfg, member_seed(seed, i)))
                    .collect::<Result<_>>()?;
                let h = (0..k).map(|i| fresh_head(cfg.d_model, member_seed(seed, i))).collect();
                (b, h)
            }
            (Architecture::LinearLayer, Init::Fresh(cfg)) => {
                let b = vec![fresh_backbone(cfg, seed)?];
                let h = (0..k).map(|i| fresh_head(cfg.d_model, member_seed(seed, i))).collect();
                (b, h)
            }
        };

        let mut ens = Ensemble {
            spec,
            backbones,
            heads,
            adapters: Vec::new(),
        };
        if spec.architecture == Architecture::Lora {
            let cfg = ens.config();
            ens.adapters = (0..k)
                .map(|i| LoraSet::for_attention(&cfg, spec.lora, &mut stream(member_seed(seed, i), "lora")))
                .collect::<Result<_>>()?;
            for b in &mut ens.backbones {
                b.set_trainable(false);
            }
        }
        Ok(ens)
    }

    pub fn k(&self) -> usize {
        self.spec.k
    }

    pub fn config(&self) -> TransformerConfig {
        self.backbones[0].config
    }

    pub fn member(&self, i: usize) -> Member<'_> {
        let b = if self.backbones.len() == 1 { 0 } else { i };
        Member {
            backbone: &self.backbones[b],
            head: &self.heads[i],
            adapters: self.adapters.get(i),
        }
    }

    pub fn sizes(&self) -> PartSizes {
        PartSizes::for_config(&self.config(), self.spec.lora)
    }

    /// Per-member rewards for each sequence: `out[i][j]` is member i's
    /// reward for sequence j.
    pub fn predict_batch<S: AsRef<[Token]>>(&self, seqs: &[S]) -> Result<Vec<Vec<f32>>> {
        let k = self.k();
        let mut out = vec![Vec::with_capacity(seqs.len()); k];
        let cfg = self.config();
        for chunk in seqs.chunks(SCORE_CHUNK) {
            let batch = TokenBatch::new(chunk, cfg.max_seq_len, cfg.vocab_size)?;
            match self.spec.architecture {
                Architecture::LinearLayer => {
                    // Shared trunk: one forward, k heads.
                    let mut tape = Tape::inference();
                    let h = last_hidden(&mut tape, &self.backbones[0], None, &batch)?;
                    for (i, head) in self.heads.iter().enumerate() {
                        let r = head.forward(&mut tape, h)?;
                        out[i].extend_from_slice(tape.value(r));
                    }
                }
                _ => {
                    for (i, o) in out.iter_mut().enumerate() {
                        let m = self.member(i);
                        let mut tape = Tape::inference();
                        let h = last_hidden(&mut tape, m.backbone, m.adapters, &batch)?;
                        let r = m.head.forward(&mut tape, h)?;
                        o.extend_from_slice(tape.value(r));
                    }
                }
            }
        }
        Ok(out)
    }

    /// The reward set of one `(prompt, response)` pair.
    pub fn predict_members(&self, prompt: &[Token], response: &[Token]) -> Result<Vec<f32>> {
        let seq = crate::model::tokens::join(prompt, response);
        Ok(self.predict_batch(&[seq])?.into_iter().map(|v| v[0]).collect())
    }

    /// Aggregated reward per sequence under the spec's rule.
    pub fn score_batch<S: AsRef<[Token]>>(&self, seqs: &[S]) -> Result<Vec<f32>> {
        aggregate_members(&self.predict_batch(seqs)?, self.spec.aggregation, self.spec.beta)
    }

    /// Writes one checkpoint per backbone, head and adapter set plus a
    /// manifest; returns the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: String, p: &dyn Parameters| -> Result<String> {
            checkpoint::save(&dir.join(&name), p)?;
            Ok(name)
        };
        let backbones = self
            .backbones
            .iter()
            .enumerate()
            .map(|(i, b)| write(format!("backbone_{i}.erlb"), b))
            .collect::<Result<_>>()?;
        let heads = self
            .heads
            .iter()
            .enumerate()
            .map(|(i, h)| write(format!("head_{i}.erlb"), h))
            .collect::<Result<_>>()?;
        let adapters = self
            .adapters
            .iter()
            .enumerate()
            .map(|(i, a)| write(format!("adapter_{i}.erlb"), a))
            .collect::<Result<_>>()?;
        let manifest = Manifest {
            spec: self.spec,
            model: self.config(),
            backbones,
            heads,
            adapters,
        };
        let path = dir.join("ensemble.toml");
        let text = toml::to_string(&manifest)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Rebuilds an ensemble from a manifest written by [`Ensemble::save`].
    /// Checkpoint paths are resolved relative to the manifest.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let m: Manifest = toml::from_str(&text)?;
        m.spec.validate()?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let cfg = m.model;
        let mut rng = stream(0, "load");
        let mut backbones = Vec::new();
        for name in &m.backbones {
            let mut b = Backbone::new(cfg, &mut rng)?;
            checkpoint::load_into(&dir.join(name), &mut b)?;
            backbones.push(b);
        }
        let mut heads = Vec::new();
        for name in &m.heads {
            let mut h = RewardHead::new(cfg.d_model, &mut rng);
            checkpoint::load_into(&dir.join(name), &mut h)?;
            heads.push(h);
        }
        let mut adapters = Vec::new();
        for name in &m.adapters {
            let mut a = LoraSet::for_attention(&cfg, m.spec.lora, &mut rng)?;
            checkpoint::load_into(&dir.join(name), &mut a)?;
            adapters.push(a);
        }
        let expect_backbones = if m.spec.architecture == Architecture::Independent {
            m.spec.k
        } else {
            1
        };
        let expect_adapters = if m.spec.architecture == Architecture::Lora {
            m.spec.k
        } else {
            0
        };
        if backbones.len() != expect_backbones || heads.len() != m.spec.k || adapters.len() != expect_adapters {
            return Err(Error::Format(format!(
                "manifest lists {} backbones, {} heads, {} adapter sets for {} with k={}",
                backbones.len(),
                heads.len(),
                adapters.len(),
                m.spec.architecture,
                m.spec.k
            )));
        }
        if m.spec.architecture == Architecture::Lora {
            backbones[0].set_trainable(false);
        }
        Ok(Ensemble {
            spec: m.spec,
            backbones,
            heads,
            adapters,
        })
    }
}

/// Structured description of a saved ensemble.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(flatten)]
    pub spec: EnsembleSpec,
    pub model: TransformerConfig,
    pub backbones: Vec<String>,
    pub heads: Vec<String>,
    pub adapters: Vec<String>,
}

impl Parameters for Ensemble {
    fn visit(&self, f: &mut dyn FnMut(&str, &crate::autodiff::Tensor)) {
        let multi = self.backbones.len() > 1;
        for (i, b) in self.backbones.iter().enumerate() {
            b.visit(&mut |n, t| {
                if multi {
                    f(&format!("member{i}.{n}"), t)
                } else {
                    f(n, t)
                }
            });
        }
        for (i, h) in self.heads.iter().enumerate() {
            h.visit(&mut |n, t| f(&format!("member{i}.{n}"), t));
        }
        for (i, a) in self.adapters.iter().enumerate() {
            a.visit(&mut |n, t| f(&format!("member{i}.{n}"), t));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut crate::autodiff::Tensor)) {
        let multi = self.backbones.len() > 1;
        for (i, b) in self.backbones.iter_mut().enumerate() {
            b.visit_mut(&mut |n, t| {
                if multi {
                    f(&format!("member{i}.{n}"), t)
                } else {
                    f(n, t)
                }
            });
        }
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.visit_mut(&mut |n, t| f(&format!("member{i}.{n}"), t));
        }
        for (i, a) in self.adapters.iter_mut().enumerate() {
            a.visit_mut(&mut |n, t| f(&format!("member{i}.{n}"), t));
        }
    }
}
