//! Bradley-Terry reward training for single models and all three ensemble
//! architectures, including the two-phase LoRA schedule.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameters, Tape, Tensor, Var};
use crate::ensemble::{member_seed, Architecture, Ensemble, EnsembleSpec, Init, Pretrained};
use crate::error::{Error, Result};
use crate::model::{last_hidden, tokens, Backbone, LoraSet, RewardHead, TokenBatch, TransformerConfig};
use crate::optim::{AdamW, LrSchedule, ScheduleKind};
use crate::rng::indexed_stream;
use crate::Token;

/// One preference record: `chosen` was preferred over `rejected`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: Vec<Token>,
    pub chosen: Vec<Token>,
    pub rejected: Vec<Token>,
}

impl PreferencePair {
    pub fn validate(&self) -> Result<()> {
        if self.prompt.is_empty() || self.chosen.is_empty() || self.rejected.is_empty() {
            return Err(Error::InvalidConfig("preference pair with an empty sequence".into()));
        }
        if self.chosen == self.rejected {
            return Err(Error::InvalidConfig("preference pair with identical responses".into()));
        }
        Ok(())
    }

    pub fn chosen_seq(&self) -> Vec<Token> {
        tokens::join(&self.prompt, &self.chosen)
    }

    pub fn rejected_seq(&self) -> Vec<Token> {
        tokens::join(&self.prompt, &self.rejected)
    }
}

pub fn write_jsonl(path: &Path, pairs: &[PreferencePair]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<PreferencePair>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PreferencePair = serde_json::from_str(&line)?;
        p.validate()?;
        out.push(p);
    }
    Ok(out)
}

/// `-log σ(r_w - r_l)`, computed as `softplus(r_l - r_w)`.
pub fn bt_loss(r_w: f32, r_l: f32) -> f32 {
    let z = (r_l - r_w) as f64;
    (z.max(0.0) + (-z.abs()).exp().ln_1p()) as f32
}

/// Batch mean of the Bradley-Terry loss over aligned reward vectors.
pub fn bt_loss_var(tape: &mut Tape, r_w: Var, r_l: Var) -> Result<Var> {
    let d = tape.sub(r_l, r_w)?;
    let l = tape.softplus(d);
    Ok(tape.mean(l))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub warmup_ratio: f32,
    pub schedule: ScheduleKind,
    pub grad_accum: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f32>,
    /// Held-out accuracy is measured every this many optimizer steps (and
    /// always at the end); 0 means only at the end.
    pub eval_every: usize,
    /// Members draw bootstrap resamples of the data instead of reshuffles.
    pub bootstrap: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 16,
            lr: 3e-4,
            weight_decay: 0.0,
            warmup_ratio: 0.03,
            schedule: ScheduleKind::Cosine,
            grad_accum: 2,
            seed: 0,
            max_grad_norm: Some(1.0),
            eval_every: 0,
            bootstrap: false,
        }
    }
}

impl TrainConfig {
    /// Adapter phase: constant schedule.
    pub fn lora_default() -> Self {
        TrainConfig {
            lr: 1e-3,
            schedule: ScheduleKind::Constant,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be >= 0, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::InvalidConfig(format!(
                "warmup ratio must be in [0, 1), got {}",
                self.warmup_ratio
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accum == 0 {
            return Err(Error::InvalidConfig(
                "epochs, batch size and grad accumulation must be >= 1".into(),
            ));
        }
        Ok(())
    }

    fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size * self.grad_accum)
    }
}

/// One metrics row: optimizer step, mean training loss over that step and,
/// at evaluation steps, held-out accuracy per member.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f32,
    pub accuracy: Option<Vec<f32>>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub rows: Vec<MetricRow>,
    /// Held-out accuracy per member after training.
    pub final_accuracy: Vec<f32>,
}

impl TrainReport {
    pub fn mean_accuracy(&self) -> f32 {
        self.final_accuracy.iter().sum::<f32>() / self.final_accuracy.len().max(1) as f32
    }

    /// Writes `step,loss,acc_0,..,acc_{k-1}`; accuracy cells are empty on
    /// rows without an evaluation.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let k = self.final_accuracy.len();
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["step".to_string(), "loss".to_string()];
        header.extend((0..k).map(|i| format!("accuracy_{i}")));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.step.to_string(), r.loss.to_string()];
            match &r.accuracy {
                Some(a) => rec.extend(a.iter().map(|x| x.to_string())),
                None => rec.extend((0..k).map(|_| String::new())),
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Merges reports of members trained one after another into a single
    /// step-aligned report (losses averaged, accuracies concatenated).
    fn merge(parts: Vec<TrainReport>) -> TrainReport {
        let n = parts.len().max(1) as f32;
        let mut rows: Vec<MetricRow> = Vec::new();
        for (pi, p) in parts.iter().enumerate() {
            for (ri, r) in p.rows.iter().enumerate() {
                if pi == 0 {
                    rows.push(MetricRow {
                        step: r.step,
                        loss: r.loss / n,
                        accuracy: r.accuracy.clone(),
                    });
                } else {
                    let row = &mut rows[ri];
                    row.loss += r.loss / n;
                    if let (Some(a), Some(b)) = (&mut row.accuracy, &r.accuracy) {
                        a.extend_from_slice(b);
                    }
                }
            }
        }
        TrainReport {
            rows,
            final_accuracy: parts.into_iter().flat_map(|p| p.final_accuracy).collect(),
        }
    }
}

/// Fraction of pairs each member ranks correctly, `r(x, y_w) > r(x, y_l)`.
pub fn pairwise_accuracy(ens: &Ensemble, data: &[PreferencePair]) -> Result<Vec<f32>> {
    if data.is_empty() {
        return Ok(vec![0.0; ens.k()]);
    }
    let seqs: Vec<Vec<Token>> = data
        .iter()
        .map(|p| p.chosen_seq())
        .chain(data.iter().map(|p| p.rejected_seq()))
        .collect();
    let r = ens.predict_batch(&seqs)?;
    let n = data.len();
    Ok(r.iter()
        .map(|m| (0..n).filter(|&j| m[j] > m[n + j]).count() as f32 / n as f32)
        .collect())
}

/// Trainable slice of an ensemble: either one member (backbone, head and
/// optional adapters) or a shared backbone with all heads.
enum Job<'a> {
    Member {
        backbone: &'a mut Backbone,
        head: &'a mut RewardHead,
        adapters: Option<&'a mut LoraSet>,
    },
    Shared {
        backbone: &'a mut Backbone,
        heads: &'a mut [RewardHead],
    },
}

impl Job<'_> {
    /// Mean Bradley-Terry loss of the micro-batch; for a shared backbone,
    /// the mean over member losses.
    fn loss(&self, tape: &mut Tape, batch: &[&PreferencePair]) -> Result<Var> {
        let n = batch.len();
        let seqs: Vec<Vec<Token>> = batch
            .iter()
            .map(|p| p.chosen_seq())
            .chain(batch.iter().map(|p| p.rejected_seq()))
            .collect();
        let (backbone, adapters): (&Backbone, Option<&LoraSet>) = match self {
            Job::Member { backbone, adapters, .. } => (backbone, adapters.as_deref()),
            Job::Shared { backbone, .. } => (backbone, None),
        };
        let cfg = &backbone.config;
        let tb = TokenBatch::new(&seqs, cfg.max_seq_len, cfg.vocab_size)?;
        let h = last_hidden(tape, backbone, adapters, &tb)?;
        let hw = tape.gather_rows(h, &(0..n).collect::<Vec<_>>())?;
        let hl = tape.gather_rows(h, &(n..2 * n).collect::<Vec<_>>())?;
        let one = |tape: &mut Tape, head: &RewardHead| -> Result<Var> {
            let rw = head.forward(tape, hw)?;
            let rl = head.forward(tape, hl)?;
            bt_loss_var(tape, rw, rl)
        };
        match self {
            Job::Member { head, .. } => one(tape, head),
            Job::Shared { heads, .. } => {
                let mut total: Option<Var> = None;
                for head in heads.iter() {
                    let l = one(tape, head)?;
                    total = Some(match total {
                        Some(t) => tape.add(t, l)?,
                        None => l,
                    });
                }
                let total = total.ok_or(Error::EmptyRewardSet)?;
                Ok(tape.scale(total, 1.0 / heads.len() as f32))
            }
        }
    }
}

impl Parameters for Job<'_> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            Job::Member {
                backbone,
                head,
                adapters,
            } => {
                backbone.visit(f);
                head.visit(f);
                if let Some(a) = adapters {
                    a.visit(f);
                }
            }
            Job::Shared { backbone, heads } => {
                backbone.visit(f);
                heads.iter().for_each(|h| h.visit(f));
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            Job::Member {
                backbone,
                head,
                adapters,
            } => {
                backbone.visit_mut(f);
                head.visit_mut(f);
                if let Some(a) = adapters {
                    a.visit_mut(f);
                }
            }
            Job::Shared { backbone, heads } => {
                backbone.visit_mut(f);
                heads.iter_mut().for_each(|h| h.visit_mut(f));
            }
        }
    }
}

/// Order in which one job sees the data, per epoch.
fn data_order(n: usize, epoch: usize, cfg: &TrainConfig, stream_seed: u64) -> Vec<usize> {
    let mut rng = indexed_stream(stream_seed, "shuffle", epoch as u64);
    if cfg.bootstrap {
        (0..n).map(|_| rng.random_range(0..n)).collect()
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx
    }
}

/// Runs the optimizer loop for one job. `eval` measures held-out accuracy
/// of the job's members.
fn run_job(
    job: &mut Job<'_>,
    data: &[PreferencePair],
    cfg: &TrainConfig,
    stream_seed: u64,
    eval: &mut dyn FnMut(&Job<'_>) -> Result<Vec<f32>>,
) -> Result<TrainReport> {
    let n = data.len();
    let per_epoch = cfg.steps_per_epoch(n);
    let sched = LrSchedule::from_ratio(cfg.lr, cfg.warmup_ratio, per_epoch * cfg.epochs, cfg.schedule);
    let mut opt = AdamW::new(cfg.weight_decay, cfg.max_grad_norm);
    let mut report = TrainReport::default();
    let mut step = 0;
    let mut last_norm = 0.0;
    let micro = cfg.batch_size;
    for epoch in 0..cfg.epochs {
        let order = data_order(n, epoch, cfg, stream_seed);
        for group in order.chunks(micro * cfg.grad_accum) {
            let lr = sched.lr(step);
            let chunks: Vec<&[usize]> = group.chunks(micro).collect();
            let mut loss_sum = 0.0f64;
            for idx in &chunks {
                let batch: Vec<&PreferencePair> = idx.iter().map(|&i| &data[i]).collect();
                let mut tape = Tape::new();
                let l = job.loss(&mut tape, &batch)?;
                let value = tape.item(l);
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step,
                        lr,
                        grad_norm: last_norm,
                    });
                }
                loss_sum += value as f64 * idx.len() as f64;
                // Weight each micro-batch by its share of the group so the
                // accumulated gradient is that of the group mean.
                let w = idx.len() as f32 / group.len() as f32;
                let scaled = tape.scale(l, w);
                tape.backward(scaled)?;
                job.collect_grads(&tape);
            }
            last_norm = opt.step(&mut [job as &mut dyn Parameters], lr);
            step += 1;
            let accuracy = if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
                Some(eval(job)?)
            } else {
                None
            };
            report.rows.push(MetricRow {
                step,
                loss: (loss_sum / group.len() as f64) as f32,
                accuracy,
            });
        }
    }
    report.final_accuracy = match report.rows.last() {
        Some(MetricRow { accuracy: Some(a), .. }) => a.clone(),
        _ => eval(job)?,
    };
    if let Some(last) = report.rows.last_mut() {
        last.accuracy = Some(report.final_accuracy.clone());
    }
    Ok(report)
}

/// Accuracy of a job's members on `heldout`.
fn job_accuracy(job: &Job<'_>, spec: EnsembleSpec, heldout: &[PreferencePair]) -> Result<Vec<f32>> {
    let ens = match job {
        Job::Member {
            backbone,
            head,
            adapters,
        } => Ensemble {
            spec: EnsembleSpec { k: 1, ..spec },
            backbones: vec![(**backbone).clone()],
            heads: vec![(**head).clone()],
            adapters: adapters.iter().map(|a| (**a).clone()).collect(),
        },
        Job::Shared { backbone, heads } => Ensemble {
            spec,
            backbones: vec![(**backbone).clone()],
            heads: heads.to_vec(),
            adapters: Vec::new(),
        },
    };
    pairwise_accuracy(&ens, heldout)
}

/// Trains every trainable parameter of the ensemble on `data`.
///
/// Independent and LoRA members train one after another on their own
/// shuffles (`seed ⊕ i`); a linear-layer ensemble trains its shared
/// backbone on the mean of the member losses.
pub fn train_reward_model(
    ens: &mut Ensemble,
    data: &[PreferencePair],
    heldout: &[PreferencePair],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyData("training"));
    }
    let spec = ens.spec;
    let mut eval = |job: &Job<'_>| job_accuracy(job, spec, heldout);
    match spec.architecture {
        Architecture::LinearLayer => {
            let mut job = Job::Shared {
                backbone: &mut ens.backbones[0],
                heads: &mut ens.heads,
            };
            run_job(&mut job, data, cfg, cfg.seed, &mut eval)
        }
        Architecture::Independent | Architecture::Lora => {
            let shared = ens.backbones.len() == 1;
            let mut parts = Vec::with_capacity(spec.k);
            let mut adapters = ens.adapters.iter_mut();
            let mut backbones = ens.backbones.iter_mut();
            let mut shared_backbone = if shared { backbones.next() } else { None };
            for (i, head) in ens.heads.iter_mut().enumerate() {
                let backbone: &mut Backbone = match shared_backbone.as_deref_mut() {
                    Some(b) => b,
                    None => backbones.next().ok_or(Error::EmptyData("backbones"))?,
                };
                let mut job = Job::Member {
                    backbone,
                    head,
                    adapters: adapters.next(),
                };
                parts.push(run_job(&mut job, data, cfg, member_seed(cfg.seed, i), &mut eval)?);
            }
            Ok(TrainReport::merge(parts))
        }
    }
}

/// First phase of the LoRA schedule: trains a fresh backbone with k heads
/// as a linear-layer ensemble on `phase1`, which must not share any pair
/// with `phase2`.
pub fn pretrain_backbone(
    config: TransformerConfig,
    phase1: &[PreferencePair],
    phase2: &[PreferencePair],
    heldout: &[PreferencePair],
    k: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Pretrained, TrainReport)> {
    if phase1.is_empty() {
        return Err(Error::EmptyData("phase-1"));
    }
    let seen: HashSet<&PreferencePair> = phase1.iter().collect();
    let overlap = phase2.iter().filter(|p| seen.contains(p)).count();
    if overlap > 0 {
        return Err(Error::PhaseOverlap(overlap));
    }
    let mut ens = Ensemble::build(
        EnsembleSpec::new(Architecture::LinearLayer, k),
        Init::Fresh(config),
        seed,
    )?;
    let report = train_reward_model(&mut ens, phase1, heldout, cfg)?;
    let Ensemble {
        mut backbones, heads, ..
    } = ens;
    Ok((
        Pretrained {
            backbone: backbones.remove(0),
            heads,
        },
        report,
    ))
}

/// Second phase: trains each member's adapters and head with the shared
/// backbone frozen.
pub fn train_lora_members(
    ens: &mut Ensemble,
    phase2: &[PreferencePair],
    heldout: &[PreferencePair],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if ens.spec.architecture != Architecture::Lora {
        return Err(Error::InvalidConfig(format!(
            "adapter training needs a lora ensemble, got {}",
            ens.spec.architecture
        )));
    }
    ens.backbones[0].set_trainable(false);
    train_reward_model(ens, phase2, heldout, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        assert!((bt_loss(0.3, 0.3) - std::f32::consts::LN_2).abs() < 1e-6);
        assert!(bt_loss(20.0, 0.0) < 1e-8);
        assert!((bt_loss(0.0, 20.0) - 20.0).abs() < 1e-5);
    }

    #[test]
    fn loss_var_matches_scalar() {
        let mut t = Tape::inference();
        let w = t.constant(vec![3], vec![0.5, -1.0, 3.0]).unwrap();
        let l = t.constant(vec![3], vec![0.0, 2.0, -1.0]).unwrap();
        let m = bt_loss_var(&mut t, w, l).unwrap();
        let expect = (bt_loss(0.5, 0.0) + bt_loss(-1.0, 2.0) + bt_loss(3.0, -1.0)) / 3.0;
        assert!((t.item(m) - expect).abs() < 1e-6);
    }

    #[test]
    fn pair_validation() {
        let p = PreferencePair {
            prompt: vec![3],
            chosen: vec![4],
            rejected: vec![4],
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let pairs = vec![PreferencePair {
            prompt: vec![3, 4],
            chosen: vec![5, 2],
            rejected: vec![6],
        }];
        write_jsonl(&path, &pairs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "{\"prompt\":[3,4],\"chosen\":[5,2],\"rejected\":[6]}\n");
        assert_eq!(read_jsonl(&path).unwrap(), pairs);
    }
}
