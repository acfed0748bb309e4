use erlab_core::autodiff::{grad_check, Parameters, Tape, Tensor};
use erlab_core::ensemble::{Architecture, Ensemble, EnsembleSpec, Init};
use erlab_core::model::tokens::{EOS, FIRST_CONTENT};
use erlab_core::model::TransformerConfig;
use erlab_core::optim::ScheduleKind;
use erlab_core::preftrain::{
    bt_loss, bt_loss_var, pairwise_accuracy, pretrain_backbone, read_jsonl, train_lora_members, train_reward_model,
    write_jsonl, PreferencePair, TrainConfig,
};
use erlab_core::rng::stream;
use erlab_core::{Error, Token};
use proptest::prelude::*;
use rand::Rng;

const GOOD: Token = 10;
const BAD: Token = 11;

/// Pairs whose chosen response contains `GOOD` and rejected contains `BAD`,
/// around random filler that never uses either token.
fn separable(n: usize, seed: u64) -> Vec<PreferencePair> {
    let mut rng = stream(seed, "separable");
    let mut filler = |len: usize| -> Vec<Token> {
        (0..len)
            .map(|_| loop {
                let t = rng.random_range(FIRST_CONTENT..64);
                if t != GOOD && t != BAD {
                    break t;
                }
            })
            .collect()
    };
    (0..n)
        .map(|_| {
            let prompt = filler(3);
            let mut chosen = filler(2);
            let mut rejected = filler(2);
            chosen.insert(1, GOOD);
            rejected.insert(1, BAD);
            chosen.push(EOS);
            rejected.push(EOS);
            PreferencePair {
                prompt,
                chosen,
                rejected,
            }
        })
        .collect()
}

fn small() -> TransformerConfig {
    TransformerConfig {
        d_model: 32,
        ..TransformerConfig::default()
    }
}

fn fast() -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        batch_size: 8,
        grad_accum: 1,
        ..TrainConfig::default()
    }
}

proptest! {
    #[test]
    fn loss_is_translation_invariant(a in -20.0f32..20.0, b in -20.0f32..20.0, c in -20.0f32..20.0) {
        prop_assert!((bt_loss(a + c, b + c) - bt_loss(a, b)).abs() < 1e-4);
    }

    #[test]
    fn swapped_losses_sum_to_at_least_two_ln2(a in -20.0f32..20.0, b in -20.0f32..20.0) {
        prop_assert!(bt_loss(a, b) + bt_loss(b, a) >= 2.0 * std::f32::consts::LN_2 - 1e-5);
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    // One check per pair over x = [r_w, r_l]. Rewards in [-2, 2] keep every
    // derivative above sigmoid(-4), well clear of f32 difference noise.
    let mut rng = stream(0, "bt-grad");
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let x = Tensor::uniform(&[2, 1], -2.0, 2.0, &mut rng);
        let err = grad_check(
            |tape: &mut Tape, x| {
                let w = tape.gather_rows(x, &[0])?;
                let l = tape.gather_rows(x, &[1])?;
                bt_loss_var(tape, w, l)
            },
            &x,
            1e-2,
        )
        .unwrap();
        worst = worst.max(err);
    }
    assert!(worst < 1e-3, "relative error {worst}");
}

#[test]
fn separable_pairs_are_learned_in_one_epoch() {
    let data = separable(200, 1);
    let held = separable(200, 2);
    let mut ens = Ensemble::build(EnsembleSpec::single(), Init::Fresh(small()), 0).unwrap();
    let report = train_reward_model(&mut ens, &data, &held, &fast()).unwrap();
    assert!(report.final_accuracy[0] > 0.9, "accuracy {:?}", report.final_accuracy);
}

#[test]
fn linear_ensemble_members_each_learn() {
    let data = separable(400, 3);
    let held = separable(200, 4);
    let mut ens = Ensemble::build(EnsembleSpec::new(Architecture::LinearLayer, 3), Init::Fresh(small()), 0).unwrap();
    train_reward_model(&mut ens, &data, &held, &fast()).unwrap();
    let acc = pairwise_accuracy(&ens, &held).unwrap();
    assert_eq!(acc.len(), 3);
    assert!(acc.iter().all(|&a| a > 0.8), "member accuracy {acc:?}");
}

#[test]
fn gradient_accumulation_matches_a_larger_batch() {
    let data = separable(64, 5);
    let base = TrainConfig {
        lr: 1e-3,
        schedule: ScheduleKind::Constant,
        warmup_ratio: 0.0,
        ..TrainConfig::default()
    };
    let accum = TrainConfig {
        batch_size: 4,
        grad_accum: 2,
        ..base
    };
    let plain = TrainConfig {
        batch_size: 8,
        grad_accum: 1,
        ..base
    };
    let build = || Ensemble::build(EnsembleSpec::single(), Init::Fresh(small()), 7).unwrap();
    let (mut a, mut b) = (build(), build());
    train_reward_model(&mut a, &data, &[], &accum).unwrap();
    train_reward_model(&mut b, &data, &[], &plain).unwrap();
    let mut pa = Vec::new();
    a.visit(&mut |_, t| pa.extend_from_slice(t.data()));
    let mut i = 0;
    // A shift of every reward cancels in the loss, so the final layer-norm
    // bias and the head bias have exactly zero gradient. What they get is
    // rounding noise, which Adam scales up to about lr per step.
    let invariant = |name: &str| name.ends_with("ln_f.bias") || name.ends_with("head.bias");
    let mut worst = 0.0f32;
    b.visit(&mut |name, t| {
        for &x in t.data() {
            if !invariant(name) {
                worst = worst.max((x - pa[i]).abs());
            }
            i += 1;
        }
    });
    assert!(worst < 1e-4, "max parameter difference {worst}");
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = separable(32, 6);
    let mut ens = Ensemble::build(EnsembleSpec::new(Architecture::Independent, 2), Init::Fresh(small()), 1).unwrap();
    let before = ens.checksum();
    let cfg = TrainConfig { lr: 0.0, ..fast() };
    train_reward_model(&mut ens, &data, &[], &cfg).unwrap();
    assert_eq!(ens.checksum(), before);
}

#[test]
fn exploding_learning_rate_aborts_with_diagnostics() {
    let data = separable(64, 7);
    let mut ens = Ensemble::build(EnsembleSpec::single(), Init::Fresh(small()), 1).unwrap();
    let cfg = TrainConfig {
        lr: 1e30,
        max_grad_norm: None,
        warmup_ratio: 0.0,
        ..fast()
    };
    match train_reward_model(&mut ens, &data, &[], &cfg) {
        Err(Error::NonFiniteLoss { step, .. }) => assert!(step > 0),
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}

#[test]
fn empty_inputs_are_rejected() {
    let mut ens = Ensemble::build(EnsembleSpec::single(), Init::Fresh(small()), 1).unwrap();
    assert!(train_reward_model(&mut ens, &[], &[], &fast()).is_err());
    let p2 = separable(8, 1);
    assert!(matches!(
        pretrain_backbone(small(), &[], &p2, &[], 2, &fast(), 0),
        Err(Error::EmptyData(_))
    ));
}

#[test]
fn overlapping_phases_are_rejected() {
    let data = separable(16, 1);
    let r = pretrain_backbone(small(), &data[..10], &data[8..], &[], 2, &fast(), 0);
    assert!(matches!(r, Err(Error::PhaseOverlap(2))));
}

#[test]
fn lora_phase_keeps_backbone_frozen_and_members_independent() {
    let data = separable(300, 8);
    let (p1, p2) = data.split_at(180);
    let held = separable(100, 9);
    let (pre, _) = pretrain_backbone(small(), p1, p2, &held, 2, &fast(), 0).unwrap();
    let one_head = erlab_core::ensemble::Pretrained {
        backbone: pre.backbone.clone(),
        heads: pre.heads[..1].to_vec(),
    };
    let backbone_sum = pre.backbone.checksum();

    let cfg = TrainConfig::lora_default();
    let mut two = Ensemble::build(EnsembleSpec::new(Architecture::Lora, 2), Init::Pretrained(pre), 4).unwrap();
    train_lora_members(&mut two, p2, &held, &cfg).unwrap();
    assert_eq!(two.backbones[0].checksum(), backbone_sum);

    // Member 0 of a two-member run equals a one-member run with the same
    // seed, so training member 1 cannot have touched it.
    let mut one = Ensemble::build(EnsembleSpec::new(Architecture::Lora, 1), Init::Pretrained(one_head), 4).unwrap();
    train_lora_members(&mut one, p2, &held, &cfg).unwrap();
    assert_eq!(two.adapters[0].checksum(), one.adapters[0].checksum());
    assert_eq!(two.heads[0].checksum(), one.heads[0].checksum());
    assert_ne!(two.adapters[0].checksum(), two.adapters[1].checksum());
}

#[test]
fn adapter_training_requires_a_lora_ensemble() {
    let mut ens = Ensemble::build(EnsembleSpec::single(), Init::Fresh(small()), 1).unwrap();
    assert!(train_lora_members(&mut ens, &separable(8, 1), &[], &fast()).is_err());
}

#[test]
fn single_head_pretraining_is_plain_training() {
    let data = separable(120, 10);
    let held = separable(40, 11);
    let (pre, _) = pretrain_backbone(small(), &data, &[], &held, 1, &fast(), 3).unwrap();
    let mut plain = Ensemble::build(EnsembleSpec::single(), Init::Fresh(small()), 3).unwrap();
    train_reward_model(&mut plain, &data, &held, &fast()).unwrap();
    assert_eq!(pre.backbone.checksum(), plain.backbones[0].checksum());
    assert_eq!(pre.heads[0].checksum(), plain.heads[0].checksum());
}

#[test]
fn jsonl_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pairs.jsonl");
    let data = separable(20, 12);
    write_jsonl(&path, &data).unwrap();
    assert_eq!(read_jsonl(&path).unwrap(), data);
}

#[test]
fn train_config_toml_round_trip() {
    let cfg = TrainConfig {
        max_grad_norm: None,
        ..TrainConfig::lora_default()
    };
    let text = toml::to_string(&cfg).unwrap();
    assert_eq!(toml::from_str::<TrainConfig>(&text).unwrap(), cfg);
}
