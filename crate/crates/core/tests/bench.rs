use std::collections::HashSet;
use std::sync::OnceLock;

use erlab_core::bench::{
    evaluate_gold, evaluate_policy_gold, generate_preferences, prompt_set, EnvSpec, Environment, GoldReward, GoldSpec,
    SynthDatasetSpec, GOLD_BOUND,
};
use erlab_core::model::tokens::EOS;
use erlab_core::rl::{best_of_n, DecodeConfig};
use erlab_core::Token;
use proptest::prelude::*;

fn env() -> &'static Environment {
    static ENV: OnceLock<Environment> = OnceLock::new();
    ENV.get_or_init(|| Environment::build(EnvSpec::default()).unwrap())
}

fn data(n_pairs: usize, noise: f32) -> SynthDatasetSpec {
    SynthDatasetSpec {
        n_pairs,
        n_heldout: 200,
        noise,
        seed: 11,
        ..SynthDatasetSpec::default()
    }
}

#[test]
fn noiseless_labels_agree_with_gold() {
    let e = env();
    let s = generate_preferences(&data(1000, 0.0), &e.gold, &e.reference).unwrap();
    assert_eq!(s.flipped, 0);
    for p in s.train().iter().chain(&s.heldout) {
        assert!(e.gold.score(&p.prompt, &p.chosen) >= e.gold.score(&p.prompt, &p.rejected));
    }
}

#[test]
fn label_noise_flips_the_requested_fraction() {
    let e = env();
    let spec = SynthDatasetSpec {
        n_heldout: 0,
        ..data(10_000, 0.2)
    };
    let s = generate_preferences(&spec, &e.gold, &e.reference).unwrap();
    let frac = s.flipped as f32 / 10_000.0;
    assert!((frac - 0.2).abs() < 0.01, "flip fraction {frac}");
    // Every pair that disagrees with gold must be one of the flipped ones.
    let against = s
        .train()
        .iter()
        .filter(|p| e.gold.score(&p.prompt, &p.chosen) < e.gold.score(&p.prompt, &p.rejected))
        .count();
    assert!(against <= s.flipped);
}

#[test]
fn splits_are_disjoint_and_exhaustive() {
    let e = env();
    let spec = data(500, 0.15);
    let s = generate_preferences(&spec, &e.gold, &e.reference).unwrap();
    assert_eq!(s.phase1.len() + s.phase2.len(), 500);
    assert_eq!(s.phase1.len(), 300);
    assert_eq!(s.heldout.len(), 200);
    let key = |p: &erlab_core::preftrain::PreferencePair| {
        let (a, b) = if p.chosen <= p.rejected {
            (&p.chosen, &p.rejected)
        } else {
            (&p.rejected, &p.chosen)
        };
        (p.prompt.clone(), a.clone(), b.clone())
    };
    let mut seen = HashSet::new();
    for p in s.phase1.iter().chain(&s.phase2).chain(&s.heldout) {
        assert!(seen.insert(key(p)), "comparison appears twice");
    }
}

#[test]
fn generation_is_deterministic() {
    let e = env();
    let a = generate_preferences(&data(200, 0.15), &e.gold, &e.reference).unwrap();
    let b = generate_preferences(&data(200, 0.15), &e.gold, &e.reference).unwrap();
    assert_eq!(a.train(), b.train());
    assert_eq!(a.heldout, b.heldout);
}

fn tokens() -> impl Strategy<Value = Vec<Token>> {
    prop::collection::vec(0u32..64, 0..12)
}

proptest! {
    #[test]
    fn gold_is_deterministic_and_bounded(seed in 0u64..1000, prompt in tokens(), response in tokens()) {
        let spec = GoldSpec { seed, ..GoldSpec::default() };
        let (a, b) = (GoldReward::new(spec), GoldReward::new(spec));
        let s = a.score(&prompt, &response);
        prop_assert_eq!(s, b.score(&prompt, &response));
        prop_assert!(s.is_finite() && s.abs() <= GOLD_BOUND);
    }

    #[test]
    fn unterminated_responses_score_lower(prompt in tokens(), body in prop::collection::vec(3u32..64, 0..8)) {
        let g = GoldReward::new(GoldSpec::default());
        let mut ended = body.clone();
        ended.push(EOS);
        prop_assert!(g.score(&prompt, &ended) >= g.score(&prompt, &body));
    }
}

#[test]
fn gold_evaluation_is_repeatable_and_bounded() {
    let e = env();
    let ps = prompt_set(&e.spec.prompts, e.spec.policy.vocab_size, 100, 0, "eval");
    let decode = DecodeConfig::ppo();
    let a = evaluate_policy_gold(&e.reference, &e.gold, &ps, &decode).unwrap();
    let b = evaluate_policy_gold(&e.reference, &e.gold, &ps, &decode).unwrap();
    assert_eq!(a, b);
    assert!(a.mean.abs() <= GOLD_BOUND && a.stderr > 0.0);
}

#[test]
fn best_of_fifty_beats_the_reference_under_gold_selection() {
    let e = env();
    let ps = prompt_set(&e.spec.prompts, e.spec.policy.vocab_size, 100, 0, "bon");
    let decode = DecodeConfig::best_of_n();
    let base = evaluate_policy_gold(&e.reference, &e.gold, &ps, &decode).unwrap();
    let sel = best_of_n(&e.reference, &e.gold, &ps, 50, &decode).unwrap();
    let rs: Vec<Vec<Token>> = sel.into_iter().map(|s| s.response).collect();
    let best = evaluate_gold(&e.gold, &ps, &rs).unwrap();
    assert!(best.mean >= base.mean, "{best:?} vs {base:?}");
}

#[test]
fn mismatched_series_are_rejected() {
    let e = env();
    assert!(evaluate_gold(&e.gold, &[vec![3u32]], &Vec::<Vec<Token>>::new()).is_err());
}
