use std::sync::OnceLock;

use erlab_core::autodiff::Parameters;
use erlab_core::bench::{prompt_set, EnvSpec, Environment, GoldEval};
use erlab_core::ensemble::{Ensemble, EnsembleSpec, Init};
use erlab_core::model::TransformerConfig;
use erlab_core::rl::{
    best_of_n, candidate_key, draw_candidates, ppo_train, sample, DecodeConfig, FnScorer, PpoConfig, PpoEnv,
    RewardScorer,
};
use erlab_core::Token;

fn env() -> &'static Environment {
    static ENV: OnceLock<Environment> = OnceLock::new();
    ENV.get_or_init(|| Environment::build(EnvSpec::default()).unwrap())
}

fn prompts(n: usize, label: &str) -> Vec<Vec<Token>> {
    let e = env();
    prompt_set(&e.spec.prompts, e.spec.policy.vocab_size, n, 0, label)
}

fn gold_of(prompts: &[Vec<Token>], responses: &[Vec<Token>]) -> GoldEval {
    erlab_core::bench::evaluate_gold(&env().gold, prompts, responses).unwrap()
}

#[test]
fn greedy_decoding_ignores_the_key() {
    let e = env();
    let cfg = DecodeConfig {
        greedy: true,
        ..DecodeConfig::best_of_n()
    };
    for p in prompts(5, "greedy") {
        let a = sample(&e.reference, &p, &cfg, 1).unwrap();
        let b = sample(&e.reference, &p, &cfg, 99).unwrap();
        assert_eq!(a.response, b.response);
    }
}

#[test]
fn sampling_is_a_function_of_the_key() {
    let e = env();
    let p = &prompts(1, "key")[0];
    let cfg = DecodeConfig::best_of_n();
    let a = sample(&e.reference, p, &cfg, 7).unwrap();
    let b = sample(&e.reference, p, &cfg, 7).unwrap();
    assert_eq!(a, b);
    let distinct: std::collections::HashSet<Vec<Token>> = (0..20)
        .map(|k| sample(&e.reference, p, &cfg, k).unwrap().response)
        .collect();
    assert!(distinct.len() > 1);
}

#[test]
fn best_of_one_is_the_first_candidate() {
    let e = env();
    let ps = prompts(10, "bo1");
    let cfg = DecodeConfig::best_of_n();
    let sel = best_of_n(&e.reference, &e.gold, &ps, 1, &cfg).unwrap();
    for (i, (p, s)) in ps.iter().zip(&sel).enumerate() {
        assert_eq!(s.index, 0);
        assert_eq!(
            s.response,
            sample(&e.reference, p, &cfg, candidate_key(i, 0)).unwrap().response
        );
    }
}

#[test]
fn constant_reward_picks_the_first_candidate() {
    let e = env();
    let ps = prompts(10, "const");
    let flat = FnScorer(|_: &[Token], _: &[Token]| 1.0);
    let sel = best_of_n(&e.reference, &flat, &ps, 8, &DecodeConfig::best_of_n()).unwrap();
    assert!(sel.iter().all(|s| s.index == 0));
}

#[test]
fn selection_is_the_maximum_under_rescoring() {
    let e = env();
    let ps = prompts(20, "max");
    let cfg = DecodeConfig::best_of_n();
    let n = 16;
    let sel = best_of_n(&e.reference, &e.gold, &ps, n, &cfg).unwrap();
    let cands = draw_candidates(&e.reference, &ps, n, &cfg).unwrap();
    for ((p, s), c) in ps.iter().zip(&sel).zip(&cands) {
        let best = c
            .iter()
            .map(|x| e.gold.score(p, &x.response))
            .fold(f32::NEG_INFINITY, f32::max);
        assert_eq!(s.score, best);
        assert_eq!(e.gold.score(p, &s.response), best);
    }
}

#[test]
fn candidates_are_prefix_stable_in_n() {
    let e = env();
    let ps = prompts(5, "prefix");
    let cfg = DecodeConfig::best_of_n();
    let small = draw_candidates(&e.reference, &ps, 4, &cfg).unwrap();
    let large = draw_candidates(&e.reference, &ps, 12, &cfg).unwrap();
    for (s, l) in small.iter().zip(&large) {
        assert_eq!(s.as_slice(), &l[..4]);
    }
}

#[test]
fn more_candidates_raise_gold_reward() {
    let e = env();
    let ps = prompts(100, "bon-n");
    let mut means = Vec::new();
    for n in [1, 10, 50] {
        let per_seed: Vec<f32> = (0..3)
            .map(|seed| {
                let cfg = DecodeConfig {
                    seed,
                    ..DecodeConfig::best_of_n()
                };
                let sel = best_of_n(&e.reference, &e.gold, &ps, n, &cfg).unwrap();
                let rs: Vec<Vec<Token>> = sel.into_iter().map(|s| s.response).collect();
                gold_of(&ps, &rs).mean
            })
            .collect();
        means.push(GoldEval::from_values(&per_seed));
    }
    assert!(means[2].mean > means[0].mean, "{means:?}");
    for w in means.windows(2) {
        assert!(w[1].mean >= w[0].mean - w[0].stderr.max(w[1].stderr), "{means:?}");
    }
}

fn short_ppo(kl_coef: f32, steps: usize, seed: u64) -> PpoConfig {
    PpoConfig {
        kl_coef,
        total_steps: steps,
        eval_every: steps,
        seed,
        ..PpoConfig::default()
    }
}

fn ppo_env<'a>(reward: &'a dyn RewardScorer, train: &'a [Vec<Token>], eval: &'a [Vec<Token>]) -> PpoEnv<'a> {
    let e = env();
    PpoEnv {
        reference: &e.reference,
        reward,
        gold: Some(&e.gold),
        train_prompts: train,
        eval_prompts: eval,
    }
}

#[test]
fn strong_kl_penalty_holds_the_policy_at_the_reference() {
    let e = env();
    let (train, eval) = (prompts(200, "ppo-train"), prompts(50, "ppo-eval"));
    let run = |kl: f32| {
        let mut policy = e.reference.clone();
        ppo_train(&mut policy, &ppo_env(&e.gold, &train, &eval), &short_ppo(kl, 40, 0)).unwrap()
    };
    let tight = run(100.0);
    let loose = run(0.0);
    let kl = |r: &erlab_core::rl::PpoReport| r.checkpoints.last().unwrap().kl_to_ref;
    assert!(kl(&tight).abs() < 0.1, "kl {}", kl(&tight));
    assert!(kl(&loose) > kl(&tight), "{} vs {}", kl(&loose), kl(&tight));
}

#[test]
fn ppo_leaves_reference_and_reward_untouched() {
    let e = env();
    let (train, eval) = (prompts(100, "ppo-train"), prompts(20, "ppo-eval"));
    let rm = Ensemble::build(EnsembleSpec::single(), Init::Fresh(TransformerConfig::default()), 3).unwrap();
    let (ref_sum, rm_sum) = (e.reference.checksum(), rm.checksum());
    let mut policy = e.reference.clone();
    ppo_train(&mut policy, &ppo_env(&rm, &train, &eval), &short_ppo(0.02, 5, 0)).unwrap();
    assert_eq!(e.reference.checksum(), ref_sum);
    assert_eq!(rm.checksum(), rm_sum);
    assert_ne!(policy.checksum(), ref_sum);
}

#[test]
fn ppo_is_deterministic_and_checkpoints_on_schedule() {
    let e = env();
    let (train, eval) = (prompts(100, "ppo-train"), prompts(20, "ppo-eval"));
    let cfg = PpoConfig {
        total_steps: 6,
        eval_every: 3,
        ..PpoConfig::default()
    };
    let run = || {
        let mut policy = e.reference.clone();
        let r = ppo_train(&mut policy, &ppo_env(&e.gold, &train, &eval), &cfg).unwrap();
        (r, policy.checksum())
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(sa, sb);
    assert_eq!(a.steps, b.steps);
    let steps: Vec<usize> = a.checkpoints.iter().map(|c| c.step).collect();
    assert_eq!(steps, [0, 3, 6]);
    // The step-0 checkpoint is the reference itself.
    assert_eq!(a.checkpoints[0].kl_to_ref, 0.0);
}

#[test]
fn kl_ceiling_stops_training() {
    let e = env();
    let (train, eval) = (prompts(100, "ppo-train"), prompts(20, "ppo-eval"));
    let cfg = PpoConfig {
        kl_ceiling: -1.0,
        ..short_ppo(0.02, 50, 0)
    };
    let mut policy = e.reference.clone();
    let r = ppo_train(&mut policy, &ppo_env(&e.gold, &train, &eval), &cfg).unwrap();
    assert!(r.early_stop.is_some());
    assert!(r.steps.len() < 50);
}

#[test]
fn proxy_reward_rises_over_the_first_hundred_steps() {
    let e = env();
    let (train, eval) = (prompts(1000, "ppo-train"), prompts(20, "ppo-eval"));
    let slopes: Vec<f32> = (0..5)
        .map(|seed| {
            let mut policy = e.reference.clone();
            let r = ppo_train(
                &mut policy,
                &ppo_env(&e.gold, &train, &eval),
                &short_ppo(0.02, 100, seed),
            )
            .unwrap();
            let window = |s: &[erlab_core::rl::PpoStep]| s.iter().map(|x| x.proxy_reward).sum::<f32>() / s.len() as f32;
            window(&r.steps[80..]) - window(&r.steps[..20])
        })
        .collect();
    let mean = slopes.iter().sum::<f32>() / slopes.len() as f32;
    assert!(mean > 0.0, "{slopes:?}");
}
