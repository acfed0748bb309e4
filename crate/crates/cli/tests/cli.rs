use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use erlab_core::bench::MatrixSpec;
use erlab_core::ensemble::EnsembleKind;

fn erlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_erlab"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("failed to launch erlab")
}

fn ok(args: &[&str]) -> Output {
    let out = erlab(args);
    assert!(
        out.status.success(),
        "erlab {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_data(out: &Path) {
    ok(&["gen-data", "--pairs", "80", "--heldout", "20", "--out", path(out)]);
}

#[test]
fn help_succeeds_and_usage_errors_exit_with_two() {
    assert_eq!(erlab(&["--help"]).status.code(), Some(0));
    assert_eq!(erlab(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(erlab(&["gen-data", "--bogus"]).status.code(), Some(2));
    assert_eq!(erlab(&["train-reward", "--ensemble", "forest"]).status.code(), Some(2));
    assert_eq!(erlab(&["--threads", "0", "gen-data"]).status.code(), Some(2));
    assert_eq!(erlab(&["matrix", "--preset", "nope"]).status.code(), Some(2));
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    gen_data(&a);
    gen_data(&b);
    for f in [
        "phase1.jsonl",
        "phase2.jsonl",
        "heldout.jsonl",
        "config.toml",
        "hashes.txt",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn lora_without_pretraining_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_data(&data);
    let out = erlab(&[
        "train-reward",
        "--data",
        path(&data),
        "--ensemble",
        "lora",
        "--out",
        path(&dir.path().join("rm")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("pretrain"), "stderr: {err}");
}

#[test]
fn missing_inputs_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.erlb");
    let out = erlab(&[
        "evaluate",
        "--policy",
        path(&missing),
        "--out",
        path(&dir.path().join("e")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.erlb"));

    let out = erlab(&["--config", path(&dir.path().join("absent.toml")), "gen-data"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.toml"));
}

#[test]
fn full_pipeline_writes_its_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name);
    gen_data(&d("data"));
    ok(&[
        "train-reward",
        "--data",
        path(&d("data")),
        "--ensemble",
        "lora",
        "--k",
        "2",
        "--pretrain",
        "--out",
        path(&d("rm")),
    ]);
    for f in [
        "ensemble/ensemble.toml",
        "metrics.csv",
        "pretrain_metrics.csv",
        "hashes.txt",
    ] {
        assert!(d("rm").join(f).exists(), "missing {f}");
    }

    ok(&[
        "best-of-n",
        "--reward",
        path(&d("rm")),
        "--n",
        "2,4",
        "--prompts",
        "5",
        "--aggregation",
        "lcb",
        "--beta",
        "1",
        "--out",
        path(&d("bon")),
    ]);
    let metrics = fs::read_to_string(d("bon").join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3, "{metrics}");
    assert!(d("bon").join("selections_n4.jsonl").exists());

    ok(&[
        "ppo",
        "--reward",
        path(&d("rm")),
        "--steps",
        "2",
        "--eval-every",
        "1",
        "--eval-prompts",
        "5",
        "--out",
        path(&d("ppo")),
    ]);
    let checkpoints = fs::read_to_string(d("ppo").join("checkpoints.csv")).unwrap();
    assert_eq!(checkpoints.lines().count(), 4, "{checkpoints}");
    assert!(d("ppo").join("policy_step2.erlb").exists());

    let out = ok(&[
        "evaluate",
        "--policy",
        path(&d("ppo").join("policy.erlb")),
        "--prompts",
        "5",
        "--out",
        path(&d("eval")),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("gold reward"));
    assert!(d("eval").join("eval.csv").exists());
}

#[test]
fn matrix_config_and_preset_are_exclusive() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("m.toml");
    fs::write(&cfg, toml::to_string(&MatrixSpec::empty()).unwrap()).unwrap();
    let out = erlab(&["--config", path(&cfg), "matrix", "--preset", "paper-fig2"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn small_matrix_writes_consolidated_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = MatrixSpec::paper_fig2();
    spec.architectures = vec![EnsembleKind::None, EnsembleKind::Lora];
    spec.data.n_pairs = 200;
    spec.data.n_heldout = 50;
    spec.eval_prompts = 10;
    if let Some(b) = spec.bon.as_mut() {
        b.ns = vec![2, 4];
        b.prompts = 8;
        b.seeds = vec![0];
    }
    if let Some(p) = spec.ppo.as_mut() {
        p.seeds = vec![0];
        p.train_prompts = 40;
        p.config.total_steps = 2;
        p.config.eval_every = 1;
    }
    let cfg = dir.path().join("m.toml");
    fs::write(&cfg, toml::to_string(&spec).unwrap()).unwrap();
    let out = dir.path().join("run");
    ok(&["--config", path(&cfg), "matrix", "--out", path(&out)]);
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    let mut lines = results.lines();
    assert_eq!(
        lines.next().unwrap(),
        "architecture,aggregation,beta,algo,n_or_step,seed,proxy_reward,gold_reward,kl_to_ref"
    );
    // 2 architectures x (2 BoN sizes + 3 PPO checkpoints).
    assert_eq!(lines.count(), 10, "{results}");
    let failures = fs::read_to_string(out.join("failures.csv")).unwrap();
    assert_eq!(failures.lines().count(), 1, "{failures}");
    assert!(out.join("summary.csv").exists());
}
