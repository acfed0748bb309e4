//! `erlab`: generate synthetic preferences, train reward models and
//! ensembles, run Best-of-n and PPO against them, and run the experiment
//! matrix.
//!
//! Exit codes: 0 success, 2 usage error, 3 runtime failure.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "erlab", version, about = "Reward-model ensembles for RLHF at desk scale")]
struct Cli {
    /// TOML file with the subcommand's config; flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Worker threads for numeric work (1 keeps runs bitwise reproducible).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Output directory (default: $ERLAB_OUT/<subcommand>, or runs/<subcommand>).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample preference pairs from the reference policy, labeled by the gold reward.
    GenData(commands::GenDataArgs),
    /// Train a reward model or ensemble on generated pairs.
    TrainReward(commands::TrainRewardArgs),
    /// Best-of-n selection with a trained reward model.
    BestOfN(commands::BestOfNArgs),
    /// PPO fine-tuning of the reference policy against a trained reward model.
    Ppo(commands::PpoArgs),
    /// Gold reward of a policy's samples.
    Evaluate(commands::EvaluateArgs),
    /// Run an experiment matrix and write the consolidated results CSV.
    Matrix(commands::MatrixArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(2);
    }
    let ctx = commands::Context {
        config: cli.config,
        out: cli.out,
        threads: cli.threads,
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&ctx, a),
        Command::TrainReward(a) => commands::train_reward(&ctx, a),
        Command::BestOfN(a) => commands::best_of_n(&ctx, a),
        Command::Ppo(a) => commands::ppo(&ctx, a),
        Command::Evaluate(a) => commands::evaluate(&ctx, a),
        Command::Matrix(a) => commands::matrix(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
