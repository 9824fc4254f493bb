use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cot_mdp::harness::{load_config, run_until, Stage};
use serde_json::json;

#[derive(Parser)]
#[command(name = "cot-mdp", version, about = "Chain-of-thought MDP experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate training and held-out task sets.
    GenTasks(RunArgs),
    /// Run self-taught rationale collection (after task generation and pretraining).
    Star(RunArgs),
    /// Train the process reward model.
    TrainPrm(RunArgs),
    /// Train the policy with group-relative policy optimization.
    TrainGrpo(RunArgs),
    /// Compare decoding strategies on the held-out set.
    DecodeEval(RunArgs),
    /// Run every enabled stage.
    Pipeline(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(stage: Stage, args: &RunArgs) -> cot_mdp::Result<serde_json::Value> {
    let mut loaded = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        loaded = loaded.with_seed(seed);
    }
    if let Some(out) = &args.out {
        loaded = loaded.with_output_dir(out);
    }
    let manifest = run_until(&loaded, stage)?;
    Ok(json!({
        "status": "ok",
        "stage": stage.name(),
        "out": loaded.config.output_dir,
        "config_sha256": manifest.config_sha256,
    }))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (stage, args) = match &cli.command {
        Command::GenTasks(a) => (Stage::GenTasks, a),
        Command::Star(a) => (Stage::Star, a),
        Command::TrainPrm(a) => (Stage::TrainPrm, a),
        Command::TrainGrpo(a) => (Stage::Grpo, a),
        Command::DecodeEval(a) => (Stage::DecodeEval, a),
        Command::Pipeline(a) => (Stage::DecodeEval, a),
    };
    match run(stage, args) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            println!(
                "{}",
                json!({ "status": "error", "kind": e.kind(), "message": e.to_string() })
            );
            ExitCode::FAILURE
        }
    }
}
