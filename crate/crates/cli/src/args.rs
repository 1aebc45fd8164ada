use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use spcl_core::model::{Architecture, LambdaFactor};
use spcl_core::pcl::{OptimizerKind, TrainMode};

#[derive(Parser, Debug)]
#[command(name = "spcl", version, about = "Sparse-regularized MDP solver, PCL trainer and invariant checker")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Solve a tabular MDP exactly and report the sub-optimality bounds.
    Solve(SolveArgs),
    /// Train with path consistency learning on a task grid.
    Train(TrainArgs),
    /// Evaluate a checkpoint, dump a trajectory, or replay a dump.
    Eval(EvalArgs),
    /// Run invariant suites against independent oracles.
    Check(CheckArgs),
}

fn parse_arch(s: &str) -> Result<String, String> {
    s.parse::<Architecture>().map(|a| a.to_string()).map_err(|e| e.to_string())
}

fn parse_kind(s: &str) -> Result<String, String> {
    s.parse::<spcl_core::mdp::BackupKind>().map(|k| k.to_string()).map_err(|e| e.to_string())
}

fn parse_task(s: &str) -> Result<String, String> {
    match s {
        "bandit" | "mdp" => Ok(s.to_string()),
        _ => s
            .parse::<spcl_core::envs::TapeKind>()
            .map(|k| k.to_string())
            .map_err(|_| format!("unknown task `{s}`; expected a tape task, bandit or mdp")),
    }
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
pub struct SolveArgs {
    /// MDP file (JSON).
    #[arg(long)]
    pub mdp: PathBuf,

    /// Backup operator: max, soft or sparse.
    #[arg(long, default_value = "sparse", value_parser = parse_kind)]
    pub kind: String,

    /// Regularization coefficient.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,

    /// Sup-norm residual at which value iteration stops.
    #[arg(long, default_value = "1e-10")]
    pub tol: f64,

    #[arg(long, default_value_t = 1_000_000)]
    pub max_iters: usize,

    #[arg(long, default_value = "spcl-out/solve")]
    pub out: PathBuf,

    /// Flat key=value file; keys are long flag names.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

/// Environment selection shared by train and eval.
#[derive(Args, Debug, Serialize, Clone)]
pub struct TaskArgs {
    /// Smallest tape input length.
    #[arg(long, default_value_t = 1)]
    pub min_len: usize,

    /// Largest tape input length.
    #[arg(long, default_value_t = 5)]
    pub max_len: usize,

    /// MDP file for `--task mdp`.
    #[arg(long)]
    pub mdp: Option<PathBuf>,

    /// Episode horizon for bandit and mdp tasks.
    #[arg(long, default_value_t = 20)]
    pub horizon: usize,

    /// Arm rewards for `--task bandit`.
    #[arg(long, value_delimiter = ',', default_value = "1,0")]
    pub bandit_rewards: Vec<f64>,
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    /// Tasks (comma list): copy, duplicated-input, repeat-copy, reverse, reversed-addition, bandit, mdp.
    #[arg(long, value_delimiter = ',', default_value = "copy", value_parser = parse_task)]
    pub task: Vec<String>,

    /// Tape vocabulary sizes (comma list).
    #[arg(long, value_delimiter = ',', default_value = "5")]
    pub vocab: Vec<usize>,

    /// Training modes (comma list): sparse, soft, unified_sparse.
    #[arg(long, value_delimiter = ',', default_value = "sparse")]
    pub mode: Vec<TrainMode>,

    #[command(flatten)]
    pub env: TaskArgs,

    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,

    #[arg(long, default_value_t = 0.9)]
    pub gamma: f64,

    /// Sub-trajectory length d.
    #[arg(long, default_value_t = 10)]
    pub rollout: usize,

    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,

    #[arg(long, default_value_t = OptimizerKind::Sgd)]
    pub optimizer: OptimizerKind,

    /// Replay buffer capacity in episodes.
    #[arg(long, default_value_t = 10_000)]
    pub capacity: usize,

    /// Training iterations.
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,

    /// Stop once this many environment steps were taken.
    #[arg(long)]
    pub max_env_steps: Option<u64>,

    /// On-policy episodes per iteration.
    #[arg(long, default_value_t = 10)]
    pub batch: usize,

    /// Replayed episodes per iteration.
    #[arg(long, default_value_t = 10)]
    pub replay_batch: usize,

    /// Replay priority temperature.
    #[arg(long, default_value_t = 0.5)]
    pub priority: f64,

    /// Disable the replay buffer.
    #[arg(long)]
    pub no_replay: bool,

    #[arg(long, default_value_t = 50)]
    pub max_episode_len: usize,

    /// Observation/action history length fed to the model.
    #[arg(long, default_value_t = 4)]
    pub window: usize,

    /// tabular, linear, or mlp:HxH[:tanh|relu].
    #[arg(long, default_value = "tabular", value_parser = parse_arch)]
    pub arch: String,

    #[arg(long, default_value_t = LambdaFactor::PerAction)]
    pub lambda_factor: LambdaFactor,

    /// First seed.
    #[arg(long, env = "SPCL_SEED", default_value_t = 0)]
    pub seed: u64,

    /// Number of consecutive seeds starting at `--seed`.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,

    /// Sampled evaluation episodes after training.
    #[arg(long, default_value_t = 100)]
    pub eval_episodes: usize,

    /// Worker threads for grid runs (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub threads: usize,

    #[arg(long, default_value = "spcl-out/train")]
    pub out: PathBuf,

    /// Flat key=value file; keys are long flag names.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    /// Model checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,

    #[arg(long, default_value = "copy", value_parser = parse_task)]
    pub task: String,

    #[arg(long, default_value_t = 5)]
    pub vocab: usize,

    #[command(flatten)]
    pub env: TaskArgs,

    /// Discount used by `--task bandit`.
    #[arg(long, default_value_t = 0.9)]
    pub gamma: f64,

    #[arg(long, default_value_t = 100)]
    pub episodes: usize,

    #[arg(long, default_value_t = 50)]
    pub max_episode_len: usize,

    /// Take the most likely action instead of sampling.
    #[arg(long)]
    pub greedy: bool,

    #[arg(long, env = "SPCL_SEED", default_value_t = 0)]
    pub seed: u64,

    /// Write one episode (seeded by `--seed`) as a trajectory dump.
    #[arg(long)]
    pub dump: Option<PathBuf>,

    /// Re-execute a trajectory dump and verify it reproduces exactly.
    #[arg(long)]
    pub replay: Option<PathBuf>,

    #[arg(long, default_value = "spcl-out/eval")]
    pub out: PathBuf,

    /// Flat key=value file; keys are long flag names.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Operators,
    Mdp,
    Consistency,
    Gradients,
    All,
}

#[derive(Args, Debug, Serialize)]
#[command(args_override_self = true)]
pub struct CheckArgs {
    /// Suite to run.
    #[arg(value_enum, default_value_t = Suite::All)]
    pub suite: Suite,

    /// Random instances per check.
    #[arg(long, default_value_t = 50)]
    pub trials: usize,

    #[arg(long, env = "SPCL_SEED", default_value_t = 0)]
    pub seed: u64,

    #[arg(long, default_value = "spcl-out/check")]
    pub out: PathBuf,

    /// Flat key=value file; keys are long flag names.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}
