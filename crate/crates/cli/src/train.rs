use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use spcl_core::envs::{bandit_mdp, Environment, TabularEnv, TapeConfig, TapeEnv, TapeKind};
use spcl_core::mdp::TabularMdp;
use spcl_core::pcl::{IterationMetrics, TrainMode, Trainer, TrainerConfig};

use crate::args::{TaskArgs, TrainArgs};
use crate::config::write_resolved;
use crate::{CliError, RunLog};

pub type BoxedEnv = Box<dyn Environment>;

/// Builds the environment for a task name; `vocab` only matters for tape tasks.
pub fn make_env(task: &str, vocab: usize, env: &TaskArgs, gamma: f64) -> Result<BoxedEnv, CliError> {
    match task {
        "bandit" => {
            let mdp = bandit_mdp(&env.bandit_rewards, gamma)?;
            Ok(Box::new(TabularEnv::new(mdp, env.horizon)?))
        }
        "mdp" => {
            let path = env
                .mdp
                .as_ref()
                .ok_or_else(|| CliError::Usage("--task mdp needs --mdp FILE".into()))?;
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read `{}`: {e}", path.display())))?;
            let mdp = TabularMdp::<f64>::from_json(&text)?;
            Ok(Box::new(TabularEnv::new(mdp, env.horizon)?))
        }
        other => {
            let kind: TapeKind = other.parse()?;
            let cfg = TapeConfig::new(kind, vocab, env.min_len, env.max_len)?;
            Ok(Box::new(TapeEnv::new(cfg)))
        }
    }
}

pub fn is_tape(task: &str) -> bool {
    task.parse::<TapeKind>().is_ok()
}

/// One point of the training grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub task: String,
    pub vocab: Option<usize>,
    pub mode: TrainMode,
    pub seed: u64,
}

impl Cell {
    pub fn label(&self) -> String {
        match self.vocab {
            Some(v) => format!("{}-v{v}-{}", self.task, self.mode),
            None => format!("{}-{}", self.task, self.mode),
        }
    }
}

pub fn grid(args: &TrainArgs) -> Vec<Cell> {
    let mut cells = Vec::new();
    for task in &args.task {
        let vocabs: Vec<Option<usize>> = if is_tape(task) {
            args.vocab.iter().map(|&v| Some(v)).collect()
        } else {
            vec![None]
        };
        for vocab in vocabs {
            for &mode in &args.mode {
                for seed in args.seed..args.seed + args.seeds {
                    cells.push(Cell {
                        task: task.clone(),
                        vocab,
                        mode,
                        seed,
                    });
                }
            }
        }
    }
    cells
}

pub fn trainer_config(args: &TrainArgs, mode: TrainMode, seed: u64) -> Result<TrainerConfig, CliError> {
    Ok(TrainerConfig {
        alpha: args.alpha,
        gamma: args.gamma,
        rollout: args.rollout,
        learning_rate: args.lr,
        capacity: args.capacity,
        iterations: args.steps,
        batch_episodes: args.batch,
        replay_batch: args.replay_batch,
        mode,
        seed,
        priority_temperature: args.priority,
        replay: !args.no_replay,
        optimizer: args.optimizer,
        max_episode_len: args.max_episode_len,
        window: args.window,
        arch: args.arch.parse()?,
        lambda_factor: args.lambda_factor,
        max_env_steps: args.max_env_steps,
    })
}

/// Final numbers of one grid cell.
#[derive(Clone, Debug)]
pub struct CellResult {
    pub cell: Cell,
    pub n_actions: usize,
    pub iterations: usize,
    pub env_steps: u64,
    /// Mean training reward over the last tenth of iterations.
    pub final_avg_reward: Option<f64>,
    pub eval_return: f64,
    pub eval_max_return: Option<f64>,
    pub eval_normalized: Option<f64>,
    pub eval_max_prob: f64,
    pub eval_support: f64,
    pub diverged: bool,
}

pub const COMPARISON_HEADER: &str = "task,vocab,n_actions,mode,seed,iterations,env_steps,final_avg_reward,eval_return,eval_max_return,eval_normalized,eval_max_prob,eval_support,status";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl CellResult {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.cell.task,
            self.cell.vocab.map(|v| v.to_string()).unwrap_or_default(),
            self.n_actions,
            self.cell.mode,
            self.cell.seed,
            self.iterations,
            self.env_steps,
            opt(self.final_avg_reward),
            self.eval_return,
            opt(self.eval_max_return),
            opt(self.eval_normalized),
            self.eval_max_prob,
            self.eval_support,
            if self.diverged { "diverged" } else { "ok" }
        )
    }
}

/// Seed used for post-training evaluation episodes, kept apart from the training stream.
pub fn eval_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// Trains one cell, writing `metrics.csv` row by row and `model.ckpt` into `dir`.
pub fn train_cell(args: &TrainArgs, cell: &Cell, dir: &Path) -> Result<CellResult, CliError> {
    std::fs::create_dir_all(dir)?;
    let env = make_env(&cell.task, cell.vocab.unwrap_or(0), &args.env, args.gamma)?;
    let n_actions = env.n_actions();
    let config = trainer_config(args, cell.mode, cell.seed)?;
    let mut trainer: Trainer<f64, BoxedEnv> = Trainer::new(config, env)?;

    let mut csv = BufWriter::new(File::create(dir.join("metrics.csv"))?);
    writeln!(csv, "{}", IterationMetrics::CSV_HEADER)?;
    let mut write_err = None;
    let outcome = trainer.run(|m| {
        if write_err.is_none() {
            if let Err(e) = writeln!(csv, "{}", m.csv_row()) {
                write_err = Some(e);
            }
        }
    });
    csv.flush()?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let diverged = match outcome {
        Ok(()) => false,
        Err(spcl_core::Error::Divergence(_)) => true,
        Err(e) => return Err(e.into()),
    };
    trainer.model().save(&dir.join("model.ckpt"))?;

    let log = trainer.log();
    let final_avg_reward = (!log.is_empty()).then(|| {
        let tail = (log.len() / 10).max(1);
        log[log.len() - tail..].iter().map(|m| m.avg_reward).sum::<f64>() / tail as f64
    });
    let (iterations, env_steps) = (log.len(), trainer.env_steps());
    let report = if diverged {
        None
    } else {
        Some(trainer.evaluate(args.eval_episodes, eval_seed(cell.seed), false)?)
    };
    Ok(CellResult {
        cell: cell.clone(),
        n_actions,
        iterations,
        env_steps,
        final_avg_reward,
        eval_return: report.map_or(f64::NAN, |r| r.avg_return),
        eval_max_return: report.and_then(|r| r.avg_max_return),
        eval_normalized: report.and_then(|r| r.normalized_return()),
        eval_max_prob: report.map_or(f64::NAN, |r| r.max_prob),
        eval_support: report.map_or(f64::NAN, |r| r.support_size),
        diverged,
    })
}

pub fn cell_dir(out: &Path, cell: &Cell, single: bool) -> PathBuf {
    if single {
        out.to_path_buf()
    } else {
        out.join(cell.label()).join(format!("seed-{}", cell.seed))
    }
}

pub fn run(args: &TrainArgs) -> Result<(), CliError> {
    if args.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    for task in &args.task {
        // fail on bad task parameters before any training starts
        for &v in &args.vocab {
            make_env(task, v, &args.env, args.gamma)?;
            if !is_tape(task) {
                break;
            }
        }
    }
    trainer_config(args, args.mode[0], args.seed)?.validate()?;

    write_resolved(&args.out, "train", args)?;
    let mut log = RunLog::open(&args.out)?;
    let cells = grid(args);
    let single = cells.len() == 1;
    log.line(&format!("train start cells={}", cells.len()));

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads)
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let results: Vec<Result<CellResult, CliError>> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| train_cell(args, cell, &cell_dir(&args.out, cell, single)))
            .collect()
    });

    let mut table = format!("{COMPARISON_HEADER}\n");
    let mut diverged = Vec::new();
    let mut first_err = None;
    for (cell, r) in cells.iter().zip(results) {
        match r {
            Ok(res) => {
                log.line(&format!(
                    "{} seed={} iterations={} env_steps={} {}",
                    cell.label(),
                    cell.seed,
                    res.iterations,
                    res.env_steps,
                    if res.diverged { "diverged" } else { "ok" }
                ));
                if res.diverged {
                    diverged.push(format!("{} seed {}", cell.label(), cell.seed));
                }
                let _ = writeln!(table, "{}", res.csv_row());
            }
            Err(e) => {
                log.line(&format!("{} seed={} error: {e}", cell.label(), cell.seed));
                first_err.get_or_insert(e);
            }
        }
    }
    std::fs::write(args.out.join("comparison.csv"), &table)?;
    print!("{table}");
    log.line("train end");
    if let Some(e) = first_err {
        return Err(e);
    }
    if !diverged.is_empty() {
        return Err(CliError::Divergence(format!("training diverged: {}", diverged.join(", "))));
    }
    Ok(())
}
