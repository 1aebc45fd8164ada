use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spcl_core::envs::{Environment, TapeConfig, TapeEnv, TapeKind, Trajectory};
use spcl_core::model::{FeatureEncoder, Model};
use spcl_core::pcl;

use crate::args::EvalArgs;
use crate::config::write_resolved;
use crate::train::{make_env, BoxedEnv};
use crate::{CliError, RunLog};

/// Recovers the history window from a checkpoint's input width.
pub fn infer_window(obs_dim: usize, n_observations: usize, n_actions: usize) -> Result<usize, CliError> {
    let slot = n_observations + 1 + n_actions + 1;
    if obs_dim < n_observations || !(obs_dim - n_observations).is_multiple_of(slot) {
        return Err(CliError::Usage(format!(
            "checkpoint input width {obs_dim} does not fit this task ({n_observations} observations, {n_actions} actions)"
        )));
    }
    Ok(1 + (obs_dim - n_observations) / slot)
}

fn env_from_dump(traj: &Trajectory, args: &EvalArgs) -> Result<BoxedEnv, CliError> {
    let header = |k: &str| {
        traj.header_value(k)
            .ok_or_else(|| CliError::Usage(format!("dump header lacks `{k}`")))
    };
    let task = header("task")?;
    if let Ok(kind) = task.parse::<TapeKind>() {
        let num = |k: &str| -> Result<usize, CliError> {
            header(k)?.parse().map_err(|_| CliError::Usage(format!("bad `{k}` in dump header")))
        };
        let cfg = TapeConfig::new(kind, num("vocab")?, num("min_len")?, num("max_len")?)?;
        return Ok(Box::new(TapeEnv::new(cfg)));
    }
    make_env(&args.task, args.vocab, &args.env, args.gamma)
}

/// Plays one episode with the model, returning the recorded trajectory.
pub fn record_with_model(
    model: &Model<f64>,
    encoder: &FeatureEncoder,
    env: &mut BoxedEnv,
    seed: u64,
    greedy: bool,
) -> Result<Trajectory, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut observations = Vec::new();
    let mut actions: Vec<usize> = Vec::new();
    let mut failure = None;
    let traj = Trajectory::record(env, seed, |obs| {
        observations.push(obs);
        let x: Vec<f64> = encoder.encode(&observations, &actions, actions.len());
        let a = match model.forward(&x) {
            Ok(out) if greedy => out.policy.argmax(),
            Ok(out) => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = out.policy.argmax();
                for &a in out.policy.support() {
                    acc += out.policy.prob(a);
                    pick = a;
                    if u < acc {
                        break;
                    }
                }
                pick
            }
            Err(e) => {
                failure.get_or_insert(e);
                0
            }
        };
        actions.push(a);
        a
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    Ok(traj)
}

pub fn run(args: &EvalArgs) -> Result<(), CliError> {
    write_resolved(&args.out, "eval", args)?;
    let mut log = RunLog::open(&args.out)?;

    if let Some(path) = &args.replay {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read `{}`: {e}", path.display())))?;
        let traj = Trajectory::from_dump(&text)?;
        let mut env = env_from_dump(&traj, args)?;
        traj.replay(&mut env)
            .map_err(|e| CliError::Failure(format!("replay mismatch: {e}")))?;
        let msg = format!("replay ok: {} steps, return {}", traj.steps.len(), traj.total_reward());
        log.line(&msg);
        println!("{msg}");
        return Ok(());
    }

    let mut env = make_env(&args.task, args.vocab, &args.env, args.gamma)?;
    let model = match &args.checkpoint {
        Some(p) => Some(Model::<f64>::load(p)?),
        None => None,
    };

    let Some(model) = model else {
        // without a model only the scripted tape solver can produce a dump
        let Some(dump) = &args.dump else {
            return Err(CliError::Usage("eval needs --checkpoint, --dump or --replay".into()));
        };
        let kind: TapeKind = args
            .task
            .parse()
            .map_err(|_| CliError::Usage("dumps without --checkpoint need a tape task".into()))?;
        let cfg = TapeConfig::new(kind, args.vocab, args.env.min_len, args.env.max_len)?;
        let mut oracle = TapeEnv::new(cfg);
        oracle.reset(args.seed);
        let traj = Trajectory::record(&mut env, args.seed, |_| {
            let a = oracle.oracle_action();
            let _ = oracle.step(a);
            a
        })?;
        std::fs::write(dump, traj.to_dump())?;
        log.line(&format!("dumped scripted episode to {}", dump.display()));
        return Ok(());
    };

    let cfg = model.config();
    if cfg.n_actions != env.n_actions() {
        return Err(CliError::Usage(format!(
            "checkpoint has {} actions, the task has {}",
            cfg.n_actions,
            env.n_actions()
        )));
    }
    let window = infer_window(cfg.obs_dim, env.n_observations(), env.n_actions())?;
    let encoder = FeatureEncoder::new(env.n_observations(), env.n_actions(), window)?;

    if let Some(dump) = &args.dump {
        let traj = record_with_model(&model, &encoder, &mut env, args.seed, args.greedy)?;
        std::fs::write(dump, traj.to_dump())?;
        log.line(&format!("dumped model episode to {}", dump.display()));
    }

    let report = pcl::evaluate(&model, &encoder, &mut env, args.episodes, args.seed, args.max_episode_len, args.greedy)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut csv = String::from("episodes,avg_return,avg_max_return,solved,normalized_return,support_size,max_prob\n");
    let _ = writeln!(
        csv,
        "{},{},{},{},{},{},{}",
        report.episodes,
        report.avg_return,
        opt(report.avg_max_return),
        opt(report.solved),
        opt(report.normalized_return()),
        report.support_size,
        report.max_prob
    );
    std::fs::write(args.out.join("eval.csv"), &csv)?;
    log.line("eval done");
    print!("{csv}");
    Ok(())
}
