//! Plain-text trajectory dumps.
//!
//! ```text
//! # task=copy vocab=5 min_len=1 max_len=5 seed=7
//! t,obs,action,reward,done
//! 0,3,8,1,0
//! ```
//!
//! `obs` is the observation the action was taken in.

use std::fmt::Write as _;

use super::Environment;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryStep {
    pub observation: usize,
    pub action: usize,
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub header: Vec<(String, String)>,
    pub seed: u64,
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    /// Runs `policy` on `env` from `reset(seed)` to the end of the episode.
    pub fn record<E, P>(env: &mut E, seed: u64, mut policy: P) -> Result<Self>
    where
        E: Environment + ?Sized,
        P: FnMut(usize) -> usize,
    {
        let mut obs = env.reset(seed);
        let mut steps = Vec::new();
        loop {
            let action = policy(obs);
            let t = env.step(action)?;
            steps.push(TrajectoryStep {
                observation: obs,
                action,
                reward: t.reward,
                done: t.done(),
            });
            if t.done() {
                break;
            }
            obs = t.observation;
        }
        Ok(Self {
            header: env.describe(),
            seed,
            steps,
        })
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn header_value(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_dump(&self) -> String {
        let mut out = String::from("#");
        for (k, v) in &self.header {
            let _ = write!(out, " {k}={v}");
        }
        let _ = writeln!(out, " seed={}", self.seed);
        out.push_str("t,obs,action,reward,done\n");
        for (t, s) in self.steps.iter().enumerate() {
            let _ = writeln!(out, "{t},{},{},{},{}", s.observation, s.action, s.reward, u8::from(s.done));
        }
        out
    }

    pub fn from_dump(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let head = lines
            .next()
            .and_then(|l| l.strip_prefix('#'))
            .ok_or_else(|| Error::Parse("missing `#` header line".into()))?;
        let mut header = Vec::new();
        let mut seed = None;
        for field in head.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad header field `{field}`")))?;
            if k == "seed" {
                seed = Some(v.parse().map_err(|_| Error::Parse(format!("bad seed `{v}`")))?);
            } else {
                header.push((k.to_string(), v.to_string()));
            }
        }
        let seed = seed.ok_or_else(|| Error::Parse("header lacks a seed".into()))?;
        if lines.next().map(str::trim) != Some("t,obs,action,reward,done") {
            return Err(Error::Parse("missing column header".into()));
        }
        let mut steps = Vec::new();
        for (i, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
            let bad = || Error::Parse(format!("malformed step line {}: `{line}`", i + 3));
            let cols: Vec<&str> = line.trim().split(',').collect();
            if cols.len() != 5 || cols[0].parse::<usize>().map_err(|_| bad())? != i {
                return Err(bad());
            }
            steps.push(TrajectoryStep {
                observation: cols[1].parse().map_err(|_| bad())?,
                action: cols[2].parse().map_err(|_| bad())?,
                reward: cols[3].parse().map_err(|_| bad())?,
                done: match cols[4] {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad()),
                },
            });
        }
        Ok(Self { header, seed, steps })
    }

    /// Re-executes the recorded actions and checks that observations, rewards and
    /// termination reproduce exactly.
    pub fn replay<E: Environment + ?Sized>(&self, env: &mut E) -> Result<()> {
        let mut obs = env.reset(self.seed);
        for (t, s) in self.steps.iter().enumerate() {
            if obs != s.observation {
                return Err(Error::Protocol(format!("step {t}: observation {obs}, recorded {}", s.observation)));
            }
            let tr = env.step(s.action)?;
            if tr.reward != s.reward || tr.done() != s.done {
                return Err(Error::Protocol(format!(
                    "step {t}: got reward {} done {}, recorded {} {}",
                    tr.reward,
                    tr.done(),
                    s.reward,
                    s.done
                )));
            }
            obs = tr.observation;
        }
        Ok(())
    }
}
