//! Episodic environments with integer observations and flat action indices.

mod tabular;
mod tape;
mod trajectory;

pub use tabular::{bandit_mdp, TabularEnv};
pub use tape::{decode_action, encode_action, Move, TapeConfig, TapeEnv, TapeKind};
pub use trajectory::{Trajectory, TrajectoryStep};

use crate::error::Result;

/// Outcome of one `step`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub observation: usize,
    pub reward: f64,
    /// The episode ended by the task's own rules.
    pub terminated: bool,
    /// The episode was cut by a step cap or horizon.
    pub truncated: bool,
}

impl Transition {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

pub trait Environment: Send {
    fn n_actions(&self) -> usize;

    /// Number of distinct observation symbols.
    fn n_observations(&self) -> usize;

    /// Starts a new episode; identical seeds give identical episodes.
    fn reset(&mut self, seed: u64) -> usize;

    /// Errors with [`crate::Error::Protocol`] when called before `reset` or after the episode ended.
    fn step(&mut self, action: usize) -> Result<Transition>;

    /// Best achievable return of the current episode, when known.
    fn max_return(&self) -> Option<f64>;

    /// `key=value` pairs identifying the environment in trajectory headers.
    fn describe(&self) -> Vec<(String, String)>;
}

impl<E: Environment + ?Sized> Environment for Box<E> {
    fn n_actions(&self) -> usize {
        (**self).n_actions()
    }
    fn n_observations(&self) -> usize {
        (**self).n_observations()
    }
    fn reset(&mut self, seed: u64) -> usize {
        (**self).reset(seed)
    }
    fn step(&mut self, action: usize) -> Result<Transition> {
        (**self).step(action)
    }
    fn max_return(&self) -> Option<f64> {
        (**self).max_return()
    }
    fn describe(&self) -> Vec<(String, String)> {
        (**self).describe()
    }
}
