use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Environment, Transition};
use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
use crate::scalar::Real;

/// Episodic view of a tabular MDP: uniform start over nonterminal states, fixed horizon,
/// observation = state index.
#[derive(Clone, Debug)]
pub struct TabularEnv<T> {
    mdp: TabularMdp<T>,
    horizon: usize,
    starts: Vec<usize>,
    rng: ChaCha8Rng,
    state: usize,
    t: usize,
    done: bool,
    started: bool,
}

impl<T: Real> TabularEnv<T> {
    pub fn new(mdp: TabularMdp<T>, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Domain("horizon must be at least 1".into()));
        }
        let starts: Vec<usize> = (0..mdp.n_states()).filter(|&x| !mdp.is_terminal(x)).collect();
        if starts.is_empty() {
            return Err(Error::Domain("every state is terminal".into()));
        }
        Ok(Self {
            mdp,
            horizon,
            starts,
            rng: ChaCha8Rng::seed_from_u64(0),
            state: 0,
            t: 0,
            done: true,
            started: false,
        })
    }

    /// Restricts episode starts to the given states.
    pub fn with_start_states(mut self, starts: Vec<usize>) -> Result<Self> {
        if starts.is_empty() || starts.iter().any(|&x| x >= self.mdp.n_states() || self.mdp.is_terminal(x)) {
            return Err(Error::Domain("start states must be nonterminal and in range".into()));
        }
        self.starts = starts;
        Ok(self)
    }

    pub fn mdp(&self) -> &TabularMdp<T> {
        &self.mdp
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn state(&self) -> usize {
        self.state
    }
}

impl<T: Real> Environment for TabularEnv<T> {
    fn n_actions(&self) -> usize {
        self.mdp.n_actions()
    }

    fn n_observations(&self) -> usize {
        self.mdp.n_states()
    }

    fn reset(&mut self, seed: u64) -> usize {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.state = self.starts[self.rng.random_range(0..self.starts.len())];
        self.t = 0;
        self.done = false;
        self.started = true;
        self.state
    }

    fn step(&mut self, action: usize) -> Result<Transition> {
        if !self.started {
            return Err(Error::Protocol("step before reset".into()));
        }
        if self.done {
            return Err(Error::Protocol("step after the episode ended".into()));
        }
        if action >= self.mdp.n_actions() {
            return Err(Error::Domain(format!("action {action} out of range")));
        }
        let reward = self.mdp.reward(self.state, action).as_f64();
        let row = self.mdp.transition_row(self.state, action);
        let u: f64 = self.rng.random();
        let mut acc = 0.0;
        let mut next = row.len() - 1;
        for (y, p) in row.iter().enumerate() {
            acc += p.as_f64();
            if u < acc {
                next = y;
                break;
            }
        }
        // never land on a zero-probability state through rounding in the last bucket
        while row[next] <= T::zero() && next > 0 {
            next -= 1;
        }
        self.state = next;
        self.t += 1;
        let terminated = self.mdp.is_terminal(next);
        let truncated = !terminated && self.t >= self.horizon;
        self.done = terminated || truncated;
        Ok(Transition {
            observation: next,
            reward,
            terminated,
            truncated,
        })
    }

    fn max_return(&self) -> Option<f64> {
        None
    }

    fn describe(&self) -> Vec<(String, String)> {
        vec![
            ("task".into(), "tabular".into()),
            ("states".into(), self.mdp.n_states().to_string()),
            ("actions".into(), self.mdp.n_actions().to_string()),
            ("horizon".into(), self.horizon.to_string()),
        ]
    }
}

/// Single nonterminal state that loops to itself; action `a` pays `rewards[a]`.
pub fn bandit_mdp<T: Real>(rewards: &[T], gamma: T) -> Result<TabularMdp<T>> {
    let k = rewards.len();
    TabularMdp::new(1, k, vec![T::one(); k], rewards.to_vec(), gamma, vec![false])
}
