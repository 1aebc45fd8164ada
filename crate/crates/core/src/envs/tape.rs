//! Algorithmic tape tasks.
//!
//! The agent reads one cell of a tape (or of a two-row grid for addition) and on each
//! step picks a head move and optionally writes one output character. Writing the next
//! expected character pays 1; a wrong character ends the episode with reward 0.
//!
//! Flat actions are `a = m * (1 + V) + k` for move `m` and `k` in `0..=V`, where `k = 0`
//! moves without writing and `k = c + 1` writes character `c`. Characters are `0..V`;
//! the blank cell beyond the tape edges reads as `V`. The head may step one cell past
//! either end and is clamped there. Writing happens before moving.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Environment, Transition};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TapeKind {
    Copy,
    DuplicatedInput,
    RepeatCopy,
    Reverse,
    ReversedAddition,
}

impl TapeKind {
    pub const ALL: [TapeKind; 5] = [
        TapeKind::Copy,
        TapeKind::DuplicatedInput,
        TapeKind::RepeatCopy,
        TapeKind::Reverse,
        TapeKind::ReversedAddition,
    ];

    pub fn n_moves(self) -> usize {
        match self {
            TapeKind::ReversedAddition => 4,
            _ => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TapeKind::Copy => "copy",
            TapeKind::DuplicatedInput => "duplicated-input",
            TapeKind::RepeatCopy => "repeat-copy",
            TapeKind::Reverse => "reverse",
            TapeKind::ReversedAddition => "reversed-addition",
        }
    }
}

impl fmt::Display for TapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        TapeKind::ALL
            .into_iter()
            .find(|k| k.name() == norm || k.name().replace('-', "") == norm)
            .ok_or_else(|| Error::Parse(format!("unknown task `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Move {
    Left = 0,
    Right = 1,
    Up = 2,
    Down = 3,
}

impl Move {
    fn from_index(m: usize) -> Self {
        match m {
            0 => Move::Left,
            1 => Move::Right,
            2 => Move::Up,
            _ => Move::Down,
        }
    }
}

/// `(move, write)` to flat index; `write = None` moves without output.
pub fn encode_action(mv: Move, write: Option<usize>, vocab: usize) -> usize {
    mv as usize * (vocab + 1) + write.map_or(0, |c| c + 1)
}

pub fn decode_action(action: usize, vocab: usize) -> (Move, Option<usize>) {
    let k = action % (vocab + 1);
    (Move::from_index(action / (vocab + 1)), k.checked_sub(1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TapeConfig {
    pub kind: TapeKind,
    pub vocab: usize,
    /// Inclusive range of the sampled input length (columns for addition).
    pub min_len: usize,
    pub max_len: usize,
}

impl TapeConfig {
    pub fn new(kind: TapeKind, vocab: usize, min_len: usize, max_len: usize) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::Domain(format!("vocabulary size {vocab} must be at least 2")));
        }
        if min_len == 0 || min_len > max_len {
            return Err(Error::Domain(format!("invalid length range {min_len}..={max_len}")));
        }
        Ok(Self {
            kind,
            vocab,
            min_len,
            max_len,
        })
    }

    pub fn n_actions(&self) -> usize {
        self.kind.n_moves() * (self.vocab + 1)
    }
}

#[derive(Clone, Debug)]
pub struct TapeEnv {
    config: TapeConfig,
    /// Row-major cells; one row except for addition.
    grid: Vec<Vec<usize>>,
    target: Vec<usize>,
    row: usize,
    col: isize,
    emitted: usize,
    steps: usize,
    done: bool,
    started: bool,
}

impl TapeEnv {
    pub fn new(config: TapeConfig) -> Self {
        Self {
            config,
            grid: vec![Vec::new()],
            target: Vec::new(),
            row: 0,
            col: 0,
            emitted: 0,
            steps: 0,
            done: true,
            started: false,
        }
    }

    /// Sets up a specific instance; `rows` is one input row, or two digit rows for addition
    /// (least-significant digit first).
    pub fn with_input(config: TapeConfig, rows: Vec<Vec<usize>>) -> Result<Self> {
        let expected_rows = if config.kind == TapeKind::ReversedAddition { 2 } else { 1 };
        if rows.len() != expected_rows || rows.iter().any(|r| r.is_empty() || r.len() != rows[0].len()) {
            return Err(Error::Shape(format!("{} expects {expected_rows} equal nonempty rows", config.kind)));
        }
        if rows.iter().flatten().any(|&c| c >= config.vocab) {
            return Err(Error::Domain("input character outside the vocabulary".into()));
        }
        if config.kind == TapeKind::DuplicatedInput {
            let r = &rows[0];
            if !r.len().is_multiple_of(2) || r.chunks(2).any(|p| p[0] != p[1]) {
                return Err(Error::Domain("duplicated input must consist of doubled characters".into()));
            }
        }
        let mut env = Self::new(config);
        env.load(rows);
        Ok(env)
    }

    fn load(&mut self, rows: Vec<Vec<usize>>) {
        self.target = expected_output(self.config.kind, self.config.vocab, &rows);
        self.grid = rows;
        self.row = 0;
        self.col = 0;
        self.emitted = 0;
        self.steps = 0;
        self.done = false;
        self.started = true;
    }

    pub fn config(&self) -> &TapeConfig {
        &self.config
    }

    pub fn input(&self) -> &[Vec<usize>] {
        &self.grid
    }

    pub fn expected_output(&self) -> &[usize] {
        &self.target
    }

    pub fn emitted(&self) -> usize {
        self.emitted
    }

    pub fn step_cap(&self) -> usize {
        4 * self.target.len()
    }

    fn width(&self) -> isize {
        self.grid[0].len() as isize
    }

    pub fn observation(&self) -> usize {
        if self.col < 0 || self.col >= self.width() {
            self.config.vocab
        } else {
            self.grid[self.row][self.col as usize]
        }
    }

    /// Position on the tape holding the character for output index `j` (1D tasks), or the
    /// column of digit `j` (addition).
    fn source_cell(&self, j: usize) -> isize {
        let len = self.grid[0].len();
        let j = j.min(self.target.len() - 1);
        (match self.config.kind {
            TapeKind::Copy | TapeKind::ReversedAddition => j,
            TapeKind::DuplicatedInput => 2 * j,
            TapeKind::Reverse => len - 1 - j,
            TapeKind::RepeatCopy => {
                if j < len {
                    j
                } else if j < 2 * len {
                    2 * len - 1 - j
                } else {
                    j - 2 * len
                }
            }
        }) as isize
    }

    /// Action of a scripted solver that knows the instance; it collects the full return.
    pub fn oracle_action(&self) -> usize {
        let vocab = self.config.vocab;
        let j = self.emitted;
        let here = self.source_cell(j);
        let toward = |cell: isize| if cell < self.col { Move::Left } else { Move::Right };
        if self.config.kind == TapeKind::ReversedAddition {
            // the digit index equals the column, so no reading is needed
            let write = (self.col == j as isize).then_some(self.target[j]);
            let mv = if write.is_some() { Move::Right } else { toward(j as isize) };
            return encode_action(mv, write, vocab);
        }
        if self.col == here {
            let next = self.source_cell(j + 1);
            let mv = if next == self.col { Move::Right } else { toward(next) };
            encode_action(mv, Some(self.target[j]), vocab)
        } else {
            encode_action(toward(here), None, vocab)
        }
    }

    fn sample_rows(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let cfg = &self.config;
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(0..cfg.vocab)).collect::<Vec<_>>();
        match cfg.kind {
            TapeKind::ReversedAddition => vec![draw(len), draw(len)],
            TapeKind::DuplicatedInput => vec![draw(len).into_iter().flat_map(|c| [c, c]).collect()],
            _ => vec![draw(len)],
        }
    }
}

/// Target string of an instance.
pub fn expected_output(kind: TapeKind, vocab: usize, rows: &[Vec<usize>]) -> Vec<usize> {
    let s = &rows[0];
    match kind {
        TapeKind::Copy => s.clone(),
        TapeKind::DuplicatedInput => s.iter().step_by(2).copied().collect(),
        TapeKind::Reverse => s.iter().rev().copied().collect(),
        TapeKind::RepeatCopy => s.iter().chain(s.iter().rev()).chain(s.iter()).copied().collect(),
        TapeKind::ReversedAddition => {
            let mut out = Vec::with_capacity(s.len() + 1);
            let mut carry = 0;
            for (a, b) in rows[0].iter().zip(&rows[1]) {
                let total = a + b + carry;
                out.push(total % vocab);
                carry = total / vocab;
            }
            if carry > 0 {
                out.push(carry);
            }
            out
        }
    }
}

impl Environment for TapeEnv {
    fn n_actions(&self) -> usize {
        self.config.n_actions()
    }

    fn n_observations(&self) -> usize {
        self.config.vocab + 1
    }

    fn reset(&mut self, seed: u64) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = self.sample_rows(&mut rng);
        self.load(rows);
        self.observation()
    }

    fn step(&mut self, action: usize) -> Result<Transition> {
        if !self.started {
            return Err(Error::Protocol("step before reset".into()));
        }
        if self.done {
            return Err(Error::Protocol("step after the episode ended".into()));
        }
        if action >= self.n_actions() {
            return Err(Error::Domain(format!("action {action} out of range 0..{}", self.n_actions())));
        }
        let (mv, write) = decode_action(action, self.config.vocab);
        let mut reward = 0.0;
        let mut terminated = false;
        if let Some(c) = write {
            if c == self.target[self.emitted] {
                reward = 1.0;
                self.emitted += 1;
                terminated = self.emitted == self.target.len();
            } else {
                terminated = true;
            }
        }
        match mv {
            Move::Left => self.col = (self.col - 1).max(-1),
            Move::Right => self.col = (self.col + 1).min(self.width()),
            Move::Up => self.row = self.row.saturating_sub(1),
            Move::Down => self.row = (self.row + 1).min(self.grid.len() - 1),
        }
        self.steps += 1;
        let truncated = !terminated && self.steps >= self.step_cap();
        self.done = terminated || truncated;
        Ok(Transition {
            observation: self.observation(),
            reward,
            terminated,
            truncated,
        })
    }

    fn max_return(&self) -> Option<f64> {
        Some(self.target.len() as f64)
    }

    fn describe(&self) -> Vec<(String, String)> {
        vec![
            ("task".into(), self.config.kind.to_string()),
            ("vocab".into(), self.config.vocab.to_string()),
            ("min_len".into(), self.config.min_len.to_string()),
            ("max_len".into(), self.config.max_len.to_string()),
        ]
    }
}
