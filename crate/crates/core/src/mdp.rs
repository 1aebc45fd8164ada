//! Finite MDPs, exact Bellman backups for the plain/soft/sparse objectives, value
//! iteration, policy extraction and exact policy evaluation.
//!
//! Terminal states are absorbing with value 0: backups and evaluations pin them to
//! zero and never add an entropy bonus there.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::math::{self, PolicyDistribution};
use crate::scalar::Real;

/// Finite state/action MDP with a dense transition kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp<T> {
    n_states: usize,
    n_actions: usize,
    /// `P[x][a][x']`, row-major.
    transition: Vec<T>,
    /// `r[x][a]`, row-major.
    reward: Vec<T>,
    gamma: T,
    terminal: Vec<bool>,
}

/// On-disk layout of a [`TabularMdp`]. All arrays are row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpFile {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    /// `rewards[x * n_actions + a]`
    pub rewards: Vec<f64>,
    /// `transitions[(x * n_actions + a) * n_states + x']`
    pub transitions: Vec<f64>,
    pub terminal: Vec<bool>,
}

impl<T: Real> TabularMdp<T> {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<T>,
        reward: Vec<T>,
        gamma: T,
        terminal: Vec<bool>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(domain("an MDP needs at least one state and one action"));
        }
        if transition.len() != n_states * n_actions * n_states {
            return Err(Error::Shape(format!(
                "transition table has {} entries, expected {}",
                transition.len(),
                n_states * n_actions * n_states
            )));
        }
        if reward.len() != n_states * n_actions {
            return Err(Error::Shape(format!(
                "reward table has {} entries, expected {}",
                reward.len(),
                n_states * n_actions
            )));
        }
        if terminal.len() != n_states {
            return Err(Error::Shape(format!(
                "terminal mask has {} entries, expected {n_states}",
                terminal.len()
            )));
        }
        if !(gamma > T::zero() && gamma < T::one()) {
            return Err(domain(format!("discount must lie in (0, 1), got {gamma}")));
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(domain("non-finite reward"));
        }
        let tol = math::normalization_tol::<T>(n_states);
        for (row_idx, row) in transition.chunks(n_states).enumerate() {
            let (x, a) = (row_idx / n_actions, row_idx % n_actions);
            if row.iter().any(|p| !p.is_finite() || *p < T::zero()) {
                return Err(domain(format!("P[{x}][{a}] has a negative or non-finite entry")));
            }
            let total: T = row.iter().copied().sum();
            if (total - T::one()).abs() > tol {
                return Err(domain(format!("P[{x}][{a}] sums to {total}")));
            }
            if terminal[x] {
                if row[x] != T::one() {
                    return Err(domain(format!("terminal state {x} must self-loop")));
                }
                if reward[row_idx] != T::zero() {
                    return Err(domain(format!("terminal state {x} must have zero reward")));
                }
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward,
            gamma,
            terminal,
        })
    }

    /// Random MDP: Dirichlet(1) transition rows, rewards uniform in `[0, 1)`, no terminals.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, gamma: T, rng: &mut R) -> Result<Self> {
        let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            let draws: Vec<f64> = (0..n_states).map(|_| Exp1.sample(rng)).collect();
            let total: f64 = draws.iter().sum();
            let row: Vec<T> = draws.iter().map(|d| T::lit(d / total)).collect();
            // renormalize in the target precision
            let s: T = row.iter().copied().sum();
            transition.extend(row.into_iter().map(|p| p / s));
        }
        let reward = (0..n_states * n_actions)
            .map(|_| T::lit(rng.random::<f64>()))
            .collect();
        Self::new(n_states, n_actions, transition, reward, gamma, vec![false; n_states])
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> T {
        self.gamma
    }

    pub fn reward(&self, x: usize, a: usize) -> T {
        self.reward[x * self.n_actions + a]
    }

    pub fn is_terminal(&self, x: usize) -> bool {
        self.terminal[x]
    }

    pub fn terminal_mask(&self) -> &[bool] {
        &self.terminal
    }

    /// `P(. | x, a)`.
    pub fn transition_row(&self, x: usize, a: usize) -> &[T] {
        let start = (x * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    /// `sum_x' P(x' | x, a) v(x')`.
    pub fn expected_next(&self, x: usize, a: usize, v: &[T]) -> T {
        self.transition_row(x, a)
            .iter()
            .zip(v)
            .map(|(&p, &vy)| p * vy)
            .sum()
    }

    pub fn max_abs_reward(&self) -> T {
        self.reward.iter().fold(T::zero(), |m, r| m.max(r.abs()))
    }

    pub fn to_file(&self) -> MdpFile {
        MdpFile {
            n_states: self.n_states,
            n_actions: self.n_actions,
            gamma: self.gamma.as_f64(),
            rewards: self.reward.iter().map(|r| r.as_f64()).collect(),
            transitions: self.transition.iter().map(|p| p.as_f64()).collect(),
            terminal: self.terminal.clone(),
        }
    }

    pub fn from_file(file: &MdpFile) -> Result<Self> {
        Self::new(
            file.n_states,
            file.n_actions,
            file.transitions.iter().map(|&p| T::lit(p)).collect(),
            file.rewards.iter().map(|&r| T::lit(r)).collect(),
            T::lit(file.gamma),
            file.terminal.clone(),
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: MdpFile = serde_json::from_str(text)?;
        Self::from_file(&file)
    }

    fn check_values(&self, v: &[T]) -> Result<()> {
        if v.len() != self.n_states {
            return Err(Error::Shape(format!(
                "value function has {} entries, MDP has {} states",
                v.len(),
                self.n_states
            )));
        }
        Ok(())
    }

    /// Bootstrapped action values at a single state.
    pub fn q_row(&self, x: usize, v: &[T]) -> Vec<T> {
        (0..self.n_actions)
            .map(|a| self.reward(x, a) + self.gamma * self.expected_next(x, a, v))
            .collect()
    }
}

/// Which Bellman optimality operator to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BackupKind {
    Max,
    Soft,
    Sparse,
}

impl FromStr for BackupKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Self::Max),
            "soft" => Ok(Self::Soft),
            "sparse" => Ok(Self::Sparse),
            other => Err(Error::Parse(format!("unknown backup kind `{other}`"))),
        }
    }
}

impl fmt::Display for BackupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Max => "max",
            Self::Soft => "soft",
            Self::Sparse => "sparse",
        })
    }
}

/// Per-step entropy bonus used by policy evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Plain,
    Soft,
    Sparse,
}

/// One distribution per state.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy<T> {
    rows: Vec<PolicyDistribution<T>>,
}

impl<T: Real> TabularPolicy<T> {
    pub fn new(rows: Vec<PolicyDistribution<T>>) -> Self {
        Self { rows }
    }

    pub fn row(&self, x: usize) -> &PolicyDistribution<T> {
        &self.rows[x]
    }

    pub fn rows(&self) -> &[PolicyDistribution<T>] {
        &self.rows
    }

    pub fn prob(&self, x: usize, a: usize) -> T {
        self.rows[x].prob(a)
    }

    pub fn n_states(&self) -> usize {
        self.rows.len()
    }
}

fn check_alpha<T: Real>(kind: BackupKind, alpha: T) -> Result<()> {
    if kind != BackupKind::Max && !(alpha > T::zero() && alpha.is_finite()) {
        return Err(domain(format!("{kind} backup needs alpha > 0, got {alpha}")));
    }
    Ok(())
}

/// `Q[x][a] = r[x][a] + gamma sum_x' P[x][a][x'] v[x']`.
pub fn q_from_v<T: Real>(mdp: &TabularMdp<T>, v: &[T]) -> Result<Vec<Vec<T>>> {
    mdp.check_values(v)?;
    Ok((0..mdp.n_states()).map(|x| mdp.q_row(x, v)).collect())
}

/// The regularized maximum of one row of action values.
pub fn regularized_max<T: Real>(q: &[T], kind: BackupKind, alpha: T) -> T {
    match kind {
        BackupKind::Max => math::max_of(q),
        BackupKind::Soft => {
            let z: Vec<T> = q.iter().map(|&v| v / alpha).collect();
            alpha * math::log_sum_exp(&z)
        }
        BackupKind::Sparse => {
            let z: Vec<T> = q.iter().map(|&v| v / alpha).collect();
            alpha * math::spmax_unchecked(&z)
        }
    }
}

/// One application of the max, soft or sparse Bellman optimality operator.
pub fn backup<T: Real>(mdp: &TabularMdp<T>, v: &[T], kind: BackupKind, alpha: T) -> Result<Vec<T>> {
    mdp.check_values(v)?;
    check_alpha(kind, alpha)?;
    Ok(backup_unchecked(mdp, v, kind, alpha))
}

fn backup_unchecked<T: Real>(mdp: &TabularMdp<T>, v: &[T], kind: BackupKind, alpha: T) -> Vec<T> {
    (0..mdp.n_states())
        .map(|x| {
            if mdp.is_terminal(x) {
                T::zero()
            } else {
                regularized_max(&mdp.q_row(x, v), kind, alpha)
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct IterationOptions {
    /// Stop once `||T v - v||_inf <= tol`.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for IterationOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 1_000_000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ValueIterationResult<T> {
    pub values: Vec<T>,
    /// Number of backups applied.
    pub iterations: usize,
    /// `||T v_prev - v_prev||_inf` at the final sweep; the returned values have residual
    /// at most `gamma` times this.
    pub residual: f64,
}

/// Value iteration from `init` (zeros when `None`) until the sup-norm residual is within tolerance.
pub fn value_iteration<T: Real>(
    mdp: &TabularMdp<T>,
    kind: BackupKind,
    alpha: T,
    opts: &IterationOptions,
    init: Option<&[T]>,
) -> Result<ValueIterationResult<T>> {
    check_alpha(kind, alpha)?;
    if opts.tol.is_nan() || opts.tol <= 0.0 {
        return Err(domain("tolerance must be positive"));
    }
    let mut v = match init {
        Some(v0) => {
            mdp.check_values(v0)?;
            v0.to_vec()
        }
        None => vec![T::zero(); mdp.n_states()],
    };
    let tol = T::lit(opts.tol);
    let mut residual = T::infinity();
    for iteration in 1..=opts.max_iters {
        let next = backup_unchecked(mdp, &v, kind, alpha);
        residual = crate::scalar::max_abs_diff(&next, &v);
        v = next;
        if !residual.is_finite() {
            break;
        }
        if residual <= tol {
            return Ok(ValueIterationResult {
                values: v,
                iterations: iteration,
                residual: residual.as_f64(),
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iters,
        residual: residual.as_f64(),
    })
}

/// Greedy (lowest-index tie-break), softmax or sparsemax policy of `Q = q_from_v(v)`.
pub fn extract_policy<T: Real>(
    mdp: &TabularMdp<T>,
    v: &[T],
    kind: BackupKind,
    alpha: T,
) -> Result<TabularPolicy<T>> {
    check_alpha(kind, alpha)?;
    let q = q_from_v(mdp, v)?;
    let rows = q
        .iter()
        .map(|row| match kind {
            BackupKind::Max => Ok(PolicyDistribution::point_mass(row.len(), math::argmax(row))),
            BackupKind::Soft => math::softmax_policy(row, alpha),
            BackupKind::Sparse => math::sparsemax_policy(row, alpha),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TabularPolicy::new(rows))
}

/// Entropy bonus `sum_a mu_a h(mu_a)` of one policy row.
pub fn entropy_bonus<T: Real>(mu: &PolicyDistribution<T>, objective: Objective, alpha: T) -> T {
    match objective {
        Objective::Plain => T::zero(),
        Objective::Soft => alpha * math::shannon_entropy(mu),
        Objective::Sparse => alpha * math::tsallis_entropy(mu),
    }
}

/// States up to which policy evaluation uses a direct dense solve.
pub const DIRECT_SOLVE_LIMIT: usize = 2000;

/// Exact value of `policy` under the given objective: solves `V = r_mu + gamma P_mu V`
/// (terminal rows pinned to 0).
pub fn policy_evaluation<T: Real>(
    mdp: &TabularMdp<T>,
    policy: &TabularPolicy<T>,
    objective: Objective,
    alpha: T,
) -> Result<Vec<T>> {
    let n = mdp.n_states();
    if policy.n_states() != n || policy.rows().iter().any(|r| r.len() != mdp.n_actions()) {
        return Err(Error::Shape("policy does not match the MDP".into()));
    }
    let gamma = mdp.gamma();
    let mut r_mu = vec![T::zero(); n];
    // P_mu, row-major
    let mut p_mu = vec![T::zero(); n * n];
    for x in (0..n).filter(|&x| !mdp.is_terminal(x)) {
        let mu = policy.row(x);
        let mut acc = entropy_bonus(mu, objective, alpha);
        for &a in mu.support() {
            let w = mu.prob(a);
            acc += w * mdp.reward(x, a);
            for (y, &p) in mdp.transition_row(x, a).iter().enumerate() {
                p_mu[x * n + y] += w * p;
            }
        }
        r_mu[x] = acc;
    }

    if n <= DIRECT_SOLVE_LIMIT {
        let mut matrix = vec![T::zero(); n * n];
        for x in 0..n {
            matrix[x * n + x] = T::one();
            if !mdp.is_terminal(x) {
                for y in 0..n {
                    matrix[x * n + y] -= gamma * p_mu[x * n + y];
                }
            }
        }
        return T::solve_dense(&matrix, &r_mu, n)
            .ok_or_else(|| Error::Domain("singular policy evaluation system".into()));
    }

    let tol = T::lit(1e-12);
    let mut v = vec![T::zero(); n];
    loop {
        let next: Vec<T> = (0..n)
            .map(|x| {
                let row = &p_mu[x * n..(x + 1) * n];
                r_mu[x] + gamma * row.iter().zip(&v).map(|(&p, &vy)| p * vy).sum::<T>()
            })
            .collect();
        let delta = crate::scalar::max_abs_diff(&next, &v);
        v = next;
        if delta <= tol {
            return Ok(v);
        }
        if !delta.is_finite() {
            return Err(Error::Divergence("policy evaluation diverged".into()));
        }
    }
}

/// Realized sub-optimality of the soft- and sparse-optimal policies in the plain MDP.
#[derive(Clone, Debug)]
pub struct BoundReport<T> {
    pub optimal: Vec<T>,
    pub soft_policy_value: Vec<T>,
    pub sparse_policy_value: Vec<T>,
    /// `alpha / (1 - gamma) * ln |A|`
    pub soft_bound: T,
    /// `alpha / (1 - gamma) * (|A| - 1) / (2 |A|)`
    pub sparse_bound: T,
    /// `max_x V*(x) - V^{mu_sf}(x)`
    pub soft_gap: T,
    pub sparse_gap: T,
}

pub const BOUND_SLACK: f64 = 1e-8;

/// Solves the plain, soft and sparse problems and checks both sandwich inequalities
/// `V* - bound <= V^{mu} <= V*` at every state.
pub fn check_bounds<T: Real>(mdp: &TabularMdp<T>, alpha: T) -> Result<BoundReport<T>> {
    let opts = IterationOptions::default();
    let optimal = value_iteration(mdp, BackupKind::Max, alpha, &opts, None)?.values;
    let evaluate = |kind| -> Result<Vec<T>> {
        let v = value_iteration(mdp, kind, alpha, &opts, None)?.values;
        let mu = extract_policy(mdp, &v, kind, alpha)?;
        policy_evaluation(mdp, &mu, Objective::Plain, alpha)
    };
    let soft_policy_value = evaluate(BackupKind::Soft)?;
    let sparse_policy_value = evaluate(BackupKind::Sparse)?;

    let n_actions = T::lit(mdp.n_actions() as f64);
    let horizon = alpha / (T::one() - mdp.gamma());
    let soft_bound = horizon * n_actions.ln();
    let sparse_bound = horizon * (n_actions - T::one()) / (T::lit(2.0) * n_actions);
    let slack = T::lit(BOUND_SLACK);

    let gap = |name: &str, values: &[T], bound: T| -> Result<T> {
        let mut worst = T::zero();
        for x in 0..mdp.n_states() {
            let g = optimal[x] - values[x];
            if g < -slack || g > bound + slack {
                return Err(Error::Violation(format!(
                    "{name} bound at state {x}: V*={} V^mu={} gap={g} bound={bound}",
                    optimal[x], values[x]
                )));
            }
            worst = worst.max(g);
        }
        Ok(worst)
    };
    let soft_gap = gap("soft", &soft_policy_value, soft_bound)?;
    let sparse_gap = gap("sparse", &sparse_policy_value, sparse_bound)?;
    Ok(BoundReport {
        optimal,
        soft_policy_value,
        sparse_policy_value,
        soft_bound,
        sparse_bound,
        soft_gap,
        sparse_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(reward: f64, gamma: f64) -> TabularMdp<f64> {
        TabularMdp::new(1, 1, vec![1.0], vec![reward], gamma, vec![false]).unwrap()
    }

    #[test]
    fn rejects_malformed_tables() {
        assert!(TabularMdp::<f64>::new(1, 1, vec![0.9], vec![0.0], 0.9, vec![false]).is_err());
        assert!(TabularMdp::<f64>::new(1, 1, vec![1.0], vec![0.0], 1.0, vec![false]).is_err());
        assert!(TabularMdp::<f64>::new(1, 1, vec![1.0], vec![1.0], 0.5, vec![true]).is_err());
        assert!(TabularMdp::<f64>::new(1, 2, vec![1.0], vec![0.0, 0.0], 0.5, vec![false]).is_err());
    }

    #[test]
    fn q_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mdp = TabularMdp::<f64>::random(5, 3, 0.9, &mut rng).unwrap();
        let q0 = q_from_v(&mdp, &[0.0; 5]).unwrap();
        for x in 0..5 {
            for a in 0..3 {
                assert_eq!(q0[x][a], mdp.reward(x, a));
            }
        }
        let q = q_from_v(&single(1.0, 0.9), &[10.0]).unwrap();
        assert!((q[0][0] - 10.0).abs() < 1e-14);

        let v: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
        let nested_p: Vec<Vec<Vec<f64>>> = (0..5)
            .map(|x| (0..3).map(|a| mdp.transition_row(x, a).to_vec()).collect())
            .collect();
        let nested_r: Vec<Vec<f64>> = (0..5).map(|x| (0..3).map(|a| mdp.reward(x, a)).collect()).collect();
        let expect = oracle::q_table_naive(&nested_p, &nested_r, 0.9, &v);
        let got = q_from_v(&mdp, &v).unwrap();
        for x in 0..5 {
            for a in 0..3 {
                assert!((got[x][a] - expect[x][a]).abs() < 1e-12);
            }
        }
        assert!(q_from_v(&mdp, &[0.0; 4]).is_err());
    }

    #[test]
    fn single_action_backups_coincide() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mdp = TabularMdp::<f64>::random(4, 1, 0.8, &mut rng).unwrap();
        let v = vec![0.5, -1.0, 2.0, 0.0];
        let hard = backup(&mdp, &v, BackupKind::Max, 1.0).unwrap();
        assert_eq!(backup(&mdp, &v, BackupKind::Sparse, 0.37).unwrap(), hard);
        let soft = backup(&mdp, &v, BackupKind::Soft, 0.37).unwrap();
        for (s, h) in soft.iter().zip(&hard) {
            assert!((s - h).abs() < 1e-14);
        }
    }

    #[test]
    fn value_iteration_examples() {
        let opts = IterationOptions::default();
        let mdp = single(1.0, 0.5);
        let hard = value_iteration(&mdp, BackupKind::Max, 1.0, &opts, None).unwrap();
        assert!((hard.values[0] - 2.0).abs() < 1e-9);
        let sparse = value_iteration(&mdp, BackupKind::Sparse, 0.7, &opts, None).unwrap();
        assert!((sparse.values[0] - 2.0).abs() < 1e-9);

        // contraction: residual shrinks by at most gamma per sweep
        let chain = TabularMdp::new(
            2,
            2,
            vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0],
            vec![0.0, 1.0, 2.0, 0.0],
            0.9,
            vec![false, false],
        )
        .unwrap();
        let mut v = vec![0.0, 0.0];
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let next = backup(&chain, &v, BackupKind::Sparse, 0.5).unwrap();
            let r = crate::scalar::max_abs_diff(&next, &v);
            assert!(r <= 0.9 * prev + 1e-12);
            prev = r;
            v = next;
        }
        let fixed = value_iteration(&chain, BackupKind::Sparse, 0.5, &opts, None).unwrap();
        let again = backup(&chain, &fixed.values, BackupKind::Sparse, 0.5).unwrap();
        assert!(crate::scalar::max_abs_diff(&again, &fixed.values) <= 1e-10);
    }

    #[test]
    fn non_convergence_reports_residual() {
        let opts = IterationOptions { tol: 1e-12, max_iters: 3 };
        match value_iteration(&single(1.0, 0.9), BackupKind::Max, 1.0, &opts, None) {
            Err(Error::NonConvergence { iterations, residual }) => {
                assert_eq!(iterations, 3);
                assert!(residual > 0.5);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn policy_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mdp = TabularMdp::<f64>::random(3, 1, 0.9, &mut rng).unwrap();
        let v = vec![0.0; 3];
        for kind in [BackupKind::Max, BackupKind::Soft, BackupKind::Sparse] {
            let mu = extract_policy(&mdp, &v, kind, 0.5).unwrap();
            assert!(mu.rows().iter().all(|r| r.probs() == [1.0]));
        }
        // one action dominates by more than alpha: sparse collapses, soft does not
        let bandit = TabularMdp::new(1, 3, vec![1.0; 3], vec![1.0, 0.2, 0.0], 0.5, vec![false]).unwrap();
        let sparse = extract_policy(&bandit, &[0.0], BackupKind::Sparse, 0.5).unwrap();
        assert_eq!(sparse.row(0).probs(), &[1.0, 0.0, 0.0]);
        let soft = extract_policy(&bandit, &[0.0], BackupKind::Soft, 0.5).unwrap();
        assert!(soft.row(0).probs().iter().all(|&p| p > 0.0));
        let greedy = extract_policy(
            &TabularMdp::new(1, 2, vec![1.0; 2], vec![1.0, 1.0], 0.5, vec![false]).unwrap(),
            &[0.0],
            BackupKind::Max,
            1.0,
        )
        .unwrap();
        assert_eq!(greedy.row(0).probs(), &[1.0, 0.0]);
    }

    #[test]
    fn evaluation_examples() {
        // deterministic chain 0 -> 1 -> 2 (terminal), rewards 1 then 2
        let mut p = vec![0.0; 9];
        p[1] = 1.0;
        p[3 + 2] = 1.0;
        p[6 + 2] = 1.0;
        let chain = TabularMdp::<f64>::new(3, 1, p, vec![1.0, 2.0, 0.0], 0.9, vec![false, false, true]).unwrap();
        let mu = TabularPolicy::new(vec![PolicyDistribution::point_mass(1, 0); 3]);
        let v = policy_evaluation(&chain, &mu, Objective::Plain, 0.0).unwrap();
        assert!((v[0] - 2.8).abs() < 1e-14 && (v[1] - 2.0).abs() < 1e-14 && v[2] == 0.0);

        // uniform sparse bonus on a zero-reward MDP
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut zero = TabularMdp::<f64>::random(4, 3, 0.8, &mut rng).unwrap().to_file();
        zero.rewards.iter_mut().for_each(|r| *r = 0.0);
        let zero = TabularMdp::<f64>::from_file(&zero).unwrap();
        let uniform = TabularPolicy::new(vec![PolicyDistribution::uniform(3); 4]);
        let v = policy_evaluation(&zero, &uniform, Objective::Sparse, 0.6).unwrap();
        let expect = 0.6 / 2.0 * (1.0 - 1.0 / 3.0) / (1.0 - 0.8);
        assert!(v.iter().all(|x| (x - expect).abs() < 1e-12));

        // the sparse-optimal policy attains V*_sp
        let mdp = TabularMdp::<f64>::random(6, 4, 0.9, &mut rng).unwrap();
        let star = value_iteration(&mdp, BackupKind::Sparse, 0.5, &IterationOptions::default(), None).unwrap();
        let mu = extract_policy(&mdp, &star.values, BackupKind::Sparse, 0.5).unwrap();
        let v = policy_evaluation(&mdp, &mu, Objective::Sparse, 0.5).unwrap();
        assert!(crate::scalar::max_abs_diff(&v, &star.values) < 1e-8);
        let soft_star = value_iteration(&mdp, BackupKind::Soft, 0.5, &IterationOptions::default(), None).unwrap();
        let mu = extract_policy(&mdp, &soft_star.values, BackupKind::Soft, 0.5).unwrap();
        let v = policy_evaluation(&mdp, &mu, Objective::Soft, 0.5).unwrap();
        assert!(crate::scalar::max_abs_diff(&v, &soft_star.values) < 1e-8);
    }

    #[test]
    fn bound_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let one = TabularMdp::<f64>::random(3, 1, 0.9, &mut rng).unwrap();
        let report = check_bounds(&one, 1.0).unwrap();
        assert!(report.soft_gap.abs() < 1e-8 && report.sparse_gap.abs() < 1e-8);

        let big = TabularMdp::<f64>::random(20, 50, 0.9, &mut rng).unwrap();
        let report = check_bounds(&big, 1.0).unwrap();
        assert!(report.sparse_bound < report.soft_bound);
        assert!(report.sparse_gap <= report.sparse_bound + BOUND_SLACK);
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mdp = TabularMdp::<f64>::random(4, 3, 0.95, &mut rng).unwrap();
        let back = TabularMdp::<f64>::from_json(&mdp.to_json()).unwrap();
        assert_eq!(back, mdp);
        assert!(TabularMdp::<f64>::from_json(r#"{"n_states":1}"#).is_err());
    }
}
