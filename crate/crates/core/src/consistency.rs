//! One- and multi-step sparse consistency residuals, Lagrange multiplier witnesses and
//! executable sub-optimality checks.
//!
//! A witness `(V, mu, lambda, Lambda)` is consistent when for every state `x` and action `a`
//!
//! ```text
//! V(x) = r(x,a) + alpha/2 - alpha mu(a|x) + lambda(a|x) - Lambda(x) + gamma E[V(x') | x, a]
//! ```
//!
//! with `lambda >= 0`, `lambda mu = 0` and `-alpha/2 <= Lambda <= 0`. Terminal states are
//! absorbing with value 0, so their residual is defined as 0 and successors that are
//! terminal bootstrap with 0 regardless of the stored value.

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{self, PolicyDistribution};
use crate::mdp::{self, BackupKind, IterationOptions, Objective, TabularMdp, TabularPolicy};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyWitness<T> {
    pub alpha: T,
    pub values: Vec<T>,
    pub policy: TabularPolicy<T>,
    /// `lambda(a|x) >= 0`, the multiplier of `mu(a|x) >= 0`.
    pub nonneg_mult: Vec<Vec<T>>,
    /// `Lambda(x) in [-alpha/2, 0]`, the (shifted) multiplier of `sum_a mu(a|x) = 1`.
    pub simplex_mult: Vec<T>,
}

impl<T: Real> ConsistencyWitness<T> {
    /// Checks complementary slackness and the multiplier boxes within `tol`.
    pub fn validate(&self, tol: T) -> Result<()> {
        let half = self.alpha / T::lit(2.0);
        for (x, lam) in self.simplex_mult.iter().enumerate() {
            if *lam < -half - tol || *lam > tol {
                return Err(Error::Witness(format!("Lambda({x}) = {lam} outside [-{half}, 0]")));
            }
        }
        for (x, row) in self.nonneg_mult.iter().enumerate() {
            for (a, &l) in row.iter().enumerate() {
                if l < -tol {
                    return Err(Error::Witness(format!("lambda({a}|{x}) = {l} is negative")));
                }
                let slack = l * self.policy.prob(x, a);
                if slack.abs() > tol {
                    return Err(Error::Witness(format!(
                        "lambda({a}|{x}) mu({a}|{x}) = {slack} violates complementary slackness"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.values.len()
    }

    /// Per-step integrand `alpha/2 - alpha mu + lambda - Lambda` (without the reward).
    pub fn regularizer_term(&self, x: usize, a: usize) -> T {
        self.alpha / T::lit(2.0) - self.alpha * self.policy.prob(x, a) + self.nonneg_mult[x][a]
            - self.simplex_mult[x]
    }
}

fn bootstrap_values<T: Real>(mdp: &TabularMdp<T>, v: &[T]) -> Vec<T> {
    v.iter()
        .enumerate()
        .map(|(x, &vx)| if mdp.is_terminal(x) { T::zero() } else { vx })
        .collect()
}

fn check_shape<T: Real>(mdp: &TabularMdp<T>, w: &ConsistencyWitness<T>) -> Result<()> {
    let n = mdp.n_states();
    let ok = w.values.len() == n
        && w.policy.n_states() == n
        && w.simplex_mult.len() == n
        && w.nonneg_mult.len() == n
        && w.nonneg_mult.iter().all(|r| r.len() == mdp.n_actions())
        && w.policy.rows().iter().all(|r| r.len() == mdp.n_actions());
    if ok {
        Ok(())
    } else {
        Err(Error::Shape("witness does not match the MDP".into()))
    }
}

/// `r + alpha/2 - alpha mu + lambda - Lambda + gamma E V(x') - V(x)` at one pair.
pub fn one_step_residual<T: Real>(mdp: &TabularMdp<T>, w: &ConsistencyWitness<T>, x: usize, a: usize) -> T {
    if mdp.is_terminal(x) {
        return T::zero();
    }
    let boot = bootstrap_values(mdp, &w.values);
    residual_with(mdp, w, &boot, x, a)
}

fn residual_with<T: Real>(mdp: &TabularMdp<T>, w: &ConsistencyWitness<T>, boot: &[T], x: usize, a: usize) -> T {
    if mdp.is_terminal(x) {
        return T::zero();
    }
    mdp.reward(x, a) + w.regularizer_term(x, a) + mdp.gamma() * mdp.expected_next(x, a, boot) - w.values[x]
}

/// All one-step residuals, `[x][a]`.
pub fn residual_table<T: Real>(mdp: &TabularMdp<T>, w: &ConsistencyWitness<T>) -> Result<Vec<Vec<T>>> {
    check_shape(mdp, w)?;
    let boot = bootstrap_values(mdp, &w.values);
    Ok((0..mdp.n_states())
        .map(|x| (0..mdp.n_actions()).map(|a| residual_with(mdp, w, &boot, x, a)).collect())
        .collect())
}

/// `max_{x,a} |one_step_residual(x, a)|`.
pub fn max_residual<T: Real>(mdp: &TabularMdp<T>, w: &ConsistencyWitness<T>) -> Result<T> {
    Ok(residual_table(mdp, w)?
        .iter()
        .flatten()
        .fold(T::zero(), |m, r| m.max(r.abs())))
}

/// Tolerance on the spread of `Lambda(x)` across supported actions.
pub const WITNESS_AGREEMENT_TOL: f64 = 1e-6;

/// Builds the multipliers certifying that `(v_star, mu_star)` is consistent.
///
/// `Lambda(x)` is read off any supported action (the mean over the support is used);
/// `lambda(a|x) = Lambda(x) - (Q(x,a) + alpha/2 - V(x))` off the support and 0 on it.
pub fn construct_witness<T: Real>(
    mdp: &TabularMdp<T>,
    v_star: &[T],
    mu_star: &TabularPolicy<T>,
    alpha: T,
) -> Result<ConsistencyWitness<T>> {
    let n = mdp.n_states();
    if v_star.len() != n || mu_star.n_states() != n {
        return Err(Error::Shape("value/policy do not match the MDP".into()));
    }
    let half = alpha / T::lit(2.0);
    let boot = bootstrap_values(mdp, v_star);
    let mut simplex_mult = Vec::with_capacity(n);
    let mut nonneg_mult = Vec::with_capacity(n);
    for x in 0..n {
        let mu = mu_star.row(x);
        if mdp.is_terminal(x) {
            let sq: T = mu.probs().iter().map(|&p| p * p).sum();
            simplex_mult.push(-half * sq);
            nonneg_mult.push(vec![T::zero(); mdp.n_actions()]);
            continue;
        }
        let q: Vec<T> = (0..mdp.n_actions())
            .map(|a| mdp.reward(x, a) + mdp.gamma() * mdp.expected_next(x, a, &boot))
            .collect();
        let candidates: Vec<T> = mu
            .support()
            .iter()
            .map(|&a| q[a] + half - alpha * mu.prob(a) - v_star[x])
            .collect();
        let lo = candidates.iter().copied().fold(T::infinity(), T::min);
        let hi = candidates.iter().copied().fold(T::neg_infinity(), T::max);
        if hi - lo > T::lit(WITNESS_AGREEMENT_TOL) {
            return Err(Error::Witness(format!(
                "supported actions at state {x} disagree on Lambda by {}; input is not optimal",
                hi - lo
            )));
        }
        let lam = candidates.iter().copied().sum::<T>() / T::lit(candidates.len() as f64);
        let row = (0..mdp.n_actions())
            .map(|a| {
                if mu.prob(a) > T::zero() {
                    T::zero()
                } else {
                    lam - (q[a] + half - v_star[x])
                }
            })
            .collect();
        simplex_mult.push(lam);
        nonneg_mult.push(row);
    }
    Ok(ConsistencyWitness {
        alpha,
        values: v_star.to_vec(),
        policy: mu_star.clone(),
        nonneg_mult,
        simplex_mult,
    })
}

/// Solves the sparse problem by value iteration and certifies the optimum.
pub fn optimal_witness<T: Real>(mdp: &TabularMdp<T>, alpha: T, opts: &IterationOptions) -> Result<ConsistencyWitness<T>> {
    let v = mdp::value_iteration(mdp, BackupKind::Sparse, alpha, opts, None)?.values;
    let mu = mdp::extract_policy(mdp, &v, BackupKind::Sparse, alpha)?;
    construct_witness(mdp, &v, &mu, alpha)
}

/// Exact expectation over `x_{1:d}` of
/// `gamma^d V(x_d) + sum_t gamma^t (r + alpha/2 - alpha mu + lambda - Lambda) - V(x_0)`
/// under the prescribed action sequence.
pub fn multi_step_residual_exact<T: Real>(
    mdp: &TabularMdp<T>,
    w: &ConsistencyWitness<T>,
    x0: usize,
    actions: &[usize],
) -> Result<T> {
    check_shape(mdp, w)?;
    if actions.is_empty() {
        return Err(Error::Domain("rollout length must be at least 1".into()));
    }
    if x0 >= mdp.n_states() || actions.iter().any(|&a| a >= mdp.n_actions()) {
        return Err(Error::Domain("state or action out of range".into()));
    }
    let n = mdp.n_states();
    let boot = bootstrap_values(mdp, &w.values);
    let mut dist = vec![T::zero(); n];
    dist[x0] = T::one();
    let mut discount = T::one();
    let mut total = T::zero();
    for &a in actions {
        let mut next = vec![T::zero(); n];
        for x in (0..n).filter(|&x| dist[x] > T::zero() && !mdp.is_terminal(x)) {
            total += discount * dist[x] * (mdp.reward(x, a) + w.regularizer_term(x, a));
            for (y, &p) in mdp.transition_row(x, a).iter().enumerate() {
                next[y] += dist[x] * p;
            }
        }
        // terminal mass stays put and contributes nothing further
        for x in (0..n).filter(|&x| mdp.is_terminal(x)) {
            next[x] += dist[x];
        }
        dist = next;
        discount *= mdp.gamma();
    }
    let tail: T = dist.iter().zip(&boot).map(|(&p, &v)| p * v).sum();
    Ok(total + discount * tail - boot[x0])
}

/// Realized worst gap against a sub-optimality bound.
#[derive(Clone, Debug)]
pub struct GapReport<T> {
    /// `max_x (V_ref(x) - V^mu(x))`
    pub worst_gap: T,
    pub bound: T,
    /// Allowance for inexact consistency: `tau / (1 - gamma)` plus solver precision.
    pub slack: T,
    /// `tau`, the witness' max one-step residual.
    pub residual: T,
}

const REFERENCE_OPTS: IterationOptions = IterationOptions {
    tol: 1e-12,
    max_iters: 1_000_000,
};

/// Headroom for the reference value iteration at tolerance 1e-12.
const SOLVER_SLACK: f64 = 1e-9;

fn gap_against<T: Real>(reference: &[T], achieved: &[T], bound: T, slack: T, residual: T, what: &str) -> Result<GapReport<T>> {
    let mut worst = T::neg_infinity();
    for (x, (&r, &v)) in reference.iter().zip(achieved).enumerate() {
        let g = r - v;
        if g > bound + slack {
            return Err(Error::Violation(format!(
                "{what}: state {x} gap {g} exceeds bound {bound} + slack {slack}"
            )));
        }
        if g < -slack {
            return Err(Error::Violation(format!(
                "{what}: state {x} value {v} exceeds the optimum {r} by more than {slack}"
            )));
        }
        worst = worst.max(g);
    }
    Ok(GapReport {
        worst_gap: worst,
        bound,
        slack,
        residual,
    })
}

fn consistency_slack<T: Real>(mdp: &TabularMdp<T>, tau: T) -> T {
    tau / (T::one() - mdp.gamma()) + T::lit(SOLVER_SLACK)
}

/// `V^mu_sp(x) >= V*_sp(x) - alpha / (1 - gamma)` for the witness policy.
pub fn check_sparse_gap<T: Real>(mdp: &TabularMdp<T>, w: &ConsistencyWitness<T>) -> Result<GapReport<T>> {
    let tau = max_residual(mdp, w)?;
    let alpha = w.alpha;
    let optimum = mdp::value_iteration(mdp, BackupKind::Sparse, alpha, &REFERENCE_OPTS, None)?.values;
    let achieved = mdp::policy_evaluation(mdp, &w.policy, Objective::Sparse, alpha)?;
    let bound = alpha / (T::one() - mdp.gamma());
    gap_against(&optimum, &achieved, bound, consistency_slack(mdp, tau), tau, "sparse-MDP bound")
}

/// `V*(x) - (3/2 - 1/|A|) alpha / (1 - gamma) <= V^mu(x) <= V*(x)` in the plain MDP.
pub fn check_original_gap<T: Real>(mdp: &TabularMdp<T>, w: &ConsistencyWitness<T>) -> Result<GapReport<T>> {
    let tau = max_residual(mdp, w)?;
    let optimum = mdp::value_iteration(mdp, BackupKind::Max, w.alpha, &REFERENCE_OPTS, None)?.values;
    let achieved = mdp::policy_evaluation(mdp, &w.policy, Objective::Plain, w.alpha)?;
    let bound = original_gap_bound(mdp.n_actions(), w.alpha, mdp.gamma());
    gap_against(&optimum, &achieved, bound, consistency_slack(mdp, tau), tau, "original-MDP bound")
}

/// `(3/2 - 1/|A|) alpha / (1 - gamma)`.
pub fn original_gap_bound<T: Real>(n_actions: usize, alpha: T, gamma: T) -> T {
    (T::lit(1.5) - T::one() / T::lit(n_actions as f64)) * alpha / (T::one() - gamma)
}

/// `r - alpha ln mu + gamma E V(x') - V(x)`, the soft (Shannon) one-step residual.
pub fn soft_consistency_residual<T: Real>(
    mdp: &TabularMdp<T>,
    v: &[T],
    policy: &TabularPolicy<T>,
    alpha: T,
    x: usize,
    a: usize,
) -> Result<T> {
    let p = policy.prob(x, a);
    if p <= T::zero() {
        return Err(Error::Domain(format!("mu({a}|{x}) = 0 has no logarithm")));
    }
    if mdp.is_terminal(x) {
        return Ok(T::zero());
    }
    let boot = bootstrap_values(mdp, v);
    Ok(mdp.reward(x, a) - alpha * p.ln() + mdp.gamma() * mdp.expected_next(x, a, &boot) - v[x])
}

/// The exactly consistent witness with a prescribed normalization multiplier.
///
/// For any `Lambda` with entries in `[-alpha/2, 0]`, the map
/// `V -> alpha G(Q_V / alpha) + alpha/2 - Lambda` is a `gamma`-contraction; its fixed
/// point together with `mu = sparsemax(Q_V / alpha)` solves the consistency equation
/// exactly. `Lambda(x) = -alpha/2 sum_a mu*(a|x)^2` recovers the optimum; any other
/// choice gives a consistent but generally sub-optimal policy.
pub fn consistent_witness_with_multiplier<T: Real>(
    mdp: &TabularMdp<T>,
    alpha: T,
    simplex_mult: &[T],
    opts: &IterationOptions,
) -> Result<ConsistencyWitness<T>> {
    let n = mdp.n_states();
    if simplex_mult.len() != n {
        return Err(Error::Shape("multiplier length differs from state count".into()));
    }
    let half = alpha / T::lit(2.0);
    if simplex_mult.iter().any(|&l| l < -half || l > T::zero()) {
        return Err(Error::Domain("Lambda must lie in [-alpha/2, 0]".into()));
    }
    let step = |v: &[T]| -> Vec<T> {
        (0..n)
            .map(|x| {
                if mdp.is_terminal(x) {
                    return T::zero();
                }
                let z: Vec<T> = mdp.q_row(x, v).iter().map(|&q| q / alpha).collect();
                let (tau, _) = math::sparse_threshold(&z);
                alpha * tau + half - simplex_mult[x]
            })
            .collect()
    };
    let tol = T::lit(opts.tol);
    let mut v = vec![T::zero(); n];
    let mut converged = false;
    let mut residual = T::infinity();
    for _ in 0..opts.max_iters {
        let next = step(&v);
        residual = crate::scalar::max_abs_diff(&next, &v);
        v = next;
        if residual <= tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            iterations: opts.max_iters,
            residual: residual.as_f64(),
        });
    }
    let rows = (0..n)
        .map(|x| {
            let z: Vec<T> = mdp.q_row(x, &v).iter().map(|&q| q / alpha).collect();
            PolicyDistribution::from_probs_unchecked(math::sparsemax_scaled(&z))
        })
        .collect();
    let policy = TabularPolicy::new(rows);
    let boot = bootstrap_values(mdp, &v);
    let nonneg_mult = (0..n)
        .map(|x| {
            (0..mdp.n_actions())
                .map(|a| {
                    if mdp.is_terminal(x) || policy.prob(x, a) > T::zero() {
                        T::zero()
                    } else {
                        let q = mdp.reward(x, a) + mdp.gamma() * mdp.expected_next(x, a, &boot);
                        simplex_mult[x] - (q + half - v[x])
                    }
                })
                .collect()
        })
        .collect();
    Ok(ConsistencyWitness {
        alpha,
        values: v,
        policy,
        nonneg_mult,
        simplex_mult: simplex_mult.to_vec(),
    })
}

#[derive(Clone, Copy, Debug)]
pub struct ResidualSearchOptions {
    pub iterations: usize,
    /// Stop early once the max residual drops below this.
    pub target_residual: f64,
}

impl Default for ResidualSearchOptions {
    fn default() -> Self {
        Self {
            iterations: 50_000,
            target_residual: 1e-9,
        }
    }
}

/// Searches for a consistent witness by projected gradient descent on
/// `1/2 sum_{x,a} residual(x,a)^2` from a random start.
///
/// After every step `mu` rows are projected onto the simplex, `lambda` is clipped at
/// zero and cleared on the support of `mu`, and `Lambda` is clipped into `[-alpha/2, 0]`.
/// The result may only be approximately consistent; its residual is part of the witness
/// and is reported by the gap checks.
pub fn residual_minimization_witness<T: Real, R: Rng + ?Sized>(
    mdp: &TabularMdp<T>,
    alpha: T,
    opts: &ResidualSearchOptions,
    rng: &mut R,
) -> Result<ConsistencyWitness<T>> {
    let n = mdp.n_states();
    let k = mdp.n_actions();
    let gamma = mdp.gamma();
    let half = alpha / T::lit(2.0);
    let scale = (mdp.max_abs_reward() + alpha) / (T::one() - gamma);

    let mut v: Vec<T> = (0..n).map(|_| scale * T::lit(rng.random::<f64>())).collect();
    let mut mu: Vec<Vec<T>> = (0..n)
        .map(|_| {
            let raw: Vec<T> = (0..k).map(|_| T::lit(rng.random::<f64>() * 2.0)).collect();
            math::sparsemax_scaled(&raw)
        })
        .collect();
    let mut lam: Vec<Vec<T>> = (0..n)
        .map(|x| {
            (0..k)
                .map(|a| {
                    if mu[x][a] > T::zero() {
                        T::zero()
                    } else {
                        T::lit(rng.random::<f64>()) * alpha
                    }
                })
                .collect()
        })
        .collect();
    let mut big: Vec<T> = (0..n).map(|_| -half * T::lit(rng.random::<f64>())).collect();
    for x in (0..n).filter(|&x| mdp.is_terminal(x)) {
        v[x] = T::zero();
    }

    // Lipschitz bound of the gradient: ||A||_1 ||A||_inf for the linear residual map.
    let row_l1 = alpha + T::lit(3.0) + gamma;
    let col_max = (T::lit(k as f64) * (gamma * T::lit(n as f64) + T::one())).max(alpha).max(T::lit(k as f64));
    let step = T::one() / (row_l1 * col_max);
    let target = T::lit(opts.target_residual);

    let mut residual = vec![vec![T::zero(); k]; n];
    for _ in 0..opts.iterations {
        let boot = bootstrap_values(mdp, &v);
        let mut worst = T::zero();
        for x in 0..n {
            for a in 0..k {
                residual[x][a] = if mdp.is_terminal(x) {
                    T::zero()
                } else {
                    mdp.reward(x, a) + half - alpha * mu[x][a] + lam[x][a] - big[x]
                        + gamma * mdp.expected_next(x, a, &boot)
                        - v[x]
                };
                worst = worst.max(residual[x][a].abs());
            }
        }
        if worst <= target {
            break;
        }
        let mut grad_v = vec![T::zero(); n];
        for x in 0..n {
            for a in 0..k {
                let r = residual[x][a];
                grad_v[x] -= r;
                for (y, &p) in mdp.transition_row(x, a).iter().enumerate() {
                    if !mdp.is_terminal(y) {
                        grad_v[y] += r * gamma * p;
                    }
                }
            }
        }
        for x in (0..n).filter(|&x| !mdp.is_terminal(x)) {
            v[x] -= step * grad_v[x];
            let g_big: T = residual[x].iter().copied().sum();
            big[x] = (big[x] + step * g_big).max(-half).min(T::zero());
            let moved: Vec<T> = (0..k).map(|a| mu[x][a] + step * alpha * residual[x][a]).collect();
            mu[x] = math::sparsemax_scaled(&moved);
            for a in 0..k {
                lam[x][a] = if mu[x][a] > T::zero() {
                    T::zero()
                } else {
                    (lam[x][a] - step * residual[x][a]).max(T::zero())
                };
            }
        }
    }
    Ok(ConsistencyWitness {
        alpha,
        values: v,
        policy: TabularPolicy::new(mu.into_iter().map(PolicyDistribution::from_probs_unchecked).collect()),
        nonneg_mult: lam,
        simplex_mult: big,
    })
}
