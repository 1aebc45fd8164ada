//! Scalar and vector operators behind both regularized MDP families.
//!
//! `sfmax` is log-sum-exp; `spmax` is its Tsallis analogue, the optimal value of
//! `max_{mu in simplex} <mu, z> + (1 - |mu|^2) / 2`. The maximizer of the latter is the
//! sparsemax distribution, i.e. the Euclidean projection of `z` onto the simplex.
//!
//! Functions taking a score vector `z` expect it to be already temperature scaled
//! (`z = q / alpha`); the `*_policy` functions take raw scores and a temperature.

use std::ops::Deref;

use crate::error::{domain, Result};
use crate::scalar::Real;

/// Per-action scores at a single state. Nonempty and finite.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionScores<T>(Vec<T>);

impl<T: Real> ActionScores<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        check_scores(&values)?;
        Ok(Self(values))
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }
}

impl<T> Deref for ActionScores<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.0
    }
}

/// A probability vector over actions together with its support
/// (indices of the strictly positive entries, ascending).
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyDistribution<T> {
    probs: Vec<T>,
    support: Vec<usize>,
}

impl<T: Real> PolicyDistribution<T> {
    /// Validates nonnegativity and normalization.
    pub fn new(probs: Vec<T>) -> Result<Self> {
        if probs.is_empty() {
            return Err(domain("empty distribution"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < T::zero()) {
            return Err(domain("distribution entries must be finite and nonnegative"));
        }
        let total: T = probs.iter().copied().sum();
        if (total - T::one()).abs() > normalization_tol::<T>(probs.len()) {
            return Err(domain(format!("distribution sums to {total}")));
        }
        Ok(Self::from_probs_unchecked(probs))
    }

    pub(crate) fn from_probs_unchecked(probs: Vec<T>) -> Self {
        let support = probs
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > T::zero())
            .map(|(a, _)| a)
            .collect();
        Self { probs, support }
    }

    pub fn point_mass(n_actions: usize, action: usize) -> Self {
        let mut probs = vec![T::zero(); n_actions];
        probs[action] = T::one();
        Self {
            probs,
            support: vec![action],
        }
    }

    pub fn uniform(n_actions: usize) -> Self {
        let p = T::one() / T::lit(n_actions as f64);
        Self {
            probs: vec![p; n_actions],
            support: (0..n_actions).collect(),
        }
    }

    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn prob(&self, action: usize) -> T {
        self.probs[action]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn max_prob(&self) -> T {
        self.probs.iter().copied().fold(T::zero(), T::max)
    }

    /// Lowest-index action of maximal probability.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Tolerance for `sum(probs) == 1`: 1e-12, widened for low precision scalars.
pub(crate) fn normalization_tol<T: Real>(n: usize) -> T {
    T::lit(1e-12).max(T::epsilon() * T::lit(8.0 * n as f64))
}

fn check_scores<T: Real>(z: &[T]) -> Result<()> {
    if z.is_empty() {
        return Err(domain("empty score vector"));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(domain("non-finite score"));
    }
    Ok(())
}

fn check_temperature<T: Real>(alpha: T) -> Result<()> {
    if alpha > T::zero() && alpha.is_finite() {
        Ok(())
    } else {
        Err(domain(format!("temperature must be positive, got {alpha}")))
    }
}

/// Lowest index of the maximal entry.
pub fn argmax<T: Real>(z: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate().skip(1) {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn max_of<T: Real>(z: &[T]) -> T {
    z.iter().copied().fold(T::neg_infinity(), T::max)
}

/// `log sum_a exp(z_a)`, max-shifted.
pub fn sfmax<T: Real>(z: &[T]) -> Result<T> {
    check_scores(z)?;
    Ok(log_sum_exp(z))
}

pub(crate) fn log_sum_exp<T: Real>(z: &[T]) -> T {
    let m = max_of(z);
    let s: T = z.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

/// Boltzmann distribution `exp(q / alpha) / Z`.
pub fn softmax_policy<T: Real>(q: &[T], alpha: T) -> Result<PolicyDistribution<T>> {
    check_scores(q)?;
    check_temperature(alpha)?;
    Ok(PolicyDistribution::from_probs_unchecked(softmax(q, alpha)))
}

pub(crate) fn softmax<T: Real>(q: &[T], alpha: T) -> Vec<T> {
    let m = max_of(q);
    let mut probs: Vec<T> = q.iter().map(|&v| ((v - m) / alpha).exp()).collect();
    let total: T = probs.iter().copied().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    probs
}

/// Actions kept by the sparsemax threshold test, ascending.
///
/// Scores are sorted descending (ties broken by ascending index) and the k-th
/// largest score `z_(k)` (1-based) is kept while `1 + k z_(k) > sum_{j<=k} z_(j)`.
pub fn support_set<T: Real>(z: &[T]) -> Result<Vec<usize>> {
    check_scores(z)?;
    Ok(support_unchecked(z))
}

pub(crate) fn support_unchecked<T: Real>(z: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..z.len()).collect();
    // stable: equal scores keep ascending index order
    order.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).expect("finite scores"));
    let mut cumulative = T::zero();
    let mut size = 1;
    for (i, &a) in order.iter().enumerate() {
        cumulative += z[a];
        let k = T::lit((i + 1) as f64);
        if T::one() + k * z[a] > cumulative {
            size = i + 1;
        }
    }
    let mut support = order[..size].to_vec();
    support.sort_unstable();
    support
}

/// `(sum_{a in S} z_a - 1) / |S|`.
pub fn g_threshold<T: Real>(z: &[T], support: &[usize]) -> Result<T> {
    if support.is_empty() {
        return Err(domain("empty support set"));
    }
    if let Some(&a) = support.iter().find(|&&a| a >= z.len()) {
        return Err(domain(format!("support index {a} out of range")));
    }
    Ok(threshold_unchecked(z, support))
}

pub(crate) fn threshold_unchecked<T: Real>(z: &[T], support: &[usize]) -> T {
    let s: T = support.iter().map(|&a| z[a]).sum();
    (s - T::one()) / T::lit(support.len() as f64)
}

/// Threshold and support of an already scaled score vector.
pub(crate) fn sparse_threshold<T: Real>(z: &[T]) -> (T, Vec<usize>) {
    let support = support_unchecked(z);
    (threshold_unchecked(z, &support), support)
}

/// `(q / alpha - G(q / alpha))^+`, the Euclidean projection of `q / alpha` onto the simplex.
pub fn sparsemax_policy<T: Real>(q: &[T], alpha: T) -> Result<PolicyDistribution<T>> {
    check_scores(q)?;
    check_temperature(alpha)?;
    let z: Vec<T> = q.iter().map(|&v| v / alpha).collect();
    Ok(PolicyDistribution::from_probs_unchecked(sparsemax_scaled(&z)))
}

pub(crate) fn sparsemax_scaled<T: Real>(z: &[T]) -> Vec<T> {
    let (tau, support) = sparse_threshold(z);
    let mut probs = vec![T::zero(); z.len()];
    for a in support {
        probs[a] = (z[a] - tau).max(T::zero());
    }
    probs
}

/// `1/2 [1 + sum_{a in S} (z_a^2 - G(z)^2)]` on a scaled score vector.
pub fn spmax<T: Real>(z: &[T]) -> Result<T> {
    check_scores(z)?;
    Ok(spmax_unchecked(z))
}

pub(crate) fn spmax_unchecked<T: Real>(z: &[T]) -> T {
    // The closed form is translation-equivariant; evaluating it on z - max(z)
    // keeps the supported squares inside [0, 1].
    let m = max_of(z);
    let shifted: Vec<T> = z.iter().map(|&v| v - m).collect();
    let (tau, support) = sparse_threshold(&shifted);
    let half = T::lit(0.5);
    let s: T = support
        .iter()
        .map(|&a| shifted[a] * shifted[a] - tau * tau)
        .sum();
    half * (T::one() + s) + m
}

/// `1/2 (1 - sum_a mu_a^2)`.
pub fn tsallis_entropy<T: Real>(mu: &PolicyDistribution<T>) -> T {
    let sq: T = mu.probs().iter().map(|&p| p * p).sum();
    T::lit(0.5) * (T::one() - sq)
}

/// `-sum_a mu_a ln mu_a` with `0 ln 0 = 0`.
pub fn shannon_entropy<T: Real>(mu: &PolicyDistribution<T>) -> T {
    -mu.support()
        .iter()
        .map(|&a| {
            let p = mu.prob(a);
            p * p.ln()
        })
        .sum::<T>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn sfmax_examples() {
        assert!(close(sfmax(&[0.0, 0.0]).unwrap(), 2f64.ln(), 1e-15));
        assert_eq!(sfmax(&[3.25f64]).unwrap(), 3.25);
        assert!(sfmax::<f64>(&[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
        assert!(close(sfmax(&z).unwrap(), oracle::naive_log_sum_exp(&z), 1e-12));
        // no overflow where the naive sum would
        assert!(close(sfmax(&[1000.0, 1000.0]).unwrap(), 1000.0 + 2f64.ln(), 1e-12));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_policy(&[1.0, 1.0], 0.3).unwrap();
        assert_eq!(p.probs(), &[0.5, 0.5]);
        let p = softmax_policy(&[1.0, 0.0], 1.0).unwrap();
        let e = 1f64.exp();
        assert!(close(p.prob(0), e / (e + 1.0), 1e-15));
        assert!(close(p.prob(1), 1.0 / (e + 1.0), 1e-15));
        let p = softmax_policy(&[5.0, 0.0], 0.1).unwrap();
        assert!(p.prob(0) > 0.99 && p.prob(1) > 0.0);
        assert_eq!(p.support(), &[0, 1]);
        assert!(softmax_policy(&[1.0], 0.0).is_err());
        assert!(softmax_policy(&[1.0], -1.0).is_err());
    }

    #[test]
    fn support_examples() {
        assert_eq!(support_set(&[-7.0]).unwrap(), vec![0]);
        assert_eq!(support_set(&[1.0, 0.0]).unwrap(), vec![0]);
        assert_eq!(support_set(&[0.4, 0.4]).unwrap(), vec![0, 1]);
        assert_eq!(support_set(&[0.0, 0.9, 0.5]).unwrap(), vec![1, 2]);
        assert!(support_set::<f64>(&[]).is_err());
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(g_threshold(&[2.5], &[0]).unwrap(), 1.5);
        assert_eq!(g_threshold(&[2.5, 2.5], &[0, 1]).unwrap(), 2.0);
        assert!(g_threshold(&[1.0], &[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let z: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let s = support_set(&z).unwrap();
            let g = g_threshold(&z, &s).unwrap();
            let mass: f64 = z.iter().map(|v| (v - g).max(0.0)).sum();
            assert!(close(mass, 1.0, 1e-12));
        }
    }

    #[test]
    fn sparsemax_examples() {
        assert_eq!(sparsemax_policy(&[2.0, 2.0], 0.7).unwrap().probs(), &[0.5, 0.5]);
        let p = sparsemax_policy(&[1.0, 0.0], 1.0).unwrap();
        assert_eq!(p.probs(), &[1.0, 0.0]);
        assert_eq!(p.support(), &[0]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let q: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = sparsemax_policy(&q, 0.5).unwrap();
            let z: Vec<f64> = q.iter().map(|v| v / 0.5).collect();
            let proj = oracle::simplex_projection_bruteforce(&z);
            for (a, b) in p.probs().iter().zip(&proj) {
                assert!(close(*a, *b, 1e-10));
            }
        }
        assert!(sparsemax_policy(&[1.0], 0.0).is_err());
    }

    #[test]
    fn spmax_examples() {
        assert!(close(spmax(&[1.75]).unwrap(), 1.75, 1e-15));
        assert!(close(spmax(&[0.3, 0.3]).unwrap(), 0.55, 1e-15));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z: Vec<f64> = (0..8).map(|_| rng.random_range(-0.6..0.6)).collect();
        let v = spmax(&z).unwrap();
        let mu = sparsemax_policy(&z, 1.0).unwrap();
        assert!(close(v, oracle::tsallis_plug_in(&z, mu.probs()), 1e-12));
        // 2e-3 against a coarse grid search over the simplex
        let grid = oracle::tsallis_grid_search(&z, 1_000_000);
        assert!(v >= grid - 1e-12 && v - grid <= 2e-3, "{v} vs grid {grid}");
    }

    #[test]
    fn entropy_examples() {
        let det = PolicyDistribution::<f64>::point_mass(3, 1);
        assert_eq!(tsallis_entropy(&det), 0.0);
        assert_eq!(shannon_entropy(&det), 0.0);
        let u = PolicyDistribution::<f64>::uniform(4);
        assert!(close(tsallis_entropy(&u), 0.5 * (1.0 - 0.25), 1e-15));
        assert!(close(shannon_entropy(&u), 4f64.ln(), 1e-15));
        let half = PolicyDistribution::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(tsallis_entropy(&half), 0.25);
        assert!(close(shannon_entropy(&half), 2f64.ln(), 1e-15));
    }

    #[test]
    fn distribution_validation() {
        assert!(PolicyDistribution::new(vec![0.5, 0.4]).is_err());
        assert!(PolicyDistribution::new(vec![1.5, -0.5]).is_err());
        let p = PolicyDistribution::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(p.support(), &[1]);
        assert_eq!(p.argmax(), 1);
    }

    #[test]
    fn generic_over_f32() {
        let p = sparsemax_policy(&[1.0f32, 0.5, -2.0], 1.0).unwrap();
        assert_eq!(p.support(), &[0, 1]);
        assert!((p.prob(0) - 0.75).abs() < 1e-6);
        assert!((spmax(&[0.3f32, 0.3]).unwrap() - 0.55).abs() < 1e-6);
    }
}
