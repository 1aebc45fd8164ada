//! Invariant suites behind `spcl check`. Every check compares production code against an
//! independent oracle or a closed-form identity and reports the worst violation seen.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spcl_core::consistency::{
    self, check_original_gap, check_sparse_gap, ConsistencyWitness, GapReport, ResidualSearchOptions,
};
use spcl_core::math::{self, PolicyDistribution};
use spcl_core::mdp::{self, BackupKind, IterationOptions, TabularMdp};
use spcl_core::model::{Activation, Architecture, FeatureEncoder, LambdaFactor, Model, ModelConfig, PolicyHead};
use spcl_core::oracle;
use spcl_core::pcl::{self, Episode};

use crate::args::{CheckArgs, Suite};
use crate::config::write_resolved;
use crate::{CliError, RunLog};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub suite: &'static str,
    pub check: &'static str,
    pub trials: usize,
    pub max_violation: f64,
    pub tolerance: f64,
    /// Where the worst violation occurred.
    pub detail: String,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_violation <= self.tolerance
    }
}

pub const SUMMARY_HEADER: &str = "suite,check,trials,max_violation,tolerance,status";

impl CheckResult {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:e},{:e},{}",
            self.suite,
            self.check,
            self.trials,
            self.max_violation,
            self.tolerance,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

/// Running maximum of one check; NaN counts as the worst possible violation.
struct Tracker {
    suite: &'static str,
    check: &'static str,
    tolerance: f64,
    trials: usize,
    worst: f64,
    detail: String,
}

impl Tracker {
    fn new(suite: &'static str, check: &'static str, tolerance: f64) -> Self {
        Self {
            suite,
            check,
            tolerance,
            trials: 0,
            worst: 0.0,
            detail: String::new(),
        }
    }

    fn record(&mut self, violation: f64, detail: impl FnOnce() -> String) {
        self.trials += 1;
        let v = if violation.is_nan() { f64::INFINITY } else { violation };
        if v > self.worst || (self.trials == 1 && v >= self.worst) {
            self.worst = v;
            self.detail = detail();
        }
    }

    fn finish(self) -> CheckResult {
        CheckResult {
            suite: self.suite,
            check: self.check,
            trials: self.trials,
            max_violation: self.worst,
            tolerance: self.tolerance,
            detail: self.detail,
        }
    }
}

fn suite_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ salt)
}

const ALPHAS: [f64; 3] = [0.1, 1.0, 10.0];

pub type SparsemaxFn<'a> = &'a dyn Fn(&[f64], f64) -> Vec<f64>;

/// Production sparsemax as a plain probability vector.
pub fn production_sparsemax(q: &[f64], alpha: f64) -> Vec<f64> {
    math::sparsemax_policy(q, alpha).map(|d| d.probs().to_vec()).unwrap_or_default()
}

/// Random scores of length 1..=12 with occasional ties, and `alpha` from {0.1, 1, 10}.
pub fn random_scores<R: Rng + ?Sized>(rng: &mut R) -> (Vec<f64>, f64) {
    let n = rng.random_range(1..=12);
    let alpha = ALPHAS[rng.random_range(0..ALPHAS.len())];
    let spread = 10f64.powf(rng.random_range(-1.0..0.5));
    let mut z: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0) * spread).collect();
    if n > 1 && rng.random_bool(0.2) {
        let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
        z[i] = z[j];
    }
    (z.iter().map(|v| v * alpha).collect(), alpha)
}

/// Operator identities; `sparsemax` is the implementation under test.
pub fn operators_suite(trials: usize, seed: u64, sparsemax: SparsemaxFn<'_>) -> Vec<CheckResult> {
    const S: &str = "operators";
    let mut rng = suite_rng(seed, 1);
    let mut projection = Tracker::new(S, "sparsemax-vs-projection", 1e-10);
    let mut simplex = Tracker::new(S, "sparsemax-on-simplex", 1e-12);
    let mut variational = Tracker::new(S, "spmax-vs-plug-in", 1e-12);
    let mut spmax_range = Tracker::new(S, "spmax-range", 1e-12);
    let mut lse = Tracker::new(S, "sfmax-vs-log-sum-exp", 1e-12);
    let mut entropy = Tracker::new(S, "tsallis-range", 1e-12);
    for trial in 0..trials {
        let (q, alpha) = random_scores(&mut rng);
        let z: Vec<f64> = q.iter().map(|v| v / alpha).collect();
        let n = z.len() as f64;
        let reference = oracle::simplex_projection_bruteforce(&z);
        let mu = sparsemax(&q, alpha);
        let proj_err = if mu.len() == reference.len() {
            mu.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        } else {
            f64::INFINITY
        };
        projection.record(proj_err, || format!("trial {trial}: z={z:?} mu={mu:?} oracle={reference:?}"));
        let mass: f64 = mu.iter().sum();
        let negative = mu.iter().fold(0.0f64, |m, &p| m.max(-p));
        simplex.record((mass - 1.0).abs().max(negative), || format!("trial {trial}: mu={mu:?}"));

        let sp = math::spmax(&z).unwrap_or(f64::NAN);
        let plug = oracle::tsallis_plug_in(&z, &reference);
        variational.record((sp - plug).abs(), || format!("trial {trial}: spmax {sp} plug-in {plug}"));
        let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let excess = sp - zmax;
        let cap = (n - 1.0) / (2.0 * n);
        spmax_range.record((-excess).max(excess - cap).max(0.0), || format!("trial {trial}: spmax - max z = {excess}, cap {cap}"));

        let sf = math::sfmax(&z).unwrap_or(f64::NAN);
        let naive = oracle::naive_log_sum_exp(&z);
        lse.record((sf - naive).abs() / naive.abs().max(1.0), || format!("trial {trial}: sfmax {sf} naive {naive}"));

        let h = PolicyDistribution::new(reference.clone()).map(|d| math::tsallis_entropy(&d)).unwrap_or(f64::NAN);
        entropy.record((-h).max(h - cap).max(0.0), || format!("trial {trial}: entropy {h}, cap {cap}"));
    }
    vec![
        projection.finish(),
        simplex.finish(),
        variational.finish(),
        spmax_range.finish(),
        lse.finish(),
        entropy.finish(),
    ]
}

/// Random MDP with 2..=`max_states` states, 1..=`max_actions` actions and gamma in [0.5, 0.99).
pub fn random_mdp<R: Rng + ?Sized>(rng: &mut R, max_states: usize, max_actions: usize) -> TabularMdp<f64> {
    let n = rng.random_range(2..=max_states.max(2));
    let k = rng.random_range(1..=max_actions.max(1));
    let gamma = rng.random_range(0.5..0.99);
    TabularMdp::random(n, k, gamma, rng).expect("valid random MDP")
}

fn random_values<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Row of the bound-constant table printed by the mdp suite.
#[derive(Clone, Debug)]
pub struct BoundTrendRow {
    pub n_actions: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub soft_constant: f64,
    pub sparse_constant: f64,
    pub soft_bound: f64,
    pub sparse_bound: f64,
    pub soft_gap: f64,
    pub sparse_gap: f64,
}

pub const BOUND_TREND_HEADER: &str =
    "n_actions,alpha,gamma,soft_constant,sparse_constant,soft_bound,sparse_bound,soft_gap,sparse_gap";

impl BoundTrendRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.n_actions,
            self.alpha,
            self.gamma,
            self.soft_constant,
            self.sparse_constant,
            self.soft_bound,
            self.sparse_bound,
            self.soft_gap,
            self.sparse_gap
        )
    }
}

/// Sandwich bounds of the soft- and sparse-optimal policies for each action count.
pub fn bound_trend(action_counts: &[usize], per_count: usize, seed: u64) -> (Vec<CheckResult>, Vec<BoundTrendRow>) {
    const S: &str = "mdp";
    let mut rng = suite_rng(seed, 5);
    let mut soft = Tracker::new(S, "soft-bound-sandwich", 0.0);
    let mut sparse = Tracker::new(S, "sparse-bound-sandwich", 0.0);
    let mut constants = Tracker::new(S, "sparse-constant-below-soft", 0.0);
    let mut rows = Vec::new();
    for &k in action_counts {
        let soft_c = (k as f64).ln();
        let sparse_c = (k as f64 - 1.0) / (2.0 * k as f64);
        if k >= 3 {
            constants.record(if sparse_c < soft_c { 0.0 } else { 1.0 }, || format!("|A|={k}: {sparse_c} vs {soft_c}"));
        }
        for _ in 0..per_count {
            let n = rng.random_range(2..=6);
            let gamma = rng.random_range(0.5..0.95);
            let alpha = [0.1, 1.0][rng.random_range(0..2)];
            let m = TabularMdp::random(n, k, gamma, &mut rng).expect("valid random MDP");
            match mdp::check_bounds(&m, alpha) {
                Ok(r) => {
                    let slack = mdp::BOUND_SLACK;
                    soft.record((r.soft_gap - r.soft_bound - slack).max(0.0), || format!("|A|={k}"));
                    sparse.record((r.sparse_gap - r.sparse_bound - slack).max(0.0), || format!("|A|={k}"));
                    rows.push(BoundTrendRow {
                        n_actions: k,
                        alpha,
                        gamma,
                        soft_constant: soft_c,
                        sparse_constant: sparse_c,
                        soft_bound: r.soft_bound,
                        sparse_bound: r.sparse_bound,
                        soft_gap: r.soft_gap,
                        sparse_gap: r.sparse_gap,
                    });
                }
                Err(e) => {
                    soft.record(f64::INFINITY, || format!("|A|={k}: {e}"));
                    sparse.record(f64::INFINITY, || format!("|A|={k}: {e}"));
                }
            }
        }
    }
    (vec![soft.finish(), sparse.finish(), constants.finish()], rows)
}

/// Bellman operator properties on random MDP/value pairs, for every backup kind.
pub fn mdp_suite(trials: usize, seed: u64) -> (Vec<CheckResult>, Vec<BoundTrendRow>) {
    const S: &str = "mdp";
    let mut rng = suite_rng(seed, 2);
    let mut translation = Tracker::new(S, "translation", 1e-9);
    let mut monotone = Tracker::new(S, "monotonicity", 1e-12);
    let mut contraction = Tracker::new(S, "contraction", 1e-12);
    let mut qtable = Tracker::new(S, "q-table-vs-naive", 1e-12);
    for trial in 0..trials {
        let m = random_mdp(&mut rng, 8, 6);
        let (n, k) = (m.n_states(), m.n_actions());
        let gamma = m.gamma();
        let alpha = ALPHAS[rng.random_range(0..ALPHAS.len())];
        let v = random_values(&mut rng, n, 5.0);
        let w = random_values(&mut rng, n, 5.0);
        let c = rng.random_range(-5.0..5.0);
        let up: Vec<f64> = v.iter().map(|x| x + rng.random_range(0.0..2.0)).collect();
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();

        let nested_p: Vec<Vec<Vec<f64>>> = (0..n).map(|x| (0..k).map(|a| m.transition_row(x, a).to_vec()).collect()).collect();
        let nested_r: Vec<Vec<f64>> = (0..n).map(|x| (0..k).map(|a| m.reward(x, a)).collect()).collect();
        let naive = oracle::q_table_naive(&nested_p, &nested_r, gamma, &v);
        let fast = mdp::q_from_v(&m, &v).expect("shapes agree");
        let err = fast
            .iter()
            .flatten()
            .zip(naive.iter().flatten())
            .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
            .fold(0.0, f64::max);
        qtable.record(err, || format!("trial {trial}"));

        for kind in [BackupKind::Max, BackupKind::Soft, BackupKind::Sparse] {
            let t = |x: &[f64]| mdp::backup(&m, x, kind, alpha).expect("valid backup");
            let tv = t(&v);
            let expect: Vec<f64> = tv.iter().map(|x| x + gamma * c).collect();
            let scale = tv.iter().fold(1.0f64, |s, x| s.max(x.abs())) + c.abs();
            translation.record(sup_diff(&t(&shifted), &expect) / scale, || format!("trial {trial} {kind}"));
            let tup = t(&up);
            let drop = tv.iter().zip(&tup).map(|(a, b)| a - b).fold(0.0, f64::max);
            monotone.record(drop, || format!("trial {trial} {kind}"));
            let ratio = sup_diff(&tv, &t(&w)) / sup_diff(&v, &w);
            contraction.record((ratio - gamma).max(0.0), || format!("trial {trial} {kind}: ratio {ratio} gamma {gamma}"));
        }
    }
    let (mut bounds, rows) = bound_trend(&[2, 8, 32, 128], trials.div_ceil(20).max(1), seed);
    let mut out = vec![translation.finish(), monotone.finish(), contraction.finish(), qtable.finish()];
    out.append(&mut bounds);
    (out, rows)
}

/// One line of `consistency_gaps.csv`.
#[derive(Clone, Debug)]
pub struct GapRow {
    pub trial: usize,
    pub witness: &'static str,
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub alpha: f64,
    pub residual: f64,
    pub sparse_gap: f64,
    pub sparse_bound: f64,
    pub original_gap: f64,
    pub original_bound: f64,
    pub slack: f64,
}

pub const GAP_HEADER: &str =
    "trial,witness,states,actions,gamma,alpha,residual,sparse_gap,sparse_bound,original_gap,original_bound,slack";

impl GapRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:e},{},{},{},{},{:e}",
            self.trial,
            self.witness,
            self.n_states,
            self.n_actions,
            self.gamma,
            self.alpha,
            self.residual,
            self.sparse_gap,
            self.sparse_bound,
            self.original_gap,
            self.original_bound,
            self.slack
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConsistencySuiteOptions {
    pub max_states: usize,
    pub max_actions: usize,
    pub search: ResidualSearchOptions,
}

impl Default for ConsistencySuiteOptions {
    fn default() -> Self {
        Self {
            max_states: 20,
            max_actions: 10,
            search: ResidualSearchOptions::default(),
        }
    }
}

const WITNESS_OPTS: IterationOptions = IterationOptions {
    tol: 1e-12,
    max_iters: 1_000_000,
};

/// Consistency of optimal witnesses, and the sub-optimality guarantees for optimal,
/// exactly consistent non-optimal, and residual-minimization witnesses.
pub fn consistency_suite(trials: usize, seed: u64, opts: &ConsistencySuiteOptions) -> (Vec<CheckResult>, Vec<GapRow>) {
    const S: &str = "consistency";
    let mut rng = suite_rng(seed, 3);
    let mut one_step = Tracker::new(S, "optimal-one-step-residual", 1e-8);
    let mut constraints = Tracker::new(S, "multiplier-constraints", 0.0);
    // constraint slack accepted by `validate`: 1e-12
    let mut multi_step = Tracker::new(S, "optimal-multi-step-residual", 1e-8);
    let mut family = Tracker::new(S, "prescribed-multiplier-residual", 1e-8);
    let mut sparse_gap = Tracker::new(S, "sparse-mdp-gap", 0.0);
    let mut original_gap = Tracker::new(S, "original-mdp-gap", 0.0);
    let mut rows = Vec::new();

    for trial in 0..trials {
        let n = rng.random_range(2..=opts.max_states.max(2));
        let k = rng.random_range(2..=opts.max_actions.max(2));
        let gamma = rng.random_range(0.5..0.95);
        let alpha = ALPHAS[rng.random_range(0..ALPHAS.len())];
        let m = TabularMdp::random(n, k, gamma, &mut rng).expect("valid random MDP");

        let mut witnesses: Vec<(&'static str, ConsistencyWitness<f64>)> = Vec::new();
        match consistency::optimal_witness(&m, alpha, &WITNESS_OPTS) {
            Ok(w) => {
                let tau = consistency::max_residual(&m, &w).unwrap_or(f64::NAN);
                one_step.record(tau, || format!("trial {trial}"));
                for _ in 0..3 {
                    let x0 = rng.random_range(0..n);
                    let len = rng.random_range(1..=5);
                    let actions: Vec<usize> = (0..len).map(|_| rng.random_range(0..k)).collect();
                    let r = consistency::multi_step_residual_exact(&m, &w, x0, &actions).unwrap_or(f64::NAN);
                    multi_step.record(r.abs(), || format!("trial {trial}: x0 {x0} actions {actions:?}"));
                }
                witnesses.push(("optimal", w));
            }
            Err(e) => one_step.record(f64::INFINITY, || format!("trial {trial}: {e}")),
        }

        let lambda: Vec<f64> = (0..n).map(|_| -alpha / 2.0 * rng.random::<f64>()).collect();
        match consistency::consistent_witness_with_multiplier(&m, alpha, &lambda, &WITNESS_OPTS) {
            Ok(w) => {
                let tau = consistency::max_residual(&m, &w).unwrap_or(f64::NAN);
                family.record(tau, || format!("trial {trial}"));
                witnesses.push(("prescribed-multiplier", w));
            }
            Err(e) => family.record(f64::INFINITY, || format!("trial {trial}: {e}")),
        }

        match consistency::residual_minimization_witness(&m, alpha, &opts.search, &mut rng) {
            Ok(w) => witnesses.push(("residual-minimization", w)),
            Err(e) => sparse_gap.record(f64::INFINITY, || format!("trial {trial} residual search: {e}")),
        }

        for (name, w) in &witnesses {
            let ok = w.validate(1e-12).is_ok();
            constraints.record(if ok { 0.0 } else { 1.0 }, || format!("trial {trial} {name}"));
            let excess = |r: &GapReport<f64>| (r.worst_gap - r.bound - r.slack).max(0.0);
            let sp = check_sparse_gap(&m, w);
            let orig = check_original_gap(&m, w);
            match &sp {
                Ok(r) => sparse_gap.record(excess(r), || format!("trial {trial} {name}")),
                Err(e) => sparse_gap.record(f64::INFINITY, || format!("trial {trial} {name}: {e}")),
            }
            match &orig {
                Ok(r) => original_gap.record(excess(r), || format!("trial {trial} {name}")),
                Err(e) => original_gap.record(f64::INFINITY, || format!("trial {trial} {name}: {e}")),
            }
            if let (Ok(sp), Ok(orig)) = (sp, orig) {
                rows.push(GapRow {
                    trial,
                    witness: name,
                    n_states: n,
                    n_actions: k,
                    gamma,
                    alpha,
                    residual: sp.residual,
                    sparse_gap: sp.worst_gap,
                    sparse_bound: sp.bound,
                    original_gap: orig.worst_gap,
                    original_bound: orig.bound,
                    slack: sp.slack,
                });
            }
        }
    }
    (
        vec![
            one_step.finish(),
            constraints.finish(),
            multi_step.finish(),
            family.finish(),
            sparse_gap.finish(),
            original_gap.finish(),
        ],
        rows,
    )
}

/// A model layout exercised by the gradient suite.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub policy: PolicyHead,
    pub unified: bool,
    pub lambda_factor: LambdaFactor,
}

impl ModelSpec {
    pub fn label(&self) -> String {
        let head = match (self.unified, self.policy) {
            (true, _) => "unified",
            (false, PolicyHead::Sparse) => "sparse",
            (false, PolicyHead::Soft) => "soft",
        };
        format!("{}/{head}/{}", self.arch, self.lambda_factor)
    }
}

/// Every architecture crossed with every head and multiplier layout.
pub fn all_model_specs() -> Vec<ModelSpec> {
    let archs = [
        Architecture::Tabular,
        Architecture::Linear,
        Architecture::Mlp {
            hidden: vec![5],
            activation: Activation::Tanh,
        },
        Architecture::Mlp {
            hidden: vec![4, 3],
            activation: Activation::Relu,
        },
    ];
    let mut specs = Vec::new();
    for arch in archs {
        for (policy, unified) in [(PolicyHead::Sparse, false), (PolicyHead::Sparse, true)] {
            for lambda_factor in [LambdaFactor::Scalar, LambdaFactor::PerAction] {
                specs.push(ModelSpec {
                    arch: arch.clone(),
                    policy,
                    unified,
                    lambda_factor,
                });
            }
        }
        specs.push(ModelSpec {
            arch,
            policy: PolicyHead::Soft,
            unified: false,
            lambda_factor: LambdaFactor::PerAction,
        });
    }
    specs
}

/// Random off-policy episodes over `encoder`'s observation and action ranges.
pub fn random_episodes<R: Rng + ?Sized>(encoder: &FeatureEncoder, count: usize, max_len: usize, rng: &mut R) -> Vec<Episode<f64>> {
    (0..count)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            let observations = (0..=len).map(|_| rng.random_range(0..encoder.n_observations)).collect();
            let actions = (0..len).map(|_| rng.random_range(0..encoder.n_actions)).collect();
            let rewards = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let terminated = rng.random_bool(0.5);
            Episode::from_raw(encoder, observations, actions, rewards, terminated, 0).expect("consistent episode")
        })
        .collect()
}

fn signature(model: &Model<f64>, params: &[f64], episodes: &[Episode<f64>]) -> Option<Vec<bool>> {
    let mut sig = Vec::new();
    for ep in episodes {
        for x in &ep.features {
            let (_, tape) = model.forward_at(params, x).ok()?;
            sig.extend(tape.kink_signature());
        }
    }
    Some(sig)
}

fn batch_loss(model: &Model<f64>, episodes: &[Episode<f64>], rollout: usize, gamma: f64) -> spcl_core::Result<(f64, Vec<f64>)> {
    let (report, grad) = match model.config().policy {
        PolicyHead::Sparse => pcl::loss_and_grads(model, episodes, rollout, gamma)?,
        PolicyHead::Soft => pcl::soft_loss_and_grads(model, episodes, rollout, gamma)?,
    };
    Ok((report.loss, grad))
}

/// Relative distance between the analytic gradient and central differences, skipping
/// coordinates whose perturbation crosses a kink of the piecewise-smooth heads.
pub fn gradient_error(model: &Model<f64>, episodes: &[Episode<f64>], rollout: usize, gamma: f64) -> spcl_core::Result<f64> {
    const H: f64 = 1e-6;
    let (_, analytic) = batch_loss(model, episodes, rollout, gamma)?;
    let base = model.params().to_vec();
    let base_sig = signature(model, &base, episodes);
    let mut probe = model.clone();
    let mut params = base.clone();
    let mut fd = Vec::new();
    let mut kept = Vec::new();
    for i in 0..base.len() {
        let mut eval = |delta: f64| -> spcl_core::Result<(f64, Option<Vec<bool>>)> {
            params[i] = base[i] + delta;
            probe.set_params(params.clone())?;
            let sig = signature(&probe, &params, episodes);
            let (loss, _) = batch_loss(&probe, episodes, rollout, gamma)?;
            Ok((loss, sig))
        };
        let (up, sig_up) = eval(H)?;
        let (down, sig_down) = eval(-H)?;
        params[i] = base[i];
        if sig_up != base_sig || sig_down != base_sig {
            continue;
        }
        fd.push((up - down) / (2.0 * H));
        kept.push(analytic[i]);
    }
    Ok(oracle::relative_error(&fd, &kept, 1e-8))
}

/// Deterministic random MDP: each `(x, a)` moves to one uniformly drawn successor.
pub fn deterministic_mdp<R: Rng + ?Sized>(rng: &mut R, n: usize, k: usize, gamma: f64) -> TabularMdp<f64> {
    let mut p = vec![0.0; n * k * n];
    for xa in 0..n * k {
        p[xa * n + rng.random_range(0..n)] = 1.0;
    }
    let r = (0..n * k).map(|_| rng.random::<f64>()).collect();
    TabularMdp::new(n, k, p, r, gamma, vec![false; n]).expect("valid deterministic MDP")
}

/// Episodes following the MDP's deterministic dynamics under uniformly random actions.
pub fn mdp_episodes<R: Rng + ?Sized>(m: &TabularMdp<f64>, encoder: &FeatureEncoder, count: usize, max_len: usize, rng: &mut R) -> Vec<Episode<f64>> {
    (0..count)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            let mut obs = vec![rng.random_range(0..m.n_states())];
            let mut actions = Vec::new();
            let mut rewards = Vec::new();
            for _ in 0..len {
                let x = *obs.last().unwrap();
                let a = rng.random_range(0..m.n_actions());
                let y = m.transition_row(x, a).iter().position(|&p| p == 1.0).expect("deterministic row");
                actions.push(a);
                rewards.push(m.reward(x, a));
                obs.push(y);
            }
            Episode::from_raw(encoder, obs, actions, rewards, false, 0).expect("consistent episode")
        })
        .collect()
}

/// Loss and gradient norm of a tabular model holding the exact optimal witness.
pub fn fixed_point_sample<R: Rng + ?Sized>(rng: &mut R) -> spcl_core::Result<(f64, f64)> {
    let n = rng.random_range(2..=8);
    let k = rng.random_range(2..=5);
    let gamma = rng.random_range(0.5..0.95);
    let alpha = ALPHAS[rng.random_range(0..ALPHAS.len())];
    let m = deterministic_mdp(rng, n, k, gamma);
    let w = consistency::optimal_witness(&m, alpha, &WITNESS_OPTS)?;
    let lambda_factor = if rng.random_bool(0.5) { LambdaFactor::PerAction } else { LambdaFactor::Scalar };
    let model = Model::from_tabular_witness(&w, lambda_factor)?;
    let encoder = FeatureEncoder::new(n, k, 1)?;
    let episodes = mdp_episodes(&m, &encoder, 4, 10, rng);
    let rollout = rng.random_range(1..=6);
    let (report, grad) = pcl::loss_and_grads(&model, &episodes, rollout, gamma)?;
    Ok((report.loss, grad.iter().map(|g| g * g).sum::<f64>().sqrt()))
}

/// Finite-difference agreement for every model spec and both losses, plus the
/// fixed-point property of exact witnesses.
pub fn gradients_suite(trials: usize, seed: u64) -> Vec<CheckResult> {
    const S: &str = "gradients";
    let mut rng = suite_rng(seed, 4);
    let mut fd = Tracker::new(S, "finite-difference", 1e-5);
    let mut fixed_loss = Tracker::new(S, "fixed-point-loss", 1e-15);
    let mut fixed_grad = Tracker::new(S, "fixed-point-gradient-norm", 1e-7);
    let specs = all_model_specs();
    for trial in 0..trials {
        let n_obs = rng.random_range(2..=4);
        let n_act = rng.random_range(2..=4);
        let window = rng.random_range(1..=2);
        let alpha = ALPHAS[rng.random_range(0..ALPHAS.len())];
        let gamma = rng.random_range(0.5..0.99);
        let rollout = rng.random_range(1..=4);
        let encoder = FeatureEncoder::new(n_obs, n_act, window).expect("positive window");
        let episodes = random_episodes(&encoder, 2, 5, &mut rng);
        for spec in &specs {
            let mut cfg = ModelConfig::new(spec.arch.clone(), encoder.dim(), n_act, alpha);
            cfg.policy = spec.policy;
            cfg.unified = spec.unified;
            cfg.lambda_factor = spec.lambda_factor;
            let err = Model::with_init(cfg, &mut rng, false)
                .and_then(|model| gradient_error(&model, &episodes, rollout, gamma))
                .unwrap_or(f64::INFINITY);
            fd.record(err, || format!("trial {trial} {}", spec.label()));
        }
        match fixed_point_sample(&mut rng) {
            Ok((loss, norm)) => {
                fixed_loss.record(loss, || format!("trial {trial}"));
                fixed_grad.record(norm, || format!("trial {trial}"));
            }
            Err(e) => {
                fixed_loss.record(f64::INFINITY, || format!("trial {trial}: {e}"));
                fixed_grad.record(f64::INFINITY, || format!("trial {trial}: {e}"));
            }
        }
    }
    vec![fd.finish(), fixed_loss.finish(), fixed_grad.finish()]
}

/// Output of `spcl check`.
#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    pub results: Vec<CheckResult>,
    pub gaps: Vec<GapRow>,
    pub bound_trend: Vec<BoundTrendRow>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn summary_csv(&self) -> String {
        let mut out = format!("{SUMMARY_HEADER}\n");
        for r in &self.results {
            let _ = writeln!(out, "{}", r.csv_row());
        }
        out
    }
}

pub fn run_suites(suite: Suite, trials: usize, seed: u64, sparsemax: SparsemaxFn<'_>) -> CheckReport {
    let mut report = CheckReport::default();
    let wants = |s: Suite| suite == s || suite == Suite::All;
    if wants(Suite::Operators) {
        report.results.extend(operators_suite(trials, seed, sparsemax));
    }
    if wants(Suite::Mdp) {
        let (results, rows) = mdp_suite(trials, seed);
        report.results.extend(results);
        report.bound_trend = rows;
    }
    if wants(Suite::Consistency) {
        let (results, gaps) = consistency_suite(trials, seed, &ConsistencySuiteOptions::default());
        report.results.extend(results);
        report.gaps = gaps;
    }
    if wants(Suite::Gradients) {
        report.results.extend(gradients_suite(trials, seed));
    }
    report
}

pub fn run(args: &CheckArgs) -> Result<(), CliError> {
    write_resolved(&args.out, "check", args)?;
    let mut log = RunLog::open(&args.out)?;
    log.line(&format!("check start {:?}", args.suite));
    let report = run_suites(args.suite, args.trials, args.seed, &production_sparsemax);
    let summary = report.summary_csv();
    std::fs::write(args.out.join("summary.csv"), &summary)?;
    if !report.gaps.is_empty() {
        let mut csv = format!("{GAP_HEADER}\n");
        for g in &report.gaps {
            let _ = writeln!(csv, "{}", g.csv_row());
        }
        std::fs::write(args.out.join("consistency_gaps.csv"), csv)?;
        let worst = |f: fn(&GapRow) -> f64| report.gaps.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        println!(
            "sparse-MDP worst gap {:.6e} (bound alpha/(1-gamma) ranges up to {:.6e}); original-MDP worst gap {:.6e}",
            worst(|g| g.sparse_gap),
            worst(|g| g.sparse_bound),
            worst(|g| g.original_gap)
        );
    }
    if !report.bound_trend.is_empty() {
        let mut csv = format!("{BOUND_TREND_HEADER}\n");
        for r in &report.bound_trend {
            let _ = writeln!(csv, "{}", r.csv_row());
        }
        std::fs::write(args.out.join("bound_trend.csv"), csv)?;
    }
    print!("{summary}");
    let failed: Vec<String> = report
        .results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{}/{} ({})", r.suite, r.check, r.detail))
        .collect();
    log.line(&format!("check end, {} failed", failed.len()));
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failure(format!("failed checks: {}", failed.join("; "))))
    }
}
