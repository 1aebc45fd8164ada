//! Parameterized value, policy and multiplier heads with hand-written reverse mode.
//!
//! A separate model owns three nets: `theta` (action scores `f`), `phi` (state value) and,
//! for sparse policies, `rho` (the positive factor of `lambda` and the logit of `Lambda`).
//! A unified model replaces `theta` and `phi` by a single `psi` net producing `Q`, from
//! which `v = alpha spmax(Q / alpha)` and `mu = sparsemax(Q / alpha)` follow.
//!
//! Sparse heads, with `z` the scores (`f`, or `Q / alpha` when unified):
//!
//! ```text
//! mu_a     = (z_a - G(z))^+
//! lambda_a = (G(z) - z_a)^+ exp(aux_a)
//! Lambda   = -alpha/2 sigmoid(l)
//! ```
//!
//! so `lambda_a mu_a = 0` and `Lambda in [-alpha/2, 0]` hold for every parameter value.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::consistency::ConsistencyWitness;
use crate::error::{Error, Result};
use crate::math::{self, PolicyDistribution};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Linear map without bias; exactly a lookup table on one-hot inputs.
    Tabular,
    Linear,
    Mlp { hidden: Vec<usize>, activation: Activation },
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::Tabular => f.write_str("tabular"),
            Architecture::Linear => f.write_str("linear"),
            Architecture::Mlp { hidden, activation } => {
                let sizes: Vec<String> = hidden.iter().map(|h| h.to_string()).collect();
                let act = match activation {
                    Activation::Tanh => "tanh",
                    Activation::Relu => "relu",
                };
                write!(f, "mlp:{}:{act}", sizes.join("x"))
            }
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    /// `tabular`, `linear`, or `mlp:64x64:tanh` (activation optional, default tanh).
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("bad architecture `{s}`; expected tabular, linear or mlp:HxH[:tanh|relu]"));
        match s {
            "tabular" => return Ok(Architecture::Tabular),
            "linear" => return Ok(Architecture::Linear),
            _ => {}
        }
        let rest = s.strip_prefix("mlp:").ok_or_else(bad)?;
        let (sizes, act) = rest.split_once(':').unwrap_or((rest, "tanh"));
        let hidden = sizes
            .split('x')
            .map(|h| h.parse::<usize>().ok().filter(|&h| h > 0))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(bad)?;
        let activation = match act {
            "tanh" => Activation::Tanh,
            "relu" => Activation::Relu,
            _ => return Err(bad()),
        };
        Ok(Architecture::Mlp { hidden, activation })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyHead {
    Sparse,
    Soft,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaFactor {
    Scalar,
    PerAction,
}

impl FromStr for LambdaFactor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scalar" => Ok(LambdaFactor::Scalar),
            "per_action" | "per-action" => Ok(LambdaFactor::PerAction),
            _ => Err(Error::Parse(format!("bad lambda factor `{s}`; expected scalar or per_action"))),
        }
    }
}

impl fmt::Display for LambdaFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LambdaFactor::Scalar => "scalar",
            LambdaFactor::PerAction => "per_action",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub obs_dim: usize,
    pub n_actions: usize,
    pub alpha: f64,
    pub unified: bool,
    pub policy: PolicyHead,
    pub lambda_factor: LambdaFactor,
}

impl ModelConfig {
    pub fn new(arch: Architecture, obs_dim: usize, n_actions: usize, alpha: f64) -> Self {
        Self {
            arch,
            obs_dim,
            n_actions,
            alpha,
            unified: false,
            policy: PolicyHead::Sparse,
            lambda_factor: LambdaFactor::PerAction,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.n_actions == 0 {
            return Err(Error::Domain("observation and action dimensions must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Domain(format!("alpha must be positive, got {}", self.alpha)));
        }
        if let Architecture::Mlp { hidden, .. } = &self.arch {
            if hidden.is_empty() || hidden.contains(&0) {
                return Err(Error::Domain("mlp needs nonempty positive hidden sizes".into()));
            }
        }
        Ok(())
    }

    fn n_aux(&self) -> usize {
        match self.lambda_factor {
            LambdaFactor::Scalar => 1,
            LambdaFactor::PerAction => self.n_actions,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlice {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Fully connected net over a slice of the flat parameter vector. Layer weights are
/// stored input-major (`w[i * out + o]`), each followed by its bias when present.
#[derive(Clone, Debug)]
struct Dense {
    offset: usize,
    sizes: Vec<usize>,
    bias: bool,
    activation: Activation,
}

impl Dense {
    fn new(offset: usize, input: usize, arch: &Architecture, output: usize) -> Self {
        let (hidden, bias, activation) = match arch {
            Architecture::Tabular => (Vec::new(), false, Activation::Tanh),
            Architecture::Linear => (Vec::new(), true, Activation::Tanh),
            Architecture::Mlp { hidden, activation } => (hidden.clone(), true, *activation),
        };
        let mut sizes = vec![input];
        sizes.extend(hidden);
        sizes.push(output);
        Self {
            offset,
            sizes,
            bias,
            activation,
        }
    }

    fn n_params(&self) -> usize {
        self.sizes
            .windows(2)
            .map(|w| w[0] * w[1] + if self.bias { w[1] } else { 0 })
            .sum()
    }

    /// `zero_output` leaves the last layer at zero.
    fn init<T: Real, R: Rng + ?Sized>(&self, params: &mut [T], rng: &mut R, zero_output: bool) {
        let mut at = self.offset;
        let last = self.sizes.len() - 2;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let scale = if zero_output && l == last { 0.0 } else { 1.0 / (w[0] as f64).sqrt() };
            for p in &mut params[at..at + w[0] * w[1]] {
                *p = T::lit(rng.random_range(-scale..=scale));
            }
            at += w[0] * w[1];
            if self.bias {
                params[at..at + w[1]].iter_mut().for_each(|p| *p = T::zero());
                at += w[1];
            }
        }
    }

    /// Activations `[input, hidden..., output]`.
    fn forward<T: Real>(&self, params: &[T], input: &[T]) -> Vec<Vec<T>> {
        let mut acts = vec![input.to_vec()];
        let mut at = self.offset;
        let last = self.sizes.len() - 2;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &params[at..at + n_in * n_out];
            at += n_in * n_out;
            let mut out = if self.bias {
                let b = params[at..at + n_out].to_vec();
                at += n_out;
                b
            } else {
                vec![T::zero(); n_out]
            };
            for (i, &x) in acts[l].iter().enumerate() {
                if x == T::zero() {
                    continue;
                }
                for (o, &wio) in out.iter_mut().zip(&weights[i * n_out..(i + 1) * n_out]) {
                    *o += x * wio;
                }
            }
            if l < last {
                for o in &mut out {
                    *o = match self.activation {
                        Activation::Tanh => o.tanh(),
                        Activation::Relu => o.max(T::zero()),
                    };
                }
            }
            acts.push(out);
        }
        acts
    }

    fn backward<T: Real>(&self, params: &[T], acts: &[Vec<T>], g_out: &[T], grad: &mut [T]) {
        let n_layers = self.sizes.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut at = self.offset;
        for w in self.sizes.windows(2) {
            offsets.push(at);
            at += w[0] * w[1] + if self.bias { w[1] } else { 0 };
        }
        let mut delta = g_out.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w_at = offsets[l];
            let x = &acts[l];
            for (i, &xi) in x.iter().enumerate() {
                if xi == T::zero() {
                    continue;
                }
                for (g, &d) in grad[w_at + i * n_out..w_at + (i + 1) * n_out].iter_mut().zip(&delta) {
                    *g += xi * d;
                }
            }
            if self.bias {
                let b_at = w_at + n_in * n_out;
                for (g, &d) in grad[b_at..b_at + n_out].iter_mut().zip(&delta) {
                    *g += d;
                }
            }
            if l == 0 {
                break;
            }
            let weights = &params[w_at..w_at + n_in * n_out];
            delta = (0..n_in)
                .map(|i| {
                    let back: T = weights[i * n_out..(i + 1) * n_out]
                        .iter()
                        .zip(&delta)
                        .map(|(&w, &d)| w * d)
                        .sum();
                    let y = x[i];
                    match self.activation {
                        Activation::Tanh => back * (T::one() - y * y),
                        Activation::Relu => {
                            if y > T::zero() {
                                back
                            } else {
                                T::zero()
                            }
                        }
                    }
                })
                .collect();
        }
    }
}


#[derive(Clone, Debug)]
enum Nets {
    Separate { theta: Dense, phi: Dense, rho: Option<Dense> },
    Unified { psi: Dense, rho: Option<Dense> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutputs<T> {
    pub value: T,
    pub policy: PolicyDistribution<T>,
    /// `ln mu`, present for softmax policies.
    pub log_policy: Option<Vec<T>>,
    /// `lambda(a|x)`; zero for softmax policies.
    pub nonneg_mult: Vec<T>,
    /// `Lambda(x)`; zero for softmax policies.
    pub simplex_mult: T,
    /// Raw trunk scores: `f`, or `Q` for unified models.
    pub scores: Vec<T>,
}

/// Everything `backward` needs from one forward pass.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    main: Vec<Vec<T>>,
    value_net: Option<Vec<Vec<T>>>,
    rho: Option<Vec<Vec<T>>>,
    /// Scores the policy is computed from (`f`, or `Q / alpha`).
    z: Vec<T>,
    tau: T,
    support: Vec<usize>,
    probs: Vec<T>,
    lambda: Vec<T>,
    exp_aux: Vec<T>,
    sigma: T,
}

impl<T: Real> Tape<T> {
    /// Piece selectors (support membership, multiplier activity, relu states) whose change
    /// marks a kink between two parameter values.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig: Vec<bool> = (0..self.z.len()).map(|a| self.support.contains(&a)).collect();
        sig.extend(self.z.iter().map(|&z| self.tau - z > T::zero()));
        sig.extend(self.probs.iter().map(|&p| p > T::zero()));
        for acts in [Some(&self.main), self.value_net.as_ref(), self.rho.as_ref()].into_iter().flatten() {
            for layer in &acts[1..acts.len() - 1] {
                sig.extend(layer.iter().map(|&h| h > T::zero()));
            }
        }
        sig
    }
}

/// Upstream gradients with respect to each output head.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputGrads<T> {
    pub value: T,
    pub policy: Vec<T>,
    pub log_policy: Vec<T>,
    pub nonneg_mult: Vec<T>,
    pub simplex_mult: T,
}

impl<T: Real> OutputGrads<T> {
    pub fn zeros(n_actions: usize) -> Self {
        Self {
            value: T::zero(),
            policy: vec![T::zero(); n_actions],
            log_policy: vec![T::zero(); n_actions],
            nonneg_mult: vec![T::zero(); n_actions],
            simplex_mult: T::zero(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.value == T::zero()
            && self.simplex_mult == T::zero()
            && self
                .policy
                .iter()
                .chain(&self.log_policy)
                .chain(&self.nonneg_mult)
                .all(|&g| g == T::zero())
    }
}

/// Logit used to reach `sigmoid(l) = 0 or 1` to double precision.
const SATURATED_LOGIT: f64 = 40.0;

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: Vec<T>,
    slices: Vec<ParamSlice>,
    nets: Nets,
}

impl<T: Real> Model<T> {
    /// All parameters zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let sparse = config.policy == PolicyHead::Sparse;
        let mut slices = Vec::new();
        let mut at = 0;
        let mut add = |name: &str, out: usize, slices: &mut Vec<ParamSlice>| {
            let net = Dense::new(at, config.obs_dim, &config.arch, out);
            slices.push(ParamSlice {
                name: name.into(),
                offset: at,
                len: net.n_params(),
            });
            at += net.n_params();
            net
        };
        let nets = if config.unified {
            let psi = add("psi", config.n_actions, &mut slices);
            let rho = sparse.then(|| add("rho", config.n_aux() + 1, &mut slices));
            Nets::Unified { psi, rho }
        } else {
            let theta = add("theta", config.n_actions, &mut slices);
            let phi = add("phi", 1, &mut slices);
            let rho = sparse.then(|| add("rho", config.n_aux() + 1, &mut slices));
            Nets::Separate { theta, phi, rho }
        };
        Ok(Self {
            config,
            params: vec![T::zero(); at],
            slices,
            nets,
        })
    }

    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` and biases zero, except the
    /// output layer of the score net, which starts at zero so the initial policy is uniform.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        Self::with_init(config, rng, true)
    }

    /// Like [`Self::new`]; `uniform_policy = false` draws the score output layer like the others.
    pub fn with_init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R, uniform_policy: bool) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let mut params = std::mem::take(&mut model.params);
        for (k, net) in model.dense_nets().into_iter().enumerate() {
            net.init(&mut params, rng, uniform_policy && k == 0);
        }
        model.params = params;
        Ok(model)
    }

    fn dense_nets(&self) -> Vec<&Dense> {
        match &self.nets {
            Nets::Separate { theta, phi, rho } => [Some(theta), Some(phi), rho.as_ref()].into_iter().flatten().collect(),
            Nets::Unified { psi, rho } => [Some(psi), rho.as_ref()].into_iter().flatten().collect(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn alpha(&self) -> T {
        T::lit(self.config.alpha)
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn slices(&self) -> &[ParamSlice] {
        &self.slices
    }

    pub fn slice(&self, name: &str) -> Option<&ParamSlice> {
        self.slices.iter().find(|s| s.name == name)
    }

    pub fn set_params(&mut self, params: Vec<T>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.params.len(), params.len())));
        }
        self.params = params;
        Ok(())
    }

    pub fn forward(&self, input: &[T]) -> Result<ModelOutputs<T>> {
        self.forward_with_tape(input).map(|(out, _)| out)
    }

    pub fn forward_with_tape(&self, input: &[T]) -> Result<(ModelOutputs<T>, Tape<T>)> {
        self.forward_at(&self.params, input)
    }

    /// Forward pass with an explicit parameter vector of this model's layout.
    pub fn forward_at(&self, params: &[T], input: &[T]) -> Result<(ModelOutputs<T>, Tape<T>)> {
        if input.len() != self.config.obs_dim {
            return Err(Error::Shape(format!("input has {} features, model expects {}", input.len(), self.config.obs_dim)));
        }
        let alpha = self.alpha();
        let half = alpha / T::lit(2.0);
        let n = self.config.n_actions;
        let sparse = self.config.policy == PolicyHead::Sparse;
        let (main, value_net, rho_net) = match &self.nets {
            Nets::Separate { theta, phi, rho } => (theta.forward(params, input), Some(phi.forward(params, input)), rho.as_ref()),
            Nets::Unified { psi, rho } => (psi.forward(params, input), None, rho.as_ref()),
        };
        let scores = main.last().expect("output layer").clone();
        let z: Vec<T> = if self.config.unified {
            scores.iter().map(|&q| q / alpha).collect()
        } else {
            scores.clone()
        };
        let rho = rho_net.map(|net| net.forward(params, input));

        let mut tape = Tape {
            main,
            value_net,
            rho: None,
            z,
            tau: T::zero(),
            support: Vec::new(),
            probs: Vec::new(),
            lambda: vec![T::zero(); n],
            exp_aux: Vec::new(),
            sigma: T::zero(),
        };
        let mut log_policy = None;
        let mut simplex_mult = T::zero();
        let value;
        if sparse {
            let (tau, support) = math::sparse_threshold(&tape.z);
            tape.probs = tape.z.iter().map(|&z| (z - tau).max(T::zero())).collect();
            let rho_out = rho.as_ref().expect("sparse models own a rho net").last().expect("output").clone();
            let n_aux = self.config.n_aux();
            tape.exp_aux = rho_out[..n_aux].iter().map(|a| a.exp()).collect();
            for a in 0..n {
                let gap = tau - tape.z[a];
                if gap > T::zero() {
                    tape.lambda[a] = gap * tape.exp_aux[a.min(n_aux - 1)];
                }
            }
            tape.sigma = sigmoid(rho_out[n_aux]);
            simplex_mult = -half * tape.sigma;
            value = match &tape.value_net {
                Some(acts) => acts.last().expect("output")[0],
                None => alpha * math::spmax_unchecked(&tape.z),
            };
            tape.tau = tau;
            tape.support = support;
        } else {
            let lse = math::log_sum_exp(&tape.z);
            let logs: Vec<T> = tape.z.iter().map(|&z| z - lse).collect();
            tape.probs = logs.iter().map(|l| l.exp()).collect();
            tape.tau = lse;
            value = match &tape.value_net {
                Some(acts) => acts.last().expect("output")[0],
                None => alpha * lse,
            };
            log_policy = Some(logs);
        }
        tape.rho = rho;

        let finite = value.is_finite()
            && simplex_mult.is_finite()
            && tape.probs.iter().chain(&tape.lambda).chain(&scores).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Divergence("model produced a non-finite output".into()));
        }
        let outputs = ModelOutputs {
            value,
            policy: PolicyDistribution::from_probs_unchecked(tape.probs.clone()),
            log_policy,
            nonneg_mult: tape.lambda.clone(),
            simplex_mult,
            scores,
        };
        Ok((outputs, tape))
    }

    /// Accumulates `sum_heads upstream . d head / d params` into `grad`.
    pub fn backward(&self, tape: &Tape<T>, upstream: &OutputGrads<T>, grad: &mut [T]) {
        self.backward_at(&self.params, tape, upstream, grad)
    }

    pub fn backward_at(&self, params: &[T], tape: &Tape<T>, upstream: &OutputGrads<T>, grad: &mut [T]) {
        let alpha = self.alpha();
        let n = self.config.n_actions;
        let mut g_z = vec![T::zero(); n];
        let mut g_rho: Option<Vec<T>> = None;

        if self.config.policy == PolicyHead::Sparse {
            let n_aux = self.config.n_aux();
            let mut g_aux = vec![T::zero(); n_aux + 1];
            let mut g_tau = T::zero();
            for a in 0..n {
                if tape.probs[a] > T::zero() {
                    g_z[a] += upstream.policy[a];
                    g_tau -= upstream.policy[a];
                }
                if tape.tau - tape.z[a] > T::zero() {
                    let e = tape.exp_aux[a.min(n_aux - 1)];
                    g_z[a] -= upstream.nonneg_mult[a] * e;
                    g_tau += upstream.nonneg_mult[a] * e;
                    g_aux[a.min(n_aux - 1)] += upstream.nonneg_mult[a] * tape.lambda[a];
                }
            }
            let share = g_tau / T::lit(tape.support.len() as f64);
            for &b in &tape.support {
                g_z[b] += share;
            }
            g_aux[n_aux] = upstream.simplex_mult * (-alpha / T::lit(2.0)) * tape.sigma * (T::one() - tape.sigma);
            g_rho = Some(g_aux);
        } else {
            let sum_log: T = upstream.log_policy.iter().copied().sum();
            let mean_policy: T = tape.probs.iter().zip(&upstream.policy).map(|(&p, &g)| p * g).sum();
            for a in 0..n {
                g_z[a] += upstream.log_policy[a] - tape.probs[a] * sum_log;
                g_z[a] += tape.probs[a] * (upstream.policy[a] - mean_policy);
            }
        }

        match &self.nets {
            Nets::Separate { theta, phi, rho } => {
                if g_z.iter().any(|&g| g != T::zero()) {
                    theta.backward(params, &tape.main, &g_z, grad);
                }
                if upstream.value != T::zero() {
                    phi.backward(params, tape.value_net.as_ref().expect("phi activations"), &[upstream.value], grad);
                }
                if let (Some(net), Some(g)) = (rho, g_rho) {
                    net.backward(params, tape.rho.as_ref().expect("rho activations"), &g, grad);
                }
            }
            Nets::Unified { psi, rho } => {
                // z = Q / alpha and dv/dQ = mu for both spmax and sfmax values
                let g_q: Vec<T> = (0..n).map(|a| g_z[a] / alpha + upstream.value * tape.probs[a]).collect();
                if g_q.iter().any(|&g| g != T::zero()) {
                    psi.backward(params, &tape.main, &g_q, grad);
                }
                if let (Some(net), Some(g)) = (rho, g_rho) {
                    net.backward(params, tape.rho.as_ref().expect("rho activations"), &g, grad);
                }
            }
        }
    }

    /// Tabular sparse model reproducing `witness` exactly on one-hot state inputs.
    ///
    /// Scores are set to `mu` on the support and `-lambda / alpha` elsewhere, so that the
    /// threshold is 0 and `lambda = (0 - f)^+ alpha`; the `Lambda` logit inverts the sigmoid.
    pub fn from_tabular_witness(witness: &ConsistencyWitness<T>, lambda_factor: LambdaFactor) -> Result<Self> {
        let n_states = witness.n_states();
        let n_actions = witness.nonneg_mult.first().map_or(0, Vec::len);
        let mut config = ModelConfig::new(Architecture::Tabular, n_states, n_actions, witness.alpha.as_f64());
        config.lambda_factor = lambda_factor;
        let mut model = Self::zeros(config)?;
        let alpha = witness.alpha;
        let theta = model.slice("theta").expect("theta").offset;
        let phi = model.slice("phi").expect("phi").offset;
        let rho = model.slice("rho").expect("rho").offset;
        let n_aux = model.config.n_aux();
        let half = alpha / T::lit(2.0);
        for x in 0..n_states {
            for a in 0..n_actions {
                let p = witness.policy.prob(x, a);
                model.params[theta + x * n_actions + a] = if p > T::zero() { p } else { -witness.nonneg_mult[x][a] / alpha };
            }
            model.params[phi + x] = witness.values[x];
            let row = rho + x * (n_aux + 1);
            for k in 0..n_aux {
                model.params[row + k] = alpha.ln();
            }
            let s = -witness.simplex_mult[x] / half;
            let limit = T::lit(SATURATED_LOGIT);
            model.params[row + n_aux] = if s <= T::zero() {
                -limit
            } else if s >= T::one() {
                limit
            } else {
                (s / (T::one() - s)).ln().max(-limit).min(limit)
            };
        }
        Ok(model)
    }

    /// Serialized form: one JSON header line, then the parameters as little-endian floats.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            dtype: T::DTYPE.into(),
            n_params: self.params.len(),
            config: self.config.clone(),
            slices: self.slices.clone(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for &p in &self.params {
            p.push_le_bytes(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Parse("checkpoint lacks a header line".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..split])?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse(format!("unknown checkpoint format `{}`", header.format)));
        }
        if header.dtype != T::DTYPE {
            return Err(Error::Parse(format!("checkpoint holds {} values, expected {}", header.dtype, T::DTYPE)));
        }
        let body = &bytes[split + 1..];
        if body.len() != header.n_params * T::BYTES {
            return Err(Error::Parse(format!(
                "checkpoint body has {} bytes, expected {}",
                body.len(),
                header.n_params * T::BYTES
            )));
        }
        let mut model = Self::zeros(header.config)?;
        if model.slices != header.slices || model.params.len() != header.n_params {
            return Err(Error::Parse("checkpoint layout does not match its configuration".into()));
        }
        model.params = body.chunks_exact(T::BYTES).map(T::from_le_slice).collect();
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

const CHECKPOINT_FORMAT: &str = "spcl-model-v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format: String,
    dtype: String,
    n_params: usize,
    config: ModelConfig,
    slices: Vec<ParamSlice>,
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// One-hot encoding of the most recent `window` observations and `window - 1` actions.
///
/// Layout: `[obs_t | obs_{t-1} | a_{t-1} | obs_{t-2} | a_{t-2} | ...]`, where each history
/// slot has an extra "before the episode" index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureEncoder {
    pub n_observations: usize,
    pub n_actions: usize,
    pub window: usize,
}

impl FeatureEncoder {
    pub fn new(n_observations: usize, n_actions: usize, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::Domain("window must be at least 1".into()));
        }
        Ok(Self {
            n_observations,
            n_actions,
            window,
        })
    }

    pub fn dim(&self) -> usize {
        self.n_observations + (self.window - 1) * (self.n_observations + 1 + self.n_actions + 1)
    }

    /// Features at step `t` given the episode's observations `obs[0..=t]` and actions
    /// `actions[0..t]`.
    pub fn encode<T: Real>(&self, obs: &[usize], actions: &[usize], t: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim()];
        out[obs[t]] = T::one();
        let mut at = self.n_observations;
        for k in 1..self.window {
            let o = if t >= k { obs[t - k] } else { self.n_observations };
            out[at + o] = T::one();
            at += self.n_observations + 1;
            let a = if t >= k { actions[t - k] } else { self.n_actions };
            out[at + a] = T::one();
            at += self.n_actions + 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn configs(obs: usize, n: usize) -> Vec<ModelConfig> {
        let mut out = Vec::new();
        let archs = [
            Architecture::Tabular,
            Architecture::Linear,
            Architecture::Mlp {
                hidden: vec![5, 4],
                activation: Activation::Tanh,
            },
            Architecture::Mlp {
                hidden: vec![6],
                activation: Activation::Relu,
            },
        ];
        for arch in archs {
            for unified in [false, true] {
                for policy in [PolicyHead::Sparse, PolicyHead::Soft] {
                    for lambda_factor in [LambdaFactor::PerAction, LambdaFactor::Scalar] {
                        if policy == PolicyHead::Soft && lambda_factor == LambdaFactor::Scalar {
                            continue;
                        }
                        out.push(ModelConfig {
                            arch: arch.clone(),
                            obs_dim: obs,
                            n_actions: n,
                            alpha: 0.7,
                            unified,
                            policy,
                            lambda_factor,
                        });
                    }
                }
            }
        }
        out
    }

    fn random_input(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn parameter_counts() {
        let mut cfg = ModelConfig::new(Architecture::Tabular, 7, 3, 1.0);
        let m = Model::<f64>::zeros(cfg.clone()).unwrap();
        // theta 7x3, phi 7x1, rho 7x(3+1)
        assert_eq!(m.n_params(), 7 * (3 + 1 + 3 + 1));
        cfg.lambda_factor = LambdaFactor::Scalar;
        assert_eq!(Model::<f64>::zeros(cfg.clone()).unwrap().n_params(), 7 * (3 + 1 + 1 + 1));
        cfg.unified = true;
        assert_eq!(Model::<f64>::zeros(cfg.clone()).unwrap().n_params(), 7 * (3 + 2));
        cfg.policy = PolicyHead::Soft;
        assert_eq!(Model::<f64>::zeros(cfg).unwrap().n_params(), 7 * 3);
    }

    #[test]
    fn mlp_output_shapes() {
        let arch: Architecture = "mlp:64x64:tanh".parse().unwrap();
        let cfg = ModelConfig::new(arch, 10, 6, 0.5);
        let m = Model::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let out = m.forward(&[0.5; 10]).unwrap();
        assert_eq!(out.policy.len(), 6);
        assert_eq!(out.nonneg_mult.len(), 6);
        assert!(out.value.is_finite() && out.simplex_mult.is_finite());
    }

    #[test]
    fn architecture_strings() {
        for s in ["tabular", "linear", "mlp:64x64:tanh", "mlp:8:relu"] {
            assert_eq!(s.parse::<Architecture>().unwrap().to_string(), s);
        }
        assert_eq!("mlp:3".parse::<Architecture>().unwrap().to_string(), "mlp:3:tanh");
        assert!("mlp:0".parse::<Architecture>().is_err());
        assert!("conv".parse::<Architecture>().is_err());
    }

    #[test]
    fn dominant_score_gives_one_hot_policy() {
        let mut m = Model::<f64>::zeros(ModelConfig::new(Architecture::Tabular, 1, 4, 1.0)).unwrap();
        m.params_mut()[..4].copy_from_slice(&[0.0, 2.5, 1.0, 1.2]);
        let out = m.forward(&[1.0]).unwrap();
        assert_eq!(out.policy.probs(), &[0.0, 1.0, 0.0, 0.0]);
        for a in [0, 2, 3] {
            assert!(out.nonneg_mult[a] > 0.0);
        }
        assert_eq!(out.nonneg_mult[1], 0.0);
        let proj = oracle::simplex_projection_bruteforce(&[0.0, 2.5, 1.0, 1.2]);
        assert_eq!(proj, out.policy.probs());
    }

    #[test]
    fn equal_scores_give_uniform_policy() {
        let m = Model::<f64>::zeros(ModelConfig::new(Architecture::Linear, 3, 5, 1.0)).unwrap();
        let out = m.forward(&[0.3, -1.0, 2.0]).unwrap();
        assert!(out.policy.probs().iter().all(|&p| (p - 0.2).abs() < 1e-15));
        assert!(out.nonneg_mult.iter().all(|&l| l == 0.0));
        assert_eq!(out.simplex_mult, -0.25);
    }

    #[test]
    fn heads_satisfy_constraints_structurally() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for cfg in configs(4, 5).into_iter().filter(|c| c.policy == PolicyHead::Sparse) {
            let mut m = Model::<f64>::new(cfg, &mut rng).unwrap();
            for _ in 0..200 {
                let scale = rng.random_range(0.1..5.0);
                let params: Vec<f64> = (0..m.n_params()).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
                m.set_params(params).unwrap();
                let out = m.forward(&random_input(&mut rng, 4)).unwrap();
                let sum: f64 = out.policy.probs().iter().sum();
                assert!((sum - 1.0).abs() < 1e-10);
                assert!(out.simplex_mult >= -0.35 && out.simplex_mult <= 0.0);
                for (p, l) in out.policy.probs().iter().zip(&out.nonneg_mult) {
                    assert!(*l >= 0.0 && *p >= 0.0);
                    assert_eq!(p * l, 0.0);
                }
            }
        }
    }

    #[test]
    fn unified_heads_follow_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cfg = ModelConfig::new(Architecture::Linear, 3, 6, 0.4);
        cfg.unified = true;
        let m = Model::<f64>::with_init(cfg, &mut rng, false).unwrap();
        for _ in 0..50 {
            let out = m.forward(&random_input(&mut rng, 3)).unwrap();
            let mu = math::sparsemax_policy(&out.scores, 0.4).unwrap();
            assert!(crate::scalar::max_abs_diff(mu.probs(), out.policy.probs()) < 1e-12);
            let z: Vec<f64> = out.scores.iter().map(|q| q / 0.4).collect();
            let v = 0.4 * math::spmax(&z).unwrap();
            assert!((v - out.value).abs() < 1e-10);
            let expected: f64 = mu.probs().iter().zip(&out.scores).map(|(p, q)| p * q).sum::<f64>()
                + 0.4 * math::tsallis_entropy(&out.policy);
            assert!((out.value - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn sum_of_policy_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Model::<f64>::with_init(ModelConfig::new(Architecture::Linear, 3, 6, 0.4), &mut rng, false).unwrap();
        let (_, tape) = m.forward_with_tape(&random_input(&mut rng, 3)).unwrap();
        let mut up = OutputGrads::zeros(6);
        up.policy = vec![1.0; 6];
        let mut grad = vec![0.0; m.n_params()];
        m.backward(&tape, &up, &mut grad);
        assert!(grad.iter().all(|g| g.abs() < 1e-14));
    }

    /// Random linear functional of all heads, for gradient checks.
    fn functional(out: &ModelOutputs<f64>, w: &OutputGrads<f64>) -> f64 {
        let mut s = w.value * out.value + w.simplex_mult * out.simplex_mult;
        for a in 0..out.policy.len() {
            s += w.policy[a] * out.policy.prob(a) + w.nonneg_mult[a] * out.nonneg_mult[a];
            if let Some(l) = &out.log_policy {
                s += w.log_policy[a] * l[a];
            }
        }
        s
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for cfg in configs(4, 4) {
            for _ in 0..3 {
                let m = Model::<f64>::with_init(cfg.clone(), &mut rng, false).unwrap();
                let input = random_input(&mut rng, 4);
                let up = OutputGrads {
                    value: rng.random_range(-1.0..1.0),
                    policy: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    log_policy: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    nonneg_mult: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    simplex_mult: rng.random_range(-1.0..1.0),
                };
                let (_, tape) = m.forward_with_tape(&input).unwrap();
                let mut grad = vec![0.0; m.n_params()];
                m.backward(&tape, &up, &mut grad);
                let sig = tape.kink_signature();
                let h = 1e-5;
                let mut probe = m.params().to_vec();
                for i in 0..m.n_params() {
                    let mut eval = |delta: f64| {
                        probe[i] = m.params()[i] + delta;
                        let (out, t) = m.forward_at(&probe, &input).unwrap();
                        probe[i] = m.params()[i];
                        (functional(&out, &up), t.kink_signature() == sig)
                    };
                    let (up_val, same_up) = eval(h);
                    let (down_val, same_down) = eval(-h);
                    if !(same_up && same_down) {
                        continue;
                    }
                    let fd = (up_val - down_val) / (2.0 * h);
                    let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1.0);
                    assert!(err < 1e-5, "{:?} param {i}: fd {fd} vs {}", cfg.arch, grad[i]);
                }
            }
        }
    }

    #[test]
    fn relu_kink_takes_zero_side() {
        let cfg = ModelConfig::new(
            Architecture::Mlp {
                hidden: vec![1],
                activation: Activation::Relu,
            },
            1,
            2,
            1.0,
        );
        let mut m = Model::<f64>::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        // phi: w1 (1x1), b1, w2 (1x1), b2; a zero pre-activation sits exactly on the kink
        let phi = m.slice("phi").unwrap().offset;
        m.params_mut()[phi] = 0.0;
        m.params_mut()[phi + 1] = 0.0;
        m.params_mut()[phi + 2] = 1.0;
        let (_, tape) = m.forward_with_tape(&[1.0]).unwrap();
        let mut up = OutputGrads::zeros(2);
        up.value = 1.0;
        let mut grad = vec![0.0; m.n_params()];
        m.backward(&tape, &up, &mut grad);
        assert_eq!(grad[phi], 0.0);
        assert_eq!(grad[phi + 1], 0.0);
        assert_eq!(grad[phi + 3], 1.0);
    }

    #[test]
    fn witness_loads_exactly() {
        use crate::consistency::optimal_witness;
        use crate::mdp::{IterationOptions, TabularMdp};
        let mdp = TabularMdp::<f64>::random(5, 3, 0.9, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let w = optimal_witness(&mdp, 0.3, &IterationOptions::default()).unwrap();
        for lf in [LambdaFactor::PerAction, LambdaFactor::Scalar] {
            let m = Model::from_tabular_witness(&w, lf).unwrap();
            for x in 0..5 {
                let mut input = vec![0.0; 5];
                input[x] = 1.0;
                let out = m.forward(&input).unwrap();
                assert_eq!(out.value, w.values[x]);
                let err = crate::scalar::max_abs_diff(out.policy.probs(), w.policy.row(x).probs());
                assert!(err < 1e-13, "{err}");
                assert!(crate::scalar::max_abs_diff(&out.nonneg_mult, &w.nonneg_mult[x]) < 1e-13);
                assert!((out.simplex_mult - w.simplex_mult[x]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for cfg in configs(3, 4) {
            let m = Model::<f64>::new(cfg, &mut rng).unwrap();
            let back = Model::<f64>::from_bytes(&m.to_bytes()).unwrap();
            assert_eq!(back.params(), m.params());
            assert_eq!(back.config(), m.config());
        }
        let m32 = Model::<f32>::new(ModelConfig::new(Architecture::Linear, 2, 2, 1.0), &mut rng).unwrap();
        let bytes = m32.to_bytes();
        assert_eq!(Model::<f32>::from_bytes(&bytes).unwrap().params(), m32.params());
        assert!(Model::<f64>::from_bytes(&bytes).is_err());
        assert!(Model::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn encoder_layout() {
        let enc = FeatureEncoder::new(3, 2, 3).unwrap();
        assert_eq!(enc.dim(), 3 + 2 * (4 + 3));
        let f: Vec<f64> = enc.encode(&[2, 0, 1], &[1, 0], 2);
        let ones: Vec<usize> = f.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect();
        // obs_t = 1; obs_{t-1} = 0, a_{t-1} = 0; obs_{t-2} = 2, a_{t-2} = 1
        assert_eq!(ones, vec![1, 3, 7, 12, 15]);
        let start: Vec<f64> = enc.encode(&[2], &[], 0);
        let ones: Vec<usize> = start.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect();
        assert_eq!(ones, vec![2, 6, 9, 13, 16]);
        assert_eq!(FeatureEncoder::new(4, 2, 1).unwrap().dim(), 4);
    }
}
