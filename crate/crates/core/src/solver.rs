//! Forward problem: best responses to a fixed mean-field flow and the
//! entropy-regularized equilibrium fixed point.
//!
//! Rewards enter the solvers as a [`FlowReward`], which turns a flow into a
//! table of expected one-step rewards. Plain `r(s, a, mu)` rewards implement
//! it directly; [`ShapedReward`] adds the potential-based shaping term
//! `gamma * g(s', mu') - g(s, mu)` in expectation over the next state.
//!
//! Shaping convention: the potential after the last step is zero, so the
//! shaping terms along any trajectory telescope to `-g(s_0, mu_0)`. This
//! keeps equilibria invariant under shaping on a finite horizon.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mfg::{
    induce_flow, sample_index, MeanField, MeanFieldFlow, MfgSpec, PerStepPolicy, Policy, RewardFn,
    TransitionKernel,
};
use crate::nn::{AdamState, MlpSpec};

/// Expected one-step rewards `R_t(s, a)` for every step of a horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl RewardTable {
    pub fn new(horizon: usize, n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            values: vec![0.0; horizon * n_states * n_actions],
        }
    }

    pub fn horizon(&self) -> usize {
        self.values.len() / (self.n_states * self.n_actions)
    }

    pub fn get(&self, t: usize, s: usize, a: usize) -> f64 {
        self.values[(t * self.n_states + s) * self.n_actions + a]
    }

    pub fn set(&mut self, t: usize, s: usize, a: usize, value: f64) {
        self.values[(t * self.n_states + s) * self.n_actions + a] = value;
    }

    pub(crate) fn row(&self, t: usize, s: usize) -> &[f64] {
        let start = (t * self.n_states + s) * self.n_actions;
        &self.values[start..start + self.n_actions]
    }

    fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            let per_step = self.n_states * self.n_actions;
            return Err(Error::Numeric(format!(
                "non-finite reward at step {}, state {}, action {}",
                i / per_step,
                (i % per_step) / self.n_actions,
                i % self.n_actions
            )));
        }
        Ok(())
    }
}

/// A reward that can be tabulated against a fixed flow.
pub trait FlowReward: Sync {
    fn reward_table(
        &self,
        flow: &MeanFieldFlow,
        kernels: &[TransitionKernel],
        gamma: f64,
    ) -> Result<RewardTable>;
}

impl<R: RewardFn + ?Sized> FlowReward for R {
    fn reward_table(
        &self,
        flow: &MeanFieldFlow,
        kernels: &[TransitionKernel],
        _gamma: f64,
    ) -> Result<RewardTable> {
        let n_states = flow.n_states();
        let n_actions = kernels[0].n_actions();
        let mut table = RewardTable::new(flow.horizon(), n_states, n_actions);
        for (t, mu) in flow.iter().enumerate() {
            for s in 0..n_states {
                for a in 0..n_actions {
                    table.set(t, s, a, self.reward(s, a, mu));
                }
            }
        }
        Ok(table)
    }
}

/// Potential function `g(s, mu)`.
pub trait PotentialFn: Send + Sync {
    fn potential(&self, state: usize, mu: &MeanField) -> f64;
}

/// `r(s, a, mu) + gamma * g(s', mu') - g(s, mu)` with `g` zero after the
/// final step.
pub struct ShapedReward<'a> {
    pub base: &'a dyn RewardFn,
    pub potential: &'a dyn PotentialFn,
}

impl FlowReward for ShapedReward<'_> {
    fn reward_table(
        &self,
        flow: &MeanFieldFlow,
        kernels: &[TransitionKernel],
        gamma: f64,
    ) -> Result<RewardTable> {
        let mut table = self.base.reward_table(flow, kernels, gamma)?;
        let horizon = flow.horizon();
        let n_states = flow.n_states();
        let n_actions = kernels[0].n_actions();
        let potentials: Vec<Vec<f64>> = flow
            .iter()
            .map(|mu| (0..n_states).map(|s| self.potential.potential(s, mu)).collect())
            .collect();
        for t in 0..horizon {
            for s in 0..n_states {
                for a in 0..n_actions {
                    let next = if t + 1 < horizon {
                        gamma * kernels[t].expect(s, a, &potentials[t + 1])
                    } else {
                        0.0
                    };
                    let value = table.get(t, s, a) + next - potentials[t][s];
                    table.set(t, s, a, value);
                }
            }
        }
        Ok(table)
    }
}

/// Soft action values and soft state values at every step.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftQTable {
    n_actions: usize,
    q: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl SoftQTable {
    pub fn q(&self, t: usize, s: usize, a: usize) -> f64 {
        self.q[t][s * self.n_actions + a]
    }

    pub fn v(&self, t: usize, s: usize) -> f64 {
        self.v[t][s]
    }
}

/// `beta * ln sum exp(x / beta)` with the max shift.
pub fn soft_max_value(values: &[f64], beta: f64) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + beta * values.iter().map(|x| ((x - m) / beta).exp()).sum::<f64>().ln()
}

pub(crate) fn soft_backward_with(
    table: &RewardTable,
    kernels: &[TransitionKernel],
    gamma: f64,
    beta: f64,
) -> Result<(SoftQTable, Policy)> {
    table.check_finite()?;
    let horizon = table.horizon();
    let (n_states, n_actions) = (table.n_states, table.n_actions);
    let mut q = vec![Vec::new(); horizon];
    let mut v = vec![Vec::new(); horizon];
    let mut steps = vec![None; horizon];
    let mut next_v: Option<Vec<f64>> = None;
    for t in (0..horizon).rev() {
        let mut q_t = Vec::with_capacity(n_states * n_actions);
        let mut v_t = Vec::with_capacity(n_states);
        let mut probs = Vec::with_capacity(n_states * n_actions);
        for s in 0..n_states {
            let row: Vec<f64> = (0..n_actions)
                .map(|a| {
                    let future = next_v
                        .as_ref()
                        .map_or(0.0, |nv| gamma * kernels[t].expect(s, a, nv));
                    table.get(t, s, a) + future
                })
                .collect();
            let value = soft_max_value(&row, beta);
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "soft value overflow at step {t}, state {s}"
                )));
            }
            let mut pi: Vec<f64> = row.iter().map(|x| ((x - value) / beta).exp()).collect();
            let total: f64 = pi.iter().sum();
            pi.iter_mut().for_each(|p| *p /= total);
            probs.extend(pi);
            q_t.extend(row);
            v_t.push(value);
        }
        steps[t] = Some(PerStepPolicy::from_flat_unchecked(n_actions, probs));
        q[t] = q_t;
        next_v = Some(v_t.clone());
        v[t] = v_t;
    }
    let policy = Policy::new(steps.into_iter().map(Option::unwrap).collect())?;
    Ok((SoftQTable { n_actions, q, v }, policy))
}

/// Entropy-regularized best response to a fixed flow by backward induction.
pub fn soft_backward_induction<F: FlowReward + ?Sized>(
    flow: &MeanFieldFlow,
    reward: &F,
    spec: &MfgSpec,
    beta: f64,
) -> Result<(SoftQTable, Policy)> {
    if !(beta > 0.0) {
        return invalid(format!("beta must be positive, got {beta}"));
    }
    spec.check_flow(flow)?;
    let kernels = spec.kernels(flow);
    let table = reward.reward_table(flow, &kernels, spec.gamma())?;
    soft_backward_with(&table, &kernels, spec.gamma(), beta)
}

/// One application of the equilibrium operator: soft best response to
/// `flow`, then the flow that response induces.
pub fn ermfne_operator<F: FlowReward + ?Sized>(
    flow: &MeanFieldFlow,
    reward: &F,
    spec: &MfgSpec,
    beta: f64,
) -> Result<MeanFieldFlow> {
    let (_, policy) = soft_backward_induction(flow, reward, spec, beta)?;
    induce_flow(&policy, spec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub beta: f64,
    /// Stop once the mean squared flow change over `t >= 1` is at most this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Weight kept on the previous flow; 0 is plain repetition.
    pub damping: f64,
    /// Raise the damping when the residual stops shrinking.
    pub adaptive_damping: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            tolerance: 1e-10,
            max_iterations: 500,
            damping: 0.0,
            adaptive_damping: true,
        }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !(self.tolerance > 0.0) || self.max_iterations == 0 {
            return Err(Error::Config(format!("invalid solver config {self:?}")));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(Error::Config(format!("damping {} outside [0, 1)", self.damping)));
        }
        Ok(())
    }
}

/// Result of an equilibrium solve. `flow` is always the flow induced by
/// `policy`; `residual` is the last mean squared flow change.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub flow: MeanFieldFlow,
    pub policy: Policy,
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
}

impl Equilibrium {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

const DAMPING_CAP: f64 = 0.95;

/// Fixed-point iteration of [`ermfne_operator`] from the flow of the
/// uniform policy. Non-convergence is reported in the result, not as an
/// error.
pub fn solve_ermfne<F: FlowReward + ?Sized>(
    reward: &F,
    spec: &MfgSpec,
    cfg: &SolverConfig,
) -> Result<Equilibrium> {
    cfg.validate()?;
    let uniform = Policy::uniform(spec.n_states(), spec.n_actions(), spec.horizon());
    let mut flow = induce_flow(&uniform, spec)?;
    let mut damping = cfg.damping;
    let mut residual = f64::INFINITY;
    let mut stalled = 0usize;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let target = ermfne_operator(&flow, reward, spec, cfg.beta)?;
        let next = if damping > 0.0 {
            let mixed = flow
                .iter()
                .zip(target.iter())
                .map(|(old, new)| old.mix(new, 1.0 - damping))
                .collect::<Result<Vec<_>>>()?;
            MeanFieldFlow::new(mixed)?
        } else {
            target
        };
        let change = next.mse_after_first(&flow);
        flow = next;
        if cfg.adaptive_damping && iterations > 1 {
            stalled = if change > 0.9 * residual { stalled + 1 } else { 0 };
            if stalled >= 3 && damping < DAMPING_CAP {
                damping = ((1.0 + damping) / 2.0).min(DAMPING_CAP);
                stalled = 0;
            }
        }
        residual = change;
        if residual <= cfg.tolerance {
            converged = true;
            break;
        }
    }
    let (_, policy) = soft_backward_induction(&flow, reward, spec, cfg.beta)?;
    let flow = induce_flow(&policy, spec)?;
    Ok(Equilibrium {
        flow,
        policy,
        converged,
        iterations,
        residual,
    })
}

/// Hard-max best response to a fixed flow. Ties within `1e-12` (relative)
/// are split uniformly.
pub fn hard_best_response<F: FlowReward + ?Sized>(
    flow: &MeanFieldFlow,
    reward: &F,
    spec: &MfgSpec,
) -> Result<Policy> {
    spec.check_flow(flow)?;
    let kernels = spec.kernels(flow);
    let table = reward.reward_table(flow, &kernels, spec.gamma())?;
    table.check_finite()?;
    Ok(hard_backward_with(&table, &kernels, spec.gamma()).1)
}

fn hard_backward_with(
    table: &RewardTable,
    kernels: &[TransitionKernel],
    gamma: f64,
) -> (Vec<Vec<f64>>, Policy) {
    let horizon = table.horizon();
    let (n_states, n_actions) = (table.n_states, table.n_actions);
    let mut values = vec![Vec::new(); horizon];
    let mut steps = vec![None; horizon];
    let mut next_v: Option<Vec<f64>> = None;
    for t in (0..horizon).rev() {
        let mut v_t = Vec::with_capacity(n_states);
        let mut probs = Vec::with_capacity(n_states * n_actions);
        for s in 0..n_states {
            let row: Vec<f64> = (0..n_actions)
                .map(|a| {
                    let future = next_v
                        .as_ref()
                        .map_or(0.0, |nv| gamma * kernels[t].expect(s, a, nv));
                    table.get(t, s, a) + future
                })
                .collect();
            let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let tol = 1e-12 * best.abs().max(1.0);
            let ties: Vec<bool> = row.iter().map(|&x| best - x <= tol).collect();
            let count = ties.iter().filter(|&&b| b).count() as f64;
            probs.extend(ties.iter().map(|&b| if b { 1.0 / count } else { 0.0 }));
            v_t.push(best);
        }
        steps[t] = Some(PerStepPolicy::from_flat_unchecked(n_actions, probs));
        next_v = Some(v_t.clone());
        values[t] = v_t;
    }
    let policy = Policy::new(steps.into_iter().map(Option::unwrap).collect())
        .expect("non-empty horizon");
    (values, policy)
}

/// Outcome of [`first_step_welfare_search`].
#[derive(Clone, Debug)]
pub struct FirstStepSearch {
    /// Probability of action 0 at the initial state.
    pub first_action_prob: f64,
    pub policy: Policy,
    pub flow: MeanFieldFlow,
    pub value: f64,
}

/// Search over the first-step mixture at a single initial state, with every
/// later step set to the hard best response against the induced flow, for
/// the mixture that maximizes the representative agent's consistent
/// expected return.
///
/// This selects among flow-consistent profiles by return, which is a
/// welfare criterion rather than a Nash condition: it reproduces the
/// first-step mixture of the shaped left-right counterexample (1/4), whereas
/// the Nash condition at the initial state alone would pick 0 there.
///
/// Requires two actions and a point-mass initial distribution.
pub fn first_step_welfare_search<F: FlowReward + ?Sized>(
    reward: &F,
    spec: &MfgSpec,
    grid: usize,
) -> Result<FirstStepSearch> {
    if spec.n_actions() != 2 {
        return invalid("first-step search needs exactly two actions");
    }
    let Some(start) = spec.mu0().probs().iter().position(|&p| p == 1.0) else {
        return invalid("first-step search needs a point-mass initial distribution");
    };
    if grid < 2 {
        return invalid("grid must have at least two points");
    }
    let evaluate = |p: f64| -> Result<(f64, Policy, MeanFieldFlow)> {
        let mut first = vec![vec![0.5, 0.5]; spec.n_states()];
        first[start] = vec![p, 1.0 - p];
        let first = PerStepPolicy::from_rows(first)?;
        // Later steps only depend on the flow, which only depends on the
        // first step and the later steps' own best responses; iterate the
        // continuation to a fixed point.
        let mut policy = Policy::new(
            std::iter::once(first.clone())
                .chain(Policy::uniform(spec.n_states(), 2, spec.horizon() - 1).steps().iter().cloned())
                .collect(),
        )?;
        for _ in 0..(spec.horizon() + 1) {
            let flow = induce_flow(&policy, spec)?;
            let br = hard_best_response(&flow, reward, spec)?;
            let mut steps = br.steps().to_vec();
            steps[0] = first.clone();
            let next = Policy::new(steps)?;
            if next == policy {
                break;
            }
            policy = next;
        }
        let flow = induce_flow(&policy, spec)?;
        let kernels = spec.kernels(&flow);
        let table = reward.reward_table(&flow, &kernels, spec.gamma())?;
        let marginals = crate::mfg::marginals_with_kernels(&policy, &kernels, spec.mu0())?;
        let mut value = 0.0;
        let mut discount = 1.0;
        for (t, rho) in marginals.iter().enumerate() {
            for (s, &mass) in rho.probs().iter().enumerate() {
                for (a, &pa) in policy[t].row(s).iter().enumerate() {
                    value += discount * mass * pa * table.get(t, s, a);
                }
            }
            discount *= spec.gamma();
        }
        Ok((value, policy, flow))
    };
    let mut best = (f64::NEG_INFINITY, 0.0);
    for i in 0..grid {
        let p = i as f64 / (grid - 1) as f64;
        let (value, _, _) = evaluate(p)?;
        if value > best.0 {
            best = (value, p);
        }
    }
    // Golden-section refinement around the best grid point.
    let step = 1.0 / (grid - 1) as f64;
    let (mut lo, mut hi) = ((best.1 - step).max(0.0), (best.1 + step).min(1.0));
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..60 {
        let x1 = hi - ratio * (hi - lo);
        let x2 = lo + ratio * (hi - lo);
        if evaluate(x1)?.0 >= evaluate(x2)?.0 {
            hi = x2;
        } else {
            lo = x1;
        }
    }
    let p = 0.5 * (lo + hi);
    let (value, policy, flow) = evaluate(p)?;
    Ok(FirstStepSearch {
        first_action_prob: p,
        policy,
        flow,
        value,
    })
}

/// How adaptive samplers are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    /// Exact soft backward induction.
    Tabular,
    /// Soft Q-learning with neural soft-Q functions and samplers.
    Approximator,
    /// Tabular whenever `|S| * |A| <= 4096`.
    Auto,
}

/// Settings for the soft Q-learning sampler trainer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub beta: f64,
    pub replay_capacity: usize,
    pub minibatch: usize,
    /// Action samples per state for the sampler's divergence gradient.
    pub action_samples: usize,
    /// Gradient steps per time index.
    pub steps_per_time: usize,
    /// Fresh transitions added to the replay memory before each step.
    pub collect_per_step: usize,
    pub hidden: Vec<usize>,
    pub q_learning_rate: f64,
    pub sampler_learning_rate: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            mode: SamplerMode::Auto,
            beta: 1.0,
            replay_capacity: 10_000,
            minibatch: 64,
            action_samples: 16,
            steps_per_time: 200,
            collect_per_step: 16,
            hidden: vec![64, 64],
            q_learning_rate: 1e-2,
            sampler_learning_rate: 1e-2,
        }
    }
}

pub const TABULAR_LIMIT: usize = 4096;

impl SamplerConfig {
    pub fn tabular() -> Self {
        Self {
            mode: SamplerMode::Tabular,
            ..Self::default()
        }
    }

    pub fn approximator() -> Self {
        Self {
            mode: SamplerMode::Approximator,
            ..Self::default()
        }
    }

    fn use_tabular(&self, spec: &MfgSpec) -> bool {
        match self.mode {
            SamplerMode::Tabular => true,
            SamplerMode::Approximator => false,
            SamplerMode::Auto => spec.n_states() * spec.n_actions() <= TABULAR_LIMIT,
        }
    }
}

fn one_hot(index: usize, width: usize) -> Vec<f64> {
    let mut x = vec![0.0; width];
    x[index] = 1.0;
    x
}

fn softmax(logits: &[f64], beta: f64) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|z| ((z - m) / beta).exp()).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= total);
    p
}

/// Train the per-step adaptive samplers against a reward at a fixed flow.
///
/// In tabular mode this is exact soft backward induction. Otherwise each
/// step `t < T-1` runs soft Q-learning backwards in time: a soft-Q network
/// is regressed onto `R_t(s,a) + gamma * V_{t+1}(s')` over a replay memory
/// of transitions drawn at the fixed flow, and a sampler network is fitted
/// to the soft-Q Boltzmann policy by minimizing its KL divergence with
/// sampled actions. The last step is the analytic softmax of the reward.
///
/// States are drawn from an even mixture of the flow and the uniform law so
/// that the samplers are trained in states the flow does not visit.
pub fn train_adaptive_samplers<F: FlowReward + ?Sized, R: Rng + ?Sized>(
    reward: &F,
    flow: &MeanFieldFlow,
    spec: &MfgSpec,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Policy> {
    spec.check_flow(flow)?;
    if !(cfg.beta > 0.0) {
        return Err(Error::Config("sampler beta must be positive".into()));
    }
    let kernels = spec.kernels(flow);
    let table = reward.reward_table(flow, &kernels, spec.gamma())?;
    if cfg.use_tabular(spec) {
        return Ok(soft_backward_with(&table, &kernels, spec.gamma(), cfg.beta)?.1);
    }
    if cfg.minibatch == 0 || cfg.replay_capacity == 0 || cfg.action_samples == 0 {
        return Err(Error::Config("sampler counts must be at least 1".into()));
    }
    table.check_finite()?;
    let (n_states, n_actions) = (spec.n_states(), spec.n_actions());
    let horizon = spec.horizon();
    let beta = cfg.beta;
    let net = MlpSpec::new(n_states, cfg.hidden.clone(), n_actions)?;
    let inputs: Vec<Vec<f64>> = (0..n_states).map(|s| one_hot(s, n_states)).collect();

    let mut steps: Vec<PerStepPolicy> = vec![PerStepPolicy::uniform(n_states, n_actions); horizon];
    // Soft values of the step after the one being trained.
    let mut next_values: Vec<f64> = Vec::with_capacity(n_states);
    let mut last = Vec::with_capacity(n_states * n_actions);
    for s in 0..n_states {
        let row = table.row(horizon - 1, s);
        next_values.push(soft_max_value(row, beta));
        last.extend(softmax(row, beta));
    }
    steps[horizon - 1] = PerStepPolicy::from_flat_unchecked(n_actions, last);

    for t in (0..horizon.saturating_sub(1)).rev() {
        let mut q_params = net.init_params(rng);
        let mut sampler_params = net.init_params(rng);
        let mut q_adam = AdamState::new(q_params.len(), cfg.q_learning_rate);
        let mut sampler_adam = AdamState::new(sampler_params.len(), cfg.sampler_learning_rate);
        let mut replay: Vec<(usize, usize, f64, usize)> = Vec::with_capacity(cfg.replay_capacity);
        let mut cursor = 0usize;
        let state_mix: Vec<f64> = flow[t]
            .probs()
            .iter()
            .map(|p| 0.5 * p + 0.5 / n_states as f64)
            .collect();
        for _ in 0..cfg.steps_per_time {
            for _ in 0..cfg.collect_per_step.max(1) {
                let s = sample_index(rng, &state_mix);
                let logits = net.forward(&sampler_params, &inputs[s])?;
                let a = sample_index(rng, &softmax(&logits, 1.0));
                let s_next = sample_index(rng, kernels[t].row(s, a));
                let item = (s, a, table.get(t, s, a), s_next);
                if replay.len() < cfg.replay_capacity {
                    replay.push(item);
                } else {
                    replay[cursor] = item;
                    cursor = (cursor + 1) % cfg.replay_capacity;
                }
            }
            // soft-Q regression
            let mut q_grad = vec![0.0; q_params.len()];
            let batch = cfg.minibatch.min(replay.len());
            for _ in 0..batch {
                let (s, a, r, s_next) = replay[rng.random_range(0..replay.len())];
                let target = r + spec.gamma() * next_values[s_next];
                let q = net.forward(&q_params, &inputs[s])?;
                let mut cot = vec![0.0; n_actions];
                cot[a] = (q[a] - target) / batch as f64;
                net.accumulate_grad(&q_params, &inputs[s], &cot, 1.0, &mut q_grad)?;
            }
            q_adam.step(&mut q_params, &q_grad)?;
            // sampler fit: KL(q_theta || exp((Q - V) / beta)) by score function
            let mut s_grad = vec![0.0; sampler_params.len()];
            for _ in 0..batch {
                let (s, ..) = replay[rng.random_range(0..replay.len())];
                let q = net.forward(&q_params, &inputs[s])?;
                let v = soft_max_value(&q, beta);
                let logits = net.forward(&sampler_params, &inputs[s])?;
                let probs = softmax(&logits, 1.0);
                let draws: Vec<usize> = (0..cfg.action_samples)
                    .map(|_| sample_index(rng, &probs))
                    .collect();
                let log_ratio = |a: usize| probs[a].ln() - (q[a] - v) / beta;
                let baseline =
                    draws.iter().map(|&a| log_ratio(a)).sum::<f64>() / draws.len() as f64;
                // d log q(a) / d logits = e_a - probs
                let mut cot = vec![0.0; n_actions];
                for &a in &draws {
                    let w = (log_ratio(a) - baseline) / (draws.len() * batch) as f64;
                    for (j, c) in cot.iter_mut().enumerate() {
                        let indicator = if j == a { 1.0 } else { 0.0 };
                        *c += w * (indicator - probs[j]);
                    }
                }
                net.accumulate_grad(&sampler_params, &inputs[s], &cot, 1.0, &mut s_grad)?;
            }
            sampler_adam.step(&mut sampler_params, &s_grad)?;
        }
        let mut probs = Vec::with_capacity(n_states * n_actions);
        let mut values = Vec::with_capacity(n_states);
        for input in &inputs {
            let logits = net.forward(&sampler_params, input)?;
            probs.extend(softmax(&logits, 1.0));
            values.push(soft_max_value(&net.forward(&q_params, input)?, beta));
        }
        steps[t] = PerStepPolicy::from_flat_unchecked(n_actions, probs);
        next_values = values;
    }
    Policy::new(steps)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::envs::left_right_center_start;
    use crate::mfg::FnReward;

    #[test]
    fn one_step_policy_is_softmax_of_reward() {
        let spec = left_right_center_start(1).unwrap();
        let reward = FnReward(|s: usize, a: usize, _: &MeanField| (s + 2 * a) as f64 * 0.3);
        let flow = MeanFieldFlow::constant(spec.mu0().clone(), 1);
        for beta in [0.5, 1.0, 3.0] {
            let (q, pi) = soft_backward_induction(&flow, &reward, &spec, beta).unwrap();
            for s in 0..3 {
                let expect = softmax(&[(s as f64) * 0.3, (s + 2) as f64 * 0.3], beta);
                assert!((pi[0].prob(s, 0) - expect[0]).abs() < 1e-12);
                assert!((q.q(0, s, 1) - (s + 2) as f64 * 0.3).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_reward_gives_uniform_policy() {
        let spec = left_right_center_start(4).unwrap();
        let reward = FnReward(|_, _, _: &MeanField| 2.5);
        let flow = MeanFieldFlow::constant(spec.mu0().clone(), 4);
        let (_, pi) = soft_backward_induction(&flow, &reward, &spec, 1.0).unwrap();
        assert!(pi.max_abs_diff(&Policy::uniform(3, 2, 4)) < 1e-12);
    }

    #[test]
    fn non_finite_reward_is_a_numeric_error() {
        let spec = left_right_center_start(2).unwrap();
        let reward = FnReward(|s, _, _: &MeanField| if s == 2 { f64::NAN } else { 0.0 });
        let flow = MeanFieldFlow::constant(spec.mu0().clone(), 2);
        let err = soft_backward_induction(&flow, &reward, &spec, 1.0).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("state 2")), "{err}");
    }

    #[test]
    fn log_sum_exp_survives_large_rewards() {
        let spec = left_right_center_start(3).unwrap();
        let reward = FnReward(|s, a, _: &MeanField| if (s + a) % 2 == 0 { 1e3 } else { -1e3 });
        let flow = MeanFieldFlow::constant(spec.mu0().clone(), 3);
        let (_, pi) = soft_backward_induction(&flow, &reward, &spec, 1.0).unwrap();
        for step in pi.steps() {
            for s in 0..3 {
                let total: f64 = step.row(s).iter().sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn state_independent_reward_converges_fast() {
        let spec = crate::envs::build_env(&crate::envs::EnvConfig::new(
            crate::envs::EnvName::Rps,
            crate::envs::EnvVariant::Original,
        ))
        .unwrap();
        let reward = FnReward(|_, a: usize, _: &MeanField| a as f64);
        let eq = solve_ermfne(&reward, &spec, &SolverConfig::default()).unwrap();
        assert!(eq.converged);
        assert!(eq.iterations <= 2);
    }

    #[test]
    fn solver_rejects_bad_config() {
        let spec = left_right_center_start(2).unwrap();
        let reward = spec.reward().unwrap();
        let mut cfg = SolverConfig::default();
        cfg.damping = 1.0;
        assert!(solve_ermfne(reward, &spec, &cfg).is_err());
        cfg.damping = 0.0;
        cfg.tolerance = 0.0;
        assert!(solve_ermfne(reward, &spec, &cfg).is_err());
    }

    #[test]
    fn dominant_action_gives_point_mass() {
        let spec = left_right_center_start(3).unwrap();
        let reward = FnReward(|_, a: usize, _: &MeanField| if a == 1 { 1.0 } else { 0.0 });
        let flow = MeanFieldFlow::constant(spec.mu0().clone(), 3);
        let pi = hard_best_response(&flow, &reward, &spec).unwrap();
        for step in pi.steps() {
            for s in 0..3 {
                assert_eq!(step.row(s), &[0.0, 1.0]);
            }
        }
    }

    #[test]
    fn hard_ties_split_uniformly() {
        let spec = left_right_center_start(2).unwrap();
        let reward = FnReward(|_, _, _: &MeanField| 0.0);
        let flow = MeanFieldFlow::constant(spec.mu0().clone(), 2);
        let pi = hard_best_response(&flow, &reward, &spec).unwrap();
        assert_eq!(pi, Policy::uniform(3, 2, 2));
    }

    #[test]
    fn shaped_terminal_potential_is_zero() {
        struct Pot;
        impl PotentialFn for Pot {
            fn potential(&self, state: usize, _mu: &MeanField) -> f64 {
                state as f64
            }
        }
        let spec = left_right_center_start(2).unwrap();
        let base = FnReward(|_, _, _: &MeanField| 0.0);
        let shaped = ShapedReward {
            base: &base,
            potential: &Pot,
        };
        let flow = MeanFieldFlow::constant(spec.mu0().clone(), 2);
        let kernels = spec.kernels(&flow);
        let table = shaped.reward_table(&flow, &kernels, 1.0).unwrap();
        // from C taking R (action 1) at t = 0: g(R) - g(C) = 2
        assert_eq!(table.get(0, 0, 1), 2.0);
        // last step: only -g(s)
        assert_eq!(table.get(1, 2, 0), -2.0);
    }

    #[test]
    fn equilibrium_json_round_trip() {
        let spec = left_right_center_start(2).unwrap();
        let eq = solve_ermfne(spec.reward().unwrap(), &spec, &SolverConfig::default()).unwrap();
        let text = eq.to_json().unwrap();
        assert!(text.starts_with("{\"flow\":[["));
        let back = Equilibrium::from_json(&text).unwrap();
        assert_eq!(back.iterations, eq.iterations);
        assert!(back.flow.max_abs_diff(&eq.flow) < 1e-15);
    }

    #[test]
    fn tabular_samplers_match_backward_induction() {
        let spec = left_right_center_start(3).unwrap();
        let reward: Arc<dyn RewardFn> = Arc::new(FnReward(|s: usize, a: usize, mu: &MeanField| {
            0.3 * s as f64 - 0.7 * a as f64 * mu.get(1)
        }));
        let flow = MeanFieldFlow::new(vec![
            MeanField::point_mass(3, 0),
            MeanField::new(vec![0.0, 0.3, 0.7]).unwrap(),
            MeanField::new(vec![0.0, 0.6, 0.4]).unwrap(),
        ])
        .unwrap();
        let mut rng = rand::rng();
        let samplers =
            train_adaptive_samplers(reward.as_ref(), &flow, &spec, &SamplerConfig::tabular(), &mut rng)
                .unwrap();
        let (_, exact) = soft_backward_induction(&flow, reward.as_ref(), &spec, 1.0).unwrap();
        assert_eq!(samplers, exact);
    }

    #[test]
    fn one_step_samplers_are_analytic_in_any_mode() {
        let spec = left_right_center_start(1).unwrap();
        let reward = FnReward(|s: usize, a: usize, _: &MeanField| (s * a) as f64);
        let flow = MeanFieldFlow::constant(spec.mu0().clone(), 1);
        let mut rng = rand::rng();
        let samplers = train_adaptive_samplers(
            &reward,
            &flow,
            &spec,
            &SamplerConfig::approximator(),
            &mut rng,
        )
        .unwrap();
        let (_, exact) = soft_backward_induction(&flow, &reward, &spec, 1.0).unwrap();
        assert!(samplers.max_abs_diff(&exact) < 1e-12);
    }
}
