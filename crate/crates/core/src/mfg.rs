//! Finite mean-field games: distributions, policies, trajectories, and the
//! exact population and representative-agent dynamics.
//!
//! A game is described by an [`MfgSpec`]. The population evolves through the
//! McKean-Vlasov map ([`mkv_step`]), a policy induces a flow of mean fields
//! ([`induce_flow`]), and a representative agent facing a fixed flow has an
//! exact return ([`expected_return`]) and trajectory law
//! ([`trajectory_log_prob`]). Finite populations are simulated by
//! [`sample_game_play`], which couples agents through their live empirical
//! distribution.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Tolerance used when validating that probability vectors sum to one.
pub const PROB_TOL: f64 = 1e-9;

fn check_distribution(probs: &[f64], what: &str) -> Result<()> {
    if probs.is_empty() {
        return invalid(format!("{what} is empty"));
    }
    if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return invalid(format!("{what} has invalid entry {p}"));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > PROB_TOL {
        return invalid(format!("{what} sums to {total}, expected 1"));
    }
    Ok(())
}

/// Divide by the sum after checking that the sum drifted by at most
/// [`PROB_TOL`]. Used after every propagation step.
fn renormalize(mut probs: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    let total: f64 = probs.iter().sum();
    if !total.is_finite() || (total - 1.0).abs() > PROB_TOL {
        return Err(Error::Numeric(format!(
            "{what} lost normalization (sum = {total})"
        )));
    }
    for p in &mut probs {
        *p /= total;
    }
    Ok(probs)
}

/// Probability distribution over states at one time step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MeanField(Vec<f64>);

impl MeanField {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        check_distribution(&probs, "mean field")?;
        Ok(Self(probs))
    }

    pub fn uniform(n_states: usize) -> Self {
        assert!(n_states > 0);
        Self(vec![1.0 / n_states as f64; n_states])
    }

    pub fn point_mass(n_states: usize, state: usize) -> Self {
        assert!(state < n_states);
        let mut probs = vec![0.0; n_states];
        probs[state] = 1.0;
        Self(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, state: usize) -> f64 {
        self.0[state]
    }

    /// Convex combination `(1 - weight) * self + weight * other`.
    pub fn mix(&self, other: &MeanField, weight: f64) -> Result<MeanField> {
        if self.len() != other.len() {
            return invalid("mixing mean fields of different lengths");
        }
        let probs = self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (1.0 - weight) * a + weight * b)
            .collect();
        Ok(MeanField(renormalize(probs, "mixed mean field")?))
    }
}

impl TryFrom<Vec<f64>> for MeanField {
    type Error = Error;

    fn try_from(probs: Vec<f64>) -> Result<Self> {
        Self::new(probs)
    }
}

impl From<MeanField> for Vec<f64> {
    fn from(mu: MeanField) -> Self {
        mu.0
    }
}

/// Sequence of `T` mean fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MeanFieldFlow(Vec<MeanField>);

impl MeanFieldFlow {
    pub fn new(fields: Vec<MeanField>) -> Result<Self> {
        let Some(first) = fields.first() else {
            return invalid("mean field flow is empty");
        };
        if fields.iter().any(|mu| mu.len() != first.len()) {
            return invalid("mean fields in a flow must share one state space");
        }
        Ok(Self(fields))
    }

    pub fn constant(mu: MeanField, horizon: usize) -> Self {
        Self(vec![mu; horizon])
    }

    pub fn horizon(&self) -> usize {
        self.0.len()
    }

    pub fn n_states(&self) -> usize {
        self.0[0].len()
    }

    pub fn fields(&self) -> &[MeanField] {
        &self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, MeanField> {
        self.0.iter()
    }

    /// Mean squared difference over `t >= 1` and all states. Step 0 is the
    /// fixed initial distribution and does not enter.
    pub fn mse_after_first(&self, other: &MeanFieldFlow) -> f64 {
        let horizon = self.horizon().min(other.horizon());
        if horizon < 2 {
            return 0.0;
        }
        let mut acc = 0.0;
        let mut count = 0usize;
        for t in 1..horizon {
            for (a, b) in self.0[t].probs().iter().zip(other.0[t].probs()) {
                acc += (a - b) * (a - b);
                count += 1;
            }
        }
        acc / count as f64
    }

    pub fn max_abs_diff(&self, other: &MeanFieldFlow) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .flat_map(|(a, b)| a.probs().iter().zip(b.probs()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.0.iter().map(|mu| mu.probs().to_vec()).collect()
    }
}

impl std::ops::Index<usize> for MeanFieldFlow {
    type Output = MeanField;

    fn index(&self, t: usize) -> &MeanField {
        &self.0[t]
    }
}

/// Row-stochastic `|S| x |A|` matrix: the action distribution in each state
/// at one time step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct PerStepPolicy {
    n_actions: usize,
    probs: Vec<f64>,
}

impl PerStepPolicy {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = rows.first() else {
            return invalid("policy has no rows");
        };
        let n_actions = first.len();
        let mut probs = Vec::with_capacity(rows.len() * n_actions);
        for (s, row) in rows.iter().enumerate() {
            if row.len() != n_actions {
                return invalid(format!("policy row {s} has wrong width"));
            }
            check_distribution(row, &format!("policy row {s}"))?;
            probs.extend_from_slice(row);
        }
        Ok(Self { n_actions, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    /// Built from a flat row-major buffer that the caller guarantees is
    /// row-stochastic (used by the solvers, which normalize by construction).
    pub(crate) fn from_flat_unchecked(n_actions: usize, probs: Vec<f64>) -> Self {
        debug_assert_eq!(probs.len() % n_actions, 0);
        Self { n_actions, probs }
    }

    pub fn n_states(&self) -> usize {
        self.probs.len() / self.n_actions
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.probs[state * self.n_actions..(state + 1) * self.n_actions]
    }

    pub fn prob(&self, state: usize, action: usize) -> f64 {
        self.probs[state * self.n_actions + action]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.probs.chunks(self.n_actions).map(<[f64]>::to_vec).collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for PerStepPolicy {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(rows)
    }
}

impl From<PerStepPolicy> for Vec<Vec<f64>> {
    fn from(pi: PerStepPolicy) -> Self {
        pi.to_rows()
    }
}

/// Time-varying stochastic policy: one [`PerStepPolicy`] per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Policy(Vec<PerStepPolicy>);

impl Policy {
    pub fn new(steps: Vec<PerStepPolicy>) -> Result<Self> {
        let Some(first) = steps.first() else {
            return invalid("policy has no steps");
        };
        let shape = (first.n_states(), first.n_actions());
        if steps.iter().any(|p| (p.n_states(), p.n_actions()) != shape) {
            return invalid("per-step policies must share one shape");
        }
        Ok(Self(steps))
    }

    pub fn uniform(n_states: usize, n_actions: usize, horizon: usize) -> Self {
        Self(vec![PerStepPolicy::uniform(n_states, n_actions); horizon])
    }

    pub fn horizon(&self) -> usize {
        self.0.len()
    }

    pub fn n_states(&self) -> usize {
        self.0[0].n_states()
    }

    pub fn n_actions(&self) -> usize {
        self.0[0].n_actions()
    }

    pub fn steps(&self) -> &[PerStepPolicy] {
        &self.0
    }

    pub fn max_abs_diff(&self, other: &Policy) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .flat_map(|(a, b)| a.probs.iter().zip(&b.probs).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<usize> for Policy {
    type Output = PerStepPolicy;

    fn index(&self, t: usize) -> &PerStepPolicy {
        &self.0[t]
    }
}

/// State-action trajectory of one agent, `T` pairs long.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Trajectory(Vec<(usize, usize)>);

impl Trajectory {
    pub fn new(steps: Vec<(usize, usize)>) -> Self {
        Self(steps)
    }

    pub fn steps(&self) -> &[(usize, usize)] {
        &self.0
    }

    pub fn horizon(&self) -> usize {
        self.0.len()
    }

    pub fn state(&self, t: usize) -> usize {
        self.0[t].0
    }

    pub fn action(&self, t: usize) -> usize {
        self.0[t].1
    }

    fn check(&self, horizon: usize, n_states: usize, n_actions: usize) -> Result<()> {
        if self.0.len() != horizon {
            return invalid(format!(
                "trajectory has {} steps, expected {horizon}",
                self.0.len()
            ));
        }
        if self.0.iter().any(|&(s, a)| s >= n_states || a >= n_actions) {
            return invalid("trajectory index out of range");
        }
        Ok(())
    }
}

/// Dense transition kernel `p(s' | s, a)` for one fixed mean field.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionKernel {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TransitionKernel {
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn row(&self, state: usize, action: usize) -> &[f64] {
        let start = (state * self.n_actions + action) * self.n_states;
        &self.probs[start..start + self.n_states]
    }

    /// `sum_s' p(s'|s,a) * values[s']`.
    pub fn expect(&self, state: usize, action: usize, values: &[f64]) -> f64 {
        self.row(state, action)
            .iter()
            .zip(values)
            .map(|(p, v)| p * v)
            .sum()
    }

    /// Push a state distribution through a per-step policy and this kernel.
    pub fn propagate(&self, rho: &[f64], pi: &PerStepPolicy) -> Vec<f64> {
        let mut next = vec![0.0; self.n_states];
        for (s, &mass) in rho.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for (a, &pa) in pi.row(s).iter().enumerate() {
                let w = mass * pa;
                if w == 0.0 {
                    continue;
                }
                for (n, p) in next.iter_mut().zip(self.row(s, a)) {
                    *n += w * p;
                }
            }
        }
        next
    }
}

/// Transition model `p(s' | s, a, mu)`.
pub trait TransitionModel: Send + Sync {
    fn n_states(&self) -> usize;

    fn n_actions(&self) -> usize;

    /// Distribution over next states; must sum to one.
    fn next_state_dist(&self, state: usize, action: usize, mu: &MeanField) -> Vec<f64>;

    /// Dense kernel at a fixed mean field.
    fn kernel(&self, mu: &MeanField) -> TransitionKernel {
        let (n_states, n_actions) = (self.n_states(), self.n_actions());
        let mut probs = Vec::with_capacity(n_states * n_actions * n_states);
        for s in 0..n_states {
            for a in 0..n_actions {
                probs.extend(self.next_state_dist(s, a, mu));
            }
        }
        TransitionKernel {
            n_states,
            n_actions,
            probs,
        }
    }
}

/// Running reward `r(s, a, mu)`.
pub trait RewardFn: Send + Sync {
    fn reward(&self, state: usize, action: usize, mu: &MeanField) -> f64;
}

/// Adapts a closure into a [`RewardFn`].
pub struct FnReward<F>(pub F);

impl<F> RewardFn for FnReward<F>
where
    F: Fn(usize, usize, &MeanField) -> f64 + Send + Sync,
{
    fn reward(&self, state: usize, action: usize, mu: &MeanField) -> f64 {
        (self.0)(state, action, mu)
    }
}

/// Adapts a closure into a [`TransitionModel`].
pub struct FnTransition<F> {
    n_states: usize,
    n_actions: usize,
    f: F,
}

impl<F> FnTransition<F>
where
    F: Fn(usize, usize, &MeanField) -> Vec<f64> + Send + Sync,
{
    pub fn new(n_states: usize, n_actions: usize, f: F) -> Self {
        Self {
            n_states,
            n_actions,
            f,
        }
    }
}

impl<F> TransitionModel for FnTransition<F>
where
    F: Fn(usize, usize, &MeanField) -> Vec<f64> + Send + Sync,
{
    fn n_states(&self) -> usize {
        self.n_states
    }

    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn next_state_dist(&self, state: usize, action: usize, mu: &MeanField) -> Vec<f64> {
        (self.f)(state, action, mu)
    }
}

/// A complete finite mean-field game. The reward is optional: in the inverse
/// problem it is unknown.
#[derive(Clone)]
pub struct MfgSpec {
    states: Vec<String>,
    actions: Vec<String>,
    transition: Arc<dyn TransitionModel>,
    reward: Option<Arc<dyn RewardFn>>,
    mu0: MeanField,
    gamma: f64,
    horizon: usize,
}

impl fmt::Debug for MfgSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MfgSpec")
            .field("states", &self.states)
            .field("actions", &self.actions)
            .field("has_reward", &self.reward.is_some())
            .field("mu0", &self.mu0)
            .field("gamma", &self.gamma)
            .field("horizon", &self.horizon)
            .finish()
    }
}

impl MfgSpec {
    pub fn new(
        states: Vec<String>,
        actions: Vec<String>,
        transition: Arc<dyn TransitionModel>,
        reward: Option<Arc<dyn RewardFn>>,
        mu0: MeanField,
        gamma: f64,
        horizon: usize,
    ) -> Result<Self> {
        if states.is_empty() || actions.is_empty() {
            return invalid("state and action sets must be non-empty");
        }
        if transition.n_states() != states.len() || transition.n_actions() != actions.len() {
            return invalid("transition model dimensions disagree with labels");
        }
        if mu0.len() != states.len() {
            return invalid("mu0 length disagrees with the state set");
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return invalid(format!("gamma must lie in (0, 1], got {gamma}"));
        }
        if horizon == 0 {
            return invalid("horizon must be at least 1");
        }
        Ok(Self {
            states,
            actions,
            transition,
            reward,
            mu0,
            gamma,
            horizon,
        })
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn actions(&self) -> &[String] {
        &self.actions
    }

    pub fn transition(&self) -> &dyn TransitionModel {
        self.transition.as_ref()
    }

    pub fn reward(&self) -> Option<&dyn RewardFn> {
        self.reward.as_deref()
    }

    pub fn mu0(&self) -> &MeanField {
        &self.mu0
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn with_reward(&self, reward: Arc<dyn RewardFn>) -> Self {
        Self {
            reward: Some(reward),
            ..self.clone()
        }
    }

    pub fn without_reward(&self) -> Self {
        Self {
            reward: None,
            ..self.clone()
        }
    }

    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return invalid("horizon must be at least 1");
        }
        Ok(Self {
            horizon,
            ..self.clone()
        })
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return invalid(format!("gamma must lie in (0, 1], got {gamma}"));
        }
        Ok(Self {
            gamma,
            ..self.clone()
        })
    }

    pub fn with_mu0(&self, mu0: MeanField) -> Result<Self> {
        if mu0.len() != self.n_states() {
            return invalid("mu0 length disagrees with the state set");
        }
        Ok(Self {
            mu0,
            ..self.clone()
        })
    }

    pub(crate) fn require_reward(&self) -> Result<&dyn RewardFn> {
        self.reward()
            .ok_or_else(|| Error::Config("the game has no reward function".into()))
    }

    /// One kernel per element of `flow`.
    pub fn kernels(&self, flow: &MeanFieldFlow) -> Vec<TransitionKernel> {
        flow.iter().map(|mu| self.transition.kernel(mu)).collect()
    }

    pub(crate) fn check_flow(&self, flow: &MeanFieldFlow) -> Result<()> {
        if flow.horizon() != self.horizon {
            return invalid(format!(
                "flow horizon {} differs from game horizon {}",
                flow.horizon(),
                self.horizon
            ));
        }
        if flow.n_states() != self.n_states() {
            return invalid("flow state count differs from the game");
        }
        Ok(())
    }

    pub(crate) fn check_policy(&self, pi: &Policy) -> Result<()> {
        if pi.horizon() != self.horizon {
            return invalid(format!(
                "policy horizon {} differs from game horizon {}",
                pi.horizon(),
                self.horizon
            ));
        }
        if pi.n_states() != self.n_states() || pi.n_actions() != self.n_actions() {
            return invalid("policy shape differs from the game");
        }
        Ok(())
    }

    pub(crate) fn check_trajectory(&self, tau: &Trajectory) -> Result<()> {
        tau.check(self.horizon, self.n_states(), self.n_actions())
    }
}

/// One step of the McKean-Vlasov equation:
/// `mu'(s') = sum_s mu(s) sum_a pi(a|s) p(s'|s,a,mu)`.
pub fn mkv_step(
    mu: &MeanField,
    pi: &PerStepPolicy,
    transition: &dyn TransitionModel,
) -> Result<MeanField> {
    if mu.len() != transition.n_states()
        || pi.n_states() != transition.n_states()
        || pi.n_actions() != transition.n_actions()
    {
        return invalid("mkv_step: dimension mismatch");
    }
    let next = transition.kernel(mu).propagate(mu.probs(), pi);
    Ok(MeanField(renormalize(next, "mkv_step output")?))
}

/// Mean-field flow induced by a policy: starts at `mu0` and follows
/// [`mkv_step`].
pub fn induce_flow(pi: &Policy, spec: &MfgSpec) -> Result<MeanFieldFlow> {
    spec.check_policy(pi)?;
    let mut fields = Vec::with_capacity(spec.horizon());
    fields.push(spec.mu0().clone());
    for t in 0..spec.horizon() - 1 {
        let next = mkv_step(&fields[t], &pi[t], spec.transition())?;
        fields.push(next);
    }
    Ok(MeanFieldFlow(fields))
}

pub(crate) fn marginals_with_kernels(
    pi: &Policy,
    kernels: &[TransitionKernel],
    mu0: &MeanField,
) -> Result<Vec<MeanField>> {
    let mut out = Vec::with_capacity(pi.horizon());
    out.push(mu0.clone());
    for t in 0..pi.horizon() - 1 {
        let next = kernels[t].propagate(out[t].probs(), &pi[t]);
        out.push(MeanField(renormalize(next, "agent marginal")?));
    }
    Ok(out)
}

/// State marginals of a representative agent that follows `pi` while the
/// population follows `flow`. The pair need not be consistent.
pub fn agent_marginals(
    pi: &Policy,
    flow: &MeanFieldFlow,
    spec: &MfgSpec,
) -> Result<Vec<MeanField>> {
    spec.check_policy(pi)?;
    spec.check_flow(flow)?;
    marginals_with_kernels(pi, &spec.kernels(flow), spec.mu0())
}

fn discounted_sum_over_marginals(
    flow: &MeanFieldFlow,
    pi: &Policy,
    spec: &MfgSpec,
    mut per_state: impl FnMut(usize, usize, &MeanField) -> f64,
) -> Result<f64> {
    let marginals = agent_marginals(pi, flow, spec)?;
    let mut total = 0.0;
    let mut discount = 1.0;
    for (t, rho) in marginals.iter().enumerate() {
        let mut step = 0.0;
        for (s, &mass) in rho.probs().iter().enumerate() {
            if mass > 0.0 {
                step += mass * per_state(t, s, &flow[t]);
            }
        }
        total += discount * step;
        discount *= spec.gamma();
    }
    Ok(total)
}

/// Exact discounted return of a representative agent following `pi` against
/// `flow`, under the game's reward.
pub fn expected_return(flow: &MeanFieldFlow, pi: &Policy, spec: &MfgSpec) -> Result<f64> {
    let reward = spec.require_reward()?;
    discounted_sum_over_marginals(flow, pi, spec, |t, s, mu| {
        pi[t]
            .row(s)
            .iter()
            .enumerate()
            .map(|(a, &pa)| pa * reward.reward(s, a, mu))
            .sum()
    })
}

/// Shannon entropy in nats; `0 ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// [`expected_return`] plus the discounted `beta`-weighted policy entropy.
pub fn entropy_regularized_return(
    flow: &MeanFieldFlow,
    pi: &Policy,
    spec: &MfgSpec,
    beta: f64,
) -> Result<f64> {
    if !(beta > 0.0) {
        return invalid(format!("beta must be positive, got {beta}"));
    }
    let base = expected_return(flow, pi, spec)?;
    let bonus = discounted_sum_over_marginals(flow, pi, spec, |t, s, _| beta * entropy(pi[t].row(s)))?;
    Ok(base + bonus)
}

/// Log-probability of a trajectory under the product law
/// `mu0(s0) prod_t pi_t(a_t|s_t) prod_t p(s_{t+1}|s_t,a_t,mu_t)`.
/// Impossible trajectories give `f64::NEG_INFINITY`.
pub fn trajectory_log_prob(
    tau: &Trajectory,
    pi: &Policy,
    flow: &MeanFieldFlow,
    spec: &MfgSpec,
) -> Result<f64> {
    spec.check_policy(pi)?;
    spec.check_flow(flow)?;
    spec.check_trajectory(tau)?;
    let kernels = spec.kernels(flow);
    Ok(trajectory_log_prob_with(tau, pi, &kernels, spec.mu0()))
}

pub(crate) fn trajectory_log_prob_with(
    tau: &Trajectory,
    pi: &Policy,
    kernels: &[TransitionKernel],
    mu0: &MeanField,
) -> f64 {
    let mut lp = mu0.get(tau.state(0)).ln();
    for (t, &(s, a)) in tau.steps().iter().enumerate() {
        lp += pi[t].prob(s, a).ln();
        if t + 1 < tau.horizon() {
            lp += kernels[t].row(s, a)[tau.state(t + 1)].ln();
        }
        if lp == f64::NEG_INFINITY {
            break;
        }
    }
    lp
}

/// Unnormalized log-density of the energy-based trajectory model:
/// `ln mu0(s0) + sum_t gamma^t r(s_t,a_t,mu_t) + sum_t ln p(s_{t+1}|s_t,a_t,mu_t)`.
pub fn energy_log_weight(
    tau: &Trajectory,
    flow: &MeanFieldFlow,
    reward: &dyn RewardFn,
    spec: &MfgSpec,
) -> Result<f64> {
    spec.check_flow(flow)?;
    spec.check_trajectory(tau)?;
    let kernels = spec.kernels(flow);
    let mut lw = spec.mu0().get(tau.state(0)).ln();
    let mut discount = 1.0;
    for (t, &(s, a)) in tau.steps().iter().enumerate() {
        lw += discount * reward.reward(s, a, &flow[t]);
        if t + 1 < tau.horizon() {
            lw += kernels[t].row(s, a)[tau.state(t + 1)].ln();
        }
        discount *= spec.gamma();
    }
    Ok(lw)
}

/// Every trajectory of length `horizon` over the given state and action
/// counts, in lexicographic order. Meant for exhaustive checks on tiny games.
pub fn all_trajectories(n_states: usize, n_actions: usize, horizon: usize) -> Vec<Trajectory> {
    let per_step = n_states * n_actions;
    let total = per_step.checked_pow(horizon as u32).expect("too many trajectories");
    (0..total)
        .map(|mut code| {
            let mut steps = vec![(0, 0); horizon];
            for step in steps.iter_mut().rev() {
                let cell = code % per_step;
                code /= per_step;
                *step = (cell / n_actions, cell % n_actions);
            }
            Trajectory(steps)
        })
        .collect()
}

/// Inverse-CDF draw from a discrete distribution.
pub(crate) fn sample_index<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left a sliver above the last cumulative value.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Empirical state distribution of a set of agents.
pub(crate) fn empirical_mean_field(states: &[usize], n_states: usize) -> MeanField {
    let mut probs = vec![0.0; n_states];
    let w = 1.0 / states.len() as f64;
    for &s in states {
        probs[s] += w;
    }
    MeanField(probs)
}

/// Simulate one game play of `n_agents` agents following `pi`.
///
/// Transitions at step `t` use the live empirical mean field of the agents,
/// so the population coupling is the finite-N one. The empirical flow is
/// returned alongside the trajectories.
pub fn sample_game_play(
    spec: &MfgSpec,
    pi: &Policy,
    n_agents: usize,
    seed: u64,
) -> Result<(Vec<Trajectory>, MeanFieldFlow)> {
    spec.check_policy(pi)?;
    if n_agents == 0 {
        return invalid("n_agents must be at least 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = spec.horizon();
    let n_states = spec.n_states();
    let mut states: Vec<usize> = (0..n_agents)
        .map(|_| sample_index(&mut rng, spec.mu0().probs()))
        .collect();
    let mut paths: Vec<Vec<(usize, usize)>> = vec![Vec::with_capacity(horizon); n_agents];
    let mut fields = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let mu_hat = empirical_mean_field(&states, n_states);
        let actions: Vec<usize> = states
            .iter()
            .map(|&s| sample_index(&mut rng, pi[t].row(s)))
            .collect();
        for (path, (&s, &a)) in paths.iter_mut().zip(states.iter().zip(&actions)) {
            path.push((s, a));
        }
        if t + 1 < horizon {
            let kernel = spec.transition().kernel(&mu_hat);
            for (s, &a) in states.iter_mut().zip(&actions) {
                *s = sample_index(&mut rng, kernel.row(*s, a));
            }
        }
        fields.push(mu_hat);
    }
    let trajectories = paths.into_iter().map(Trajectory).collect();
    Ok((trajectories, MeanFieldFlow(fields)))
}

/// Expert demonstrations: `M` game plays of `N` agent trajectories each.
#[derive(Clone, Debug, PartialEq)]
pub struct DemoSet {
    env: String,
    variant: String,
    horizon: usize,
    n_agents: usize,
    gamma: f64,
    plays: Vec<Vec<Trajectory>>,
}

/// Current on-disk version of the demonstration document.
pub const DEMO_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DemoDocument {
    version: u32,
    env: String,
    variant: String,
    #[serde(rename = "T")]
    horizon: usize,
    #[serde(rename = "N")]
    n_agents: usize,
    #[serde(rename = "M")]
    n_plays: usize,
    gamma: f64,
    plays: Vec<Vec<Trajectory>>,
}

impl DemoSet {
    pub fn new(
        env: impl Into<String>,
        variant: impl Into<String>,
        gamma: f64,
        plays: Vec<Vec<Trajectory>>,
    ) -> Result<Self> {
        let Some(first) = plays.first().and_then(|p| p.first()) else {
            return invalid("demo set has no trajectories");
        };
        let horizon = first.horizon();
        let n_agents = plays[0].len();
        for (j, play) in plays.iter().enumerate() {
            if play.len() != n_agents {
                return invalid(format!("play {j} has {} agents, expected {n_agents}", play.len()));
            }
            if play.iter().any(|tau| tau.horizon() != horizon) {
                return invalid(format!("play {j} has a trajectory of the wrong length"));
            }
        }
        if horizon == 0 {
            return invalid("demo trajectories are empty");
        }
        Ok(Self {
            env: env.into(),
            variant: variant.into(),
            horizon,
            n_agents,
            gamma,
            plays,
        })
    }

    pub fn env(&self) -> &str {
        &self.env
    }

    pub fn variant(&self) -> &str {
        &self.variant
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn n_plays(&self) -> usize {
        self.plays.len()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn plays(&self) -> &[Vec<Trajectory>] {
        &self.plays
    }

    /// All agent trajectories across plays, in play order.
    pub fn trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.plays.iter().flatten()
    }

    /// Checks horizons and index ranges against a game.
    pub fn check_against(&self, spec: &MfgSpec) -> Result<()> {
        if self.horizon != spec.horizon() {
            return invalid(format!(
                "demo horizon {} differs from game horizon {}",
                self.horizon,
                spec.horizon()
            ));
        }
        for tau in self.trajectories() {
            spec.check_trajectory(tau)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = DemoDocument {
            version: DEMO_FORMAT_VERSION,
            env: self.env.clone(),
            variant: self.variant.clone(),
            horizon: self.horizon,
            n_agents: self.n_agents,
            n_plays: self.plays.len(),
            gamma: self.gamma,
            plays: self.plays.clone(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: DemoDocument = serde_json::from_str(text)?;
        if doc.version != DEMO_FORMAT_VERSION {
            return invalid(format!("unsupported demo format version {}", doc.version));
        }
        let set = Self::new(doc.env, doc.variant, doc.gamma, doc.plays)?;
        if set.horizon != doc.horizon || set.n_agents != doc.n_agents || set.n_plays() != doc.n_plays {
            return invalid("demo header disagrees with its contents");
        }
        Ok(set)
    }
}
