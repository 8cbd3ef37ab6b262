//! Reward recovery from demonstrations: maximum-likelihood MFIRL with a
//! shaped reward model and importance-sampled partition estimates, and the
//! population-level MFG-MDP baseline.

use std::io::Write;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::envs::{encode_features, encode_state_features, feature_width};
use crate::error::{invalid, Error, Result};
use crate::mfg::{
    empirical_mean_field, mkv_step, sample_index, DemoSet, MeanField, MeanFieldFlow, MfgSpec,
    PerStepPolicy, RewardFn, Trajectory, TransitionKernel,
};
use crate::nn::{AdamState, Approximator, Init, MlpSpec};
use crate::solver::{
    soft_max_value, train_adaptive_samplers, PotentialFn, RewardTable, SamplerConfig,
    SamplerMode, ShapedReward,
};

/// Scale of the uniform initialization of reward and potential weights.
pub const INIT_SCALE: f64 = 0.1;

/// Learned reward `r_w(s, a, mu)` plus potential `g_phi(s, mu)`.
///
/// The shaped reward is `r_w(s, a, mu) + gamma * g_phi(s', mu') -
/// g_phi(s, mu)`, with the potential taken as zero after the final step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    pub core: Approximator,
    pub potential: Approximator,
    pub gamma: f64,
}

impl RewardModel {
    /// Model with seeded `U(-0.1, 0.1)` weights and zero biases.
    pub fn new<R: Rng + ?Sized>(
        n_states: usize,
        n_actions: usize,
        hidden: &[usize],
        gamma: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let init = Init::Uniform { scale: INIT_SCALE };
        let core = MlpSpec::new(feature_width(n_states, n_actions), hidden.to_vec(), 1)?
            .with_init(init);
        let potential = MlpSpec::new(2 * n_states, hidden.to_vec(), 1)?.with_init(init);
        Self::from_parts(
            Approximator::new(core, rng),
            Approximator::new(potential, rng),
            gamma,
        )
    }

    /// Model whose every output is zero.
    pub fn zeros(n_states: usize, n_actions: usize, hidden: &[usize], gamma: f64) -> Result<Self> {
        let core = MlpSpec::new(feature_width(n_states, n_actions), hidden.to_vec(), 1)?;
        let potential = MlpSpec::new(2 * n_states, hidden.to_vec(), 1)?;
        Self::from_parts(Approximator::zeros(core), Approximator::zeros(potential), gamma)
    }

    pub fn from_parts(core: Approximator, potential: Approximator, gamma: f64) -> Result<Self> {
        let model = Self {
            core,
            potential,
            gamma,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return invalid(format!("gamma {} outside (0, 1]", self.gamma));
        }
        let (c, p) = (&self.core.spec, &self.potential.spec);
        if c.output != 1 || p.output != 1 {
            return invalid("reward and potential networks must have scalar output");
        }
        if p.input % 2 != 0 || p.input == 0 || c.input <= p.input {
            return invalid("network input widths do not match the feature layout");
        }
        if self.core.params.len() != c.n_params() || self.potential.params.len() != p.n_params() {
            return invalid("parameter count disagrees with the network spec");
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.potential.spec.input / 2
    }

    pub fn n_actions(&self) -> usize {
        self.core.spec.input - self.potential.spec.input
    }

    /// Core reward `r_w(s, a, mu)`.
    pub fn core_reward(&self, state: usize, action: usize, mu: &MeanField) -> Result<f64> {
        self.core
            .eval_scalar(&encode_features(state, action, mu, self.n_actions())?)
    }

    /// Potential `g_phi(s, mu)`.
    pub fn potential_value(&self, state: usize, mu: &MeanField) -> Result<f64> {
        self.potential.eval_scalar(&encode_state_features(state, mu)?)
    }

    /// `r_w(s, a, mu) + gamma * g_phi(s', mu') - g_phi(s, mu)`.
    pub fn shaped_reward(
        &self,
        state: usize,
        action: usize,
        mu: &MeanField,
        next: Option<(usize, &MeanField)>,
    ) -> Result<f64> {
        let next_potential = match next {
            Some((s, m)) => self.gamma * self.potential_value(s, m)?,
            None => 0.0,
        };
        Ok(self.core_reward(state, action, mu)? + next_potential - self.potential_value(state, mu)?)
    }

    /// The shaped reward as a [`FlowReward`] for the forward solver.
    pub fn shaped(&self) -> ShapedReward<'_> {
        ShapedReward {
            base: self,
            potential: self,
        }
    }

    /// Copy with the potential set to zero.
    pub fn without_potential(&self) -> Self {
        let mut model = self.clone();
        model.potential.params.iter_mut().for_each(|p| *p = 0.0);
        model
    }

    pub fn check_spec(&self, spec: &MfgSpec) -> Result<()> {
        if self.n_states() != spec.n_states() || self.n_actions() != spec.n_actions() {
            return invalid(format!(
                "reward model is for |S|={}, |A|={}, game has |S|={}, |A|={}",
                self.n_states(),
                self.n_actions(),
                spec.n_states(),
                spec.n_actions()
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: RewardModel = serde_json::from_str(text)?;
        model.validate()?;
        if model
            .core
            .params
            .iter()
            .chain(&model.potential.params)
            .any(|p| !p.is_finite())
        {
            return invalid("saved parameters are not finite");
        }
        Ok(model)
    }
}

impl RewardFn for RewardModel {
    /// Non-finite on malformed input, which the solver reports.
    fn reward(&self, state: usize, action: usize, mu: &MeanField) -> f64 {
        self.core_reward(state, action, mu).unwrap_or(f64::NAN)
    }
}

impl PotentialFn for RewardModel {
    fn potential(&self, state: usize, mu: &MeanField) -> f64 {
        self.potential_value(state, mu).unwrap_or(f64::NAN)
    }
}

/// State-frequency estimate of the expert flow, averaged over agents and
/// plays.
pub fn estimate_expert_flow(demos: &DemoSet, n_states: usize) -> Result<MeanFieldFlow> {
    if demos.n_plays() == 0 || demos.n_agents() == 0 {
        return invalid("empty demonstration set");
    }
    let mut counts = vec![vec![0.0; n_states]; demos.horizon()];
    for tau in demos.trajectories() {
        for (t, &(s, _)) in tau.steps().iter().enumerate() {
            if s >= n_states {
                return invalid(format!("demo state {s} out of range for |S|={n_states}"));
            }
            counts[t][s] += 1.0;
        }
    }
    let total = (demos.n_plays() * demos.n_agents()) as f64;
    let fields = counts
        .into_iter()
        .map(|row| MeanField::new(row.into_iter().map(|c| c / total).collect()))
        .collect::<Result<Vec<_>>>()?;
    MeanFieldFlow::new(fields)
}

/// Core rewards and potentials tabulated at a fixed flow.
struct ModelTables {
    n_actions: usize,
    reward: Vec<f64>,
    potential: Vec<f64>,
    n_states: usize,
}

impl ModelTables {
    fn new(model: &RewardModel, flow: &MeanFieldFlow) -> Result<Self> {
        let (n_states, n_actions) = (model.n_states(), model.n_actions());
        if flow.n_states() != n_states {
            return invalid("flow and reward model disagree on the state count");
        }
        let mut reward = Vec::with_capacity(flow.horizon() * n_states * n_actions);
        let mut potential = Vec::with_capacity(flow.horizon() * n_states);
        for mu in flow.iter() {
            for s in 0..n_states {
                for a in 0..n_actions {
                    reward.push(model.core_reward(s, a, mu)?);
                }
                potential.push(model.potential_value(s, mu)?);
            }
        }
        let tables = Self {
            n_actions,
            reward,
            potential,
            n_states,
        };
        if tables.reward.iter().chain(&tables.potential).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("reward model produced a non-finite value".into()));
        }
        Ok(tables)
    }

    fn r(&self, t: usize, s: usize, a: usize) -> f64 {
        self.reward[(t * self.n_states + s) * self.n_actions + a]
    }

    fn g(&self, t: usize, s: usize) -> f64 {
        self.potential[t * self.n_states + s]
    }

    fn check(&self, tau: &Trajectory) -> Result<()> {
        let horizon = self.potential.len() / self.n_states;
        if tau.horizon() != horizon {
            return invalid(format!(
                "trajectory horizon {} differs from flow horizon {horizon}",
                tau.horizon()
            ));
        }
        if tau
            .steps()
            .iter()
            .any(|&(s, a)| s >= self.n_states || a >= self.n_actions)
        {
            return invalid("trajectory index out of range");
        }
        Ok(())
    }

    fn shaped_sum(&self, tau: &Trajectory, gamma: f64) -> f64 {
        let horizon = tau.horizon();
        let mut total = 0.0;
        let mut discount = 1.0;
        for t in 0..horizon {
            let (s, a) = tau.steps()[t];
            let next = if t + 1 < horizon {
                gamma * self.g(t + 1, tau.state(t + 1))
            } else {
                0.0
            };
            total += discount * (self.r(t, s, a) + next - self.g(t, s));
            discount *= gamma;
        }
        total
    }
}

/// Cell weights for the gradient of a weighted sum of shaped returns.
struct CellWeights {
    n_states: usize,
    n_actions: usize,
    core: Vec<f64>,
    potential: Vec<f64>,
}

impl CellWeights {
    fn new(horizon: usize, n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            core: vec![0.0; horizon * n_states * n_actions],
            potential: vec![0.0; horizon * n_states],
        }
    }

    fn add(&mut self, tau: &Trajectory, weight: f64, gamma: f64) {
        let horizon = tau.horizon();
        let mut discount = 1.0;
        for t in 0..horizon {
            let (s, a) = tau.steps()[t];
            self.core[(t * self.n_states + s) * self.n_actions + a] += weight * discount;
            self.potential[t * self.n_states + s] -= weight * discount;
            if t + 1 < horizon {
                self.potential[(t + 1) * self.n_states + tau.state(t + 1)] +=
                    weight * discount * gamma;
            }
            discount *= gamma;
        }
    }

    fn gradients(&self, model: &RewardModel, flow: &MeanFieldFlow) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut grad_omega = vec![0.0; model.core.params.len()];
        let mut grad_phi = vec![0.0; model.potential.params.len()];
        for (t, mu) in flow.iter().enumerate() {
            for s in 0..self.n_states {
                for a in 0..self.n_actions {
                    let w = self.core[(t * self.n_states + s) * self.n_actions + a];
                    if w != 0.0 {
                        let x = encode_features(s, a, mu, self.n_actions)?;
                        model.core.spec.accumulate_grad(
                            &model.core.params,
                            &x,
                            &[w],
                            1.0,
                            &mut grad_omega,
                        )?;
                    }
                }
                let w = self.potential[t * self.n_states + s];
                if w != 0.0 {
                    let x = encode_state_features(s, mu)?;
                    model.potential.spec.accumulate_grad(
                        &model.potential.params,
                        &x,
                        &[w],
                        1.0,
                        &mut grad_phi,
                    )?;
                }
            }
        }
        Ok((grad_omega, grad_phi))
    }
}

/// Discounted shaped return of one trajectory against a fixed flow.
pub fn demo_reward_sum(tau: &Trajectory, model: &RewardModel, flow: &MeanFieldFlow) -> Result<f64> {
    let tables = ModelTables::new(model, flow)?;
    tables.check(tau)?;
    Ok(tables.shaped_sum(tau, model.gamma))
}

/// A sampler trajectory with `sum_t log q_t(a_t | s_t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledTrajectory {
    pub trajectory: Trajectory,
    pub log_q: f64,
}

fn log_mean_exp(values: &[f64]) -> f64 {
    soft_max_value(values, 1.0) - (values.len() as f64).ln()
}

fn log_weights(samples: &[SampledTrajectory], tables: &ModelTables, gamma: f64) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return invalid("partition estimate needs at least one sample");
    }
    samples
        .iter()
        .map(|sample| {
            tables.check(&sample.trajectory)?;
            if sample.log_q == f64::NEG_INFINITY || sample.log_q.is_nan() {
                return invalid("sampled trajectory has zero sampler probability");
            }
            Ok(tables.shaped_sum(&sample.trajectory, gamma) - sample.log_q)
        })
        .collect()
}

/// Importance-sampled `log Z`: log of the sample mean of
/// `exp(R(tau)) / q(tau)`, in log space.
pub fn estimate_partition(
    samples: &[SampledTrajectory],
    model: &RewardModel,
    flow: &MeanFieldFlow,
) -> Result<f64> {
    let tables = ModelTables::new(model, flow)?;
    Ok(log_mean_exp(&log_weights(samples, &tables, model.gamma)?))
}

/// Likelihood estimate and its gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    /// Mean demo return minus `log_partition`.
    pub value: f64,
    pub log_partition: f64,
    pub grad_omega: Vec<f64>,
    pub grad_phi: Vec<f64>,
}

/// `L = mean_demo R(tau) - log Z` with gradients through both networks.
/// The partition gradient uses self-normalized importance weights.
pub fn mfirl_objective_and_grads(
    demos: &[&Trajectory],
    model: &RewardModel,
    flow: &MeanFieldFlow,
    samples: &[SampledTrajectory],
) -> Result<Objective> {
    if demos.is_empty() {
        return invalid("objective needs at least one demonstration");
    }
    let tables = ModelTables::new(model, flow)?;
    let gamma = model.gamma;
    let log_w = log_weights(samples, &tables, gamma)?;
    let log_partition = log_mean_exp(&log_w);
    let mut cells = CellWeights::new(flow.horizon(), model.n_states(), model.n_actions());
    let mut demo_mean = 0.0;
    let scale = 1.0 / demos.len() as f64;
    for tau in demos {
        tables.check(tau)?;
        demo_mean += scale * tables.shaped_sum(tau, gamma);
        cells.add(tau, scale, gamma);
    }
    let top = soft_max_value(&log_w, 1.0);
    for (sample, lw) in samples.iter().zip(&log_w) {
        let w = (lw - top).exp();
        if w > 0.0 {
            cells.add(&sample.trajectory, -w, gamma);
        }
    }
    let (grad_omega, grad_phi) = cells.gradients(model, flow)?;
    let value = demo_mean - log_partition;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("likelihood estimate is {value}")));
    }
    Ok(Objective {
        value,
        log_partition,
        grad_omega,
        grad_phi,
    })
}

/// Exact `log Z` of the energy model at a fixed flow:
/// `log sum_tau mu_0(s_0) prod_t p(s_{t+1}|s_t,a_t,mu_t) exp(R(tau))`,
/// by backward recursion.
pub fn exact_log_partition(model: &RewardModel, flow: &MeanFieldFlow, spec: &MfgSpec) -> Result<f64> {
    model.check_spec(spec)?;
    spec.check_flow(flow)?;
    let kernels = spec.kernels(flow);
    let values = exact_energy_values(&trajectory_reward_table(model, flow)?, &kernels);
    let v0 = &values[0];
    let terms: Vec<f64> = flow[0]
        .probs()
        .iter()
        .zip(v0)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, v)| p.ln() + v)
        .collect();
    Ok(soft_max_value(&terms, 1.0))
}

/// Per-step core rewards with the potential terms that telescope along any
/// trajectory folded in: only `-g(s_0, mu_0)` survives.
fn trajectory_reward_table(model: &RewardModel, flow: &MeanFieldFlow) -> Result<RewardTable> {
    let tables = ModelTables::new(model, flow)?;
    let (n_states, n_actions) = (model.n_states(), model.n_actions());
    let mut table = RewardTable::new(flow.horizon(), n_states, n_actions);
    let mut discount = 1.0;
    for t in 0..flow.horizon() {
        for s in 0..n_states {
            for a in 0..n_actions {
                let shaping = if t == 0 { -tables.g(0, s) } else { 0.0 };
                table.set(t, s, a, discount * tables.r(t, s, a) + shaping);
            }
        }
        discount *= model.gamma;
    }
    Ok(table)
}

/// `V_t(s) = log sum_a exp(R_t(s,a) + log E_{s'} exp V_{t+1}(s'))` with
/// already-discounted per-step rewards.
fn exact_energy_values(table: &RewardTable, kernels: &[TransitionKernel]) -> Vec<Vec<f64>> {
    let horizon = table.horizon();
    let n_states = kernels[0].n_states();
    let n_actions = kernels[0].n_actions();
    let mut values = vec![vec![0.0; n_states]; horizon];
    for t in (0..horizon).rev() {
        for s in 0..n_states {
            let row: Vec<f64> = (0..n_actions)
                .map(|a| {
                    let future = if t + 1 < horizon {
                        let terms: Vec<f64> = kernels[t]
                            .row(s, a)
                            .iter()
                            .zip(&values[t + 1])
                            .filter(|(p, _)| **p > 0.0)
                            .map(|(p, v)| p.ln() + v)
                            .collect();
                        soft_max_value(&terms, 1.0)
                    } else {
                        0.0
                    };
                    table.get(t, s, a) + future
                })
                .collect();
            values[t][s] = soft_max_value(&row, 1.0);
        }
    }
    values
}

/// Draw trajectories from per-step samplers with transitions at a fixed
/// flow, recording each trajectory's sampler log-probability.
pub fn sample_trajectories<R: Rng + ?Sized>(
    samplers: &crate::mfg::Policy,
    flow: &MeanFieldFlow,
    spec: &MfgSpec,
    count: usize,
    rng: &mut R,
) -> Result<Vec<SampledTrajectory>> {
    spec.check_flow(flow)?;
    spec.check_policy(samplers)?;
    let kernels = spec.kernels(flow);
    let horizon = spec.horizon();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut s = sample_index(rng, flow[0].probs());
        let mut steps = Vec::with_capacity(horizon);
        let mut log_q = 0.0;
        for t in 0..horizon {
            let row = samplers[t].row(s);
            let a = sample_index(rng, row);
            log_q += row[a].ln();
            steps.push((s, a));
            if t + 1 < horizon {
                s = sample_index(rng, kernels[t].row(s, a));
            }
        }
        out.push(SampledTrajectory {
            trajectory: Trajectory::new(steps),
            log_q,
        });
    }
    Ok(out)
}

/// Settings shared by [`mfirl_train`] and [`mfgmdp_irl_train`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IrlConfig {
    pub epochs: usize,
    /// Demonstration trajectories per gradient step.
    pub minibatch: usize,
    /// Sampler trajectories per partition estimate.
    pub samples: usize,
    pub learning_rate: f64,
    /// Reward learning rate at the last epoch as a fraction of
    /// `learning_rate`, reached by cosine decay; 1 keeps it constant.
    pub final_learning_rate_fraction: f64,
    pub seed: u64,
    /// Hidden widths of the reward and potential networks; empty is linear.
    pub hidden: Vec<usize>,
    pub sampler: SamplerConfig,
    /// Sampler updates per epoch of the population-level baseline.
    pub baseline_sampler_steps: usize,
    /// Policy sequences per baseline sampler update.
    pub baseline_sampler_batch: usize,
    pub baseline_sampler_learning_rate: f64,
}

impl Default for IrlConfig {
    fn default() -> Self {
        Self::tabular()
    }
}

impl IrlConfig {
    /// Exact samplers.
    pub fn tabular() -> Self {
        Self {
            epochs: 200,
            minibatch: 32,
            samples: 256,
            learning_rate: 0.01,
            final_learning_rate_fraction: 0.05,
            seed: 0,
            hidden: vec![64, 64],
            sampler: SamplerConfig::tabular(),
            baseline_sampler_steps: 5,
            baseline_sampler_batch: 32,
            baseline_sampler_learning_rate: 0.05,
        }
    }

    /// Soft Q-learning samplers.
    pub fn approximator() -> Self {
        Self {
            epochs: 500,
            learning_rate: 1e-3,
            sampler: SamplerConfig::approximator(),
            ..Self::tabular()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }

    /// Reward learning rate used at `epoch`.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let progress = if self.epochs > 1 {
            epoch as f64 / (self.epochs - 1) as f64
        } else {
            0.0
        };
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.learning_rate * (self.final_learning_rate_fraction + (1.0 - self.final_learning_rate_fraction) * cosine)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.minibatch == 0 || self.samples == 0 {
            return Err(Error::Config("epochs, minibatch and samples must be at least 1".into()));
        }
        if self.baseline_sampler_batch < 2 {
            return Err(Error::Config("baseline sampler batch must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.baseline_sampler_learning_rate > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.final_learning_rate_fraction > 0.0 && self.final_learning_rate_fraction <= 1.0) {
            return Err(Error::Config("final learning rate fraction must be in (0, 1]".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be at least 1".into()));
        }
        if self.sampler.mode == SamplerMode::Approximator && self.sampler.hidden.contains(&0) {
            return Err(Error::Config("sampler hidden widths must be at least 1".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub epoch: usize,
    #[serde(rename = "L_hat")]
    pub l_hat: f64,
    pub grad_norm_omega: f64,
    pub grad_norm_phi: f64,
}

/// Per-epoch likelihood estimates and gradient norms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog(pub Vec<TrainingRecord>);

impl TrainingLog {
    pub fn records(&self) -> &[TrainingRecord] {
        &self.0
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(writer);
        for record in &self.0 {
            csv.serialize(record)?;
        }
        csv.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_demos(spec: &MfgSpec, demos: &DemoSet) -> Result<()> {
    if demos.horizon() != spec.horizon() {
        return Err(Error::Config(format!(
            "demo horizon {} differs from game horizon {}",
            demos.horizon(),
            spec.horizon()
        )));
    }
    demos.check_against(spec)
}

fn ascend(adam: &mut AdamState, params: &mut [f64], grad: &[f64]) -> Result<()> {
    let negated: Vec<f64> = grad.iter().map(|g| -g).collect();
    adam.step(params, &negated)
}

/// Mean field inverse reinforcement learning.
///
/// The expert flow is estimated once. Each epoch retrains the adaptive
/// samplers against the current shaped reward at that flow, draws sampler
/// trajectories, estimates `log Z`, draws a demonstration minibatch, and
/// takes one Adam ascent step on both networks. The spec's reward, if any,
/// is not used.
pub fn mfirl_train(
    spec: &MfgSpec,
    demos: &DemoSet,
    cfg: &IrlConfig,
) -> Result<(RewardModel, TrainingLog)> {
    cfg.validate()?;
    check_demos(spec, demos)?;
    let spec = spec.without_reward();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let flow = estimate_expert_flow(demos, spec.n_states())?;
    let trajectories: Vec<&Trajectory> = demos.trajectories().collect();
    let mut model = RewardModel::new(
        spec.n_states(),
        spec.n_actions(),
        &cfg.hidden,
        spec.gamma(),
        &mut rng,
    )?;
    let mut adam_omega = AdamState::new(model.core.params.len(), cfg.learning_rate);
    let mut adam_phi = AdamState::new(model.potential.params.len(), cfg.learning_rate);
    let mut log = TrainingLog::default();
    let batch = cfg.minibatch.min(trajectories.len());
    for epoch in 0..cfg.epochs {
        let samplers = train_adaptive_samplers(&model.shaped(), &flow, &spec, &cfg.sampler, &mut rng)?;
        let samples = sample_trajectories(&samplers, &flow, &spec, cfg.samples, &mut rng)?;
        let picked: Vec<&Trajectory> = index::sample(&mut rng, trajectories.len(), batch)
            .into_iter()
            .map(|i| trajectories[i])
            .collect();
        let objective = mfirl_objective_and_grads(&picked, &model, &flow, &samples)?;
        log.0.push(TrainingRecord {
            epoch,
            l_hat: objective.value,
            grad_norm_omega: norm(&objective.grad_omega),
            grad_norm_phi: norm(&objective.grad_phi),
        });
        adam_omega.learning_rate = cfg.learning_rate_at(epoch);
        adam_phi.learning_rate = adam_omega.learning_rate;
        ascend(&mut adam_omega, &mut model.core.params, &objective.grad_omega)?;
        ascend(&mut adam_phi, &mut model.potential.params, &objective.grad_phi)?;
    }
    Ok((model, log))
}

/// Mean field and empirical policy of one step of one game play.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationStep {
    pub mu: MeanField,
    pub policy: PerStepPolicy,
}

/// Population-level trajectory estimated from one game play.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationTrajectory(pub Vec<PopulationStep>);

impl PopulationTrajectory {
    pub fn steps(&self) -> &[PopulationStep] {
        &self.0
    }
}

/// One population trajectory per game play: state frequencies and
/// per-state action frequencies, with unvisited states given the uniform
/// policy.
pub fn estimate_population_demos(
    demos: &DemoSet,
    n_states: usize,
    n_actions: usize,
) -> Result<Vec<PopulationTrajectory>> {
    let mut out = Vec::with_capacity(demos.n_plays());
    for play in demos.plays() {
        let mut steps = Vec::with_capacity(demos.horizon());
        for t in 0..demos.horizon() {
            let mut counts = vec![vec![0.0; n_actions]; n_states];
            let mut states = Vec::with_capacity(play.len());
            for tau in play {
                let (s, a) = tau.steps()[t];
                if s >= n_states || a >= n_actions {
                    return invalid("demo index out of range");
                }
                counts[s][a] += 1.0;
                states.push(s);
            }
            let rows = counts
                .into_iter()
                .map(|row| {
                    let total: f64 = row.iter().sum();
                    if total > 0.0 {
                        row.into_iter().map(|c| c / total).collect()
                    } else {
                        vec![1.0 / n_actions as f64; n_actions]
                    }
                })
                .collect();
            steps.push(PopulationStep {
                mu: empirical_mean_field(&states, n_states),
                policy: PerStepPolicy::from_rows(rows)?,
            });
        }
        out.push(PopulationTrajectory(steps));
    }
    Ok(out)
}

/// Average reward of the population: `sum_s mu(s) sum_a pi(a|s) r(s,a,mu)`.
pub fn population_reward(mu: &MeanField, pi: &PerStepPolicy, reward: &dyn RewardFn) -> f64 {
    mu.probs()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m > 0.0)
        .map(|(s, &m)| {
            m * pi
                .row(s)
                .iter()
                .enumerate()
                .map(|(a, &p)| if p > 0.0 { p * reward.reward(s, a, mu) } else { 0.0 })
                .sum::<f64>()
        })
        .sum()
}

fn population_return(traj: &PopulationTrajectory, model: &RewardModel) -> f64 {
    let mut discount = 1.0;
    let mut total = 0.0;
    for step in traj.steps() {
        total += discount * population_reward(&step.mu, &step.policy, model);
        discount *= model.gamma;
    }
    total
}

fn accumulate_population_grad(
    traj: &PopulationTrajectory,
    model: &RewardModel,
    weight: f64,
    grad: &mut [f64],
) -> Result<()> {
    let mut discount = 1.0;
    let n_actions = model.n_actions();
    for step in traj.steps() {
        for (s, &m) in step.mu.probs().iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            for (a, &p) in step.policy.row(s).iter().enumerate() {
                let w = weight * discount * m * p;
                if w != 0.0 {
                    let x = encode_features(s, a, &step.mu, n_actions)?;
                    model
                        .core
                        .spec
                        .accumulate_grad(&model.core.params, &x, &[w], 1.0, grad)?;
                }
            }
        }
        discount *= model.gamma;
    }
    Ok(())
}

/// Product of Dirichlet laws over the policy row of every `(t, s)`, with
/// log-concentration parameters.
struct PolicySampler {
    n_states: usize,
    n_actions: usize,
    log_alpha: Vec<f64>,
}

impl PolicySampler {
    fn new(horizon: usize, n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            log_alpha: vec![0.0; horizon * n_states * n_actions],
        }
    }

    fn alphas(&self, t: usize, s: usize) -> Vec<f64> {
        let start = (t * self.n_states + s) * self.n_actions;
        self.log_alpha[start..start + self.n_actions]
            .iter()
            .map(|x| x.exp())
            .collect()
    }

    fn horizon(&self) -> usize {
        self.log_alpha.len() / (self.n_states * self.n_actions)
    }

    /// Draw per-step policies; returns them with their log-density.
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(Vec<Vec<Vec<f64>>>, f64)> {
        let mut tables = Vec::with_capacity(self.horizon());
        let mut log_density = 0.0;
        for t in 0..self.horizon() {
            let mut rows = Vec::with_capacity(self.n_states);
            for s in 0..self.n_states {
                let alphas = self.alphas(t, s);
                let draws = alphas
                    .iter()
                    .map(|&a| {
                        Gamma::new(a, 1.0)
                            .map(|g| g.sample(rng))
                            .map_err(|e| Error::Numeric(format!("Dirichlet sampler: {e}")))
                    })
                    .collect::<Result<Vec<f64>>>()?;
                let total: f64 = draws.iter().sum();
                let mut row: Vec<f64> = draws.iter().map(|g| g / total).collect();
                // Keep rows strictly inside the simplex.
                let floor = 1e-300;
                row.iter_mut().for_each(|p| *p = p.max(floor));
                let total: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= total);
                log_density += dirichlet_log_density(&alphas, &row);
                rows.push(row);
            }
            tables.push(rows);
        }
        Ok((tables, log_density))
    }

    /// `d log q / d log_alpha` at a draw.
    fn score(&self, tables: &[Vec<Vec<f64>>]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.log_alpha.len());
        for (t, rows) in tables.iter().enumerate() {
            for (s, row) in rows.iter().enumerate() {
                let alphas = self.alphas(t, s);
                let sum: f64 = alphas.iter().sum();
                let dg_sum = digamma(sum);
                for (a, &alpha) in alphas.iter().enumerate() {
                    out.push(alpha * (dg_sum - digamma(alpha) + row[a].ln()));
                }
            }
        }
        out
    }
}

fn dirichlet_log_density(alphas: &[f64], row: &[f64]) -> f64 {
    let sum: f64 = alphas.iter().sum();
    ln_gamma(sum) - alphas.iter().map(|&a| ln_gamma(a)).sum::<f64>()
        + alphas
            .iter()
            .zip(row)
            .map(|(a, p)| (a - 1.0) * p.ln())
            .sum::<f64>()
}

fn unroll(
    tables: Vec<Vec<Vec<f64>>>,
    spec: &MfgSpec,
) -> Result<PopulationTrajectory> {
    let mut mu = spec.mu0().clone();
    let horizon = tables.len();
    let mut steps = Vec::with_capacity(horizon);
    for (t, rows) in tables.into_iter().enumerate() {
        let policy = PerStepPolicy::from_rows(rows)?;
        let next = if t + 1 < horizon {
            Some(mkv_step(&mu, &policy, spec.transition())?)
        } else {
            None
        };
        steps.push(PopulationStep {
            mu: mu.clone(),
            policy,
        });
        if let Some(next) = next {
            mu = next;
        }
    }
    Ok(PopulationTrajectory(steps))
}

/// MaxEnt IRL on the population-level decision process whose states are
/// mean fields and whose actions are per-step policies.
///
/// The demonstration term averages the discounted population reward of the
/// per-play population trajectories. The partition is estimated by
/// importance sampling over policy sequences drawn from a product of
/// Dirichlet laws and unrolled through the mean-field dynamics; the sampler
/// is refitted each epoch by entropy-regularized score-function ascent on
/// the current reward. No shaping term is learned.
pub fn mfgmdp_irl_train(
    spec: &MfgSpec,
    demos: &DemoSet,
    cfg: &IrlConfig,
) -> Result<(RewardModel, TrainingLog)> {
    cfg.validate()?;
    check_demos(spec, demos)?;
    let spec = spec.without_reward();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n_states, n_actions) = (spec.n_states(), spec.n_actions());
    let population = estimate_population_demos(demos, n_states, n_actions)?;
    let mut model = RewardModel::new(n_states, n_actions, &cfg.hidden, spec.gamma(), &mut rng)?;
    model.potential.params.iter_mut().for_each(|p| *p = 0.0);
    let mut adam = AdamState::new(model.core.params.len(), cfg.learning_rate);
    let mut sampler = PolicySampler::new(spec.horizon(), n_states, n_actions);
    let mut sampler_adam =
        AdamState::new(sampler.log_alpha.len(), cfg.baseline_sampler_learning_rate);
    let mut log = TrainingLog::default();
    let batch = cfg.minibatch.min(population.len());
    let fit_batch = cfg.baseline_sampler_batch;
    for epoch in 0..cfg.epochs {
        for _ in 0..cfg.baseline_sampler_steps {
            let mut draws = Vec::with_capacity(fit_batch);
            for _ in 0..fit_batch {
                let (tables, log_q) = sampler.sample(&mut rng)?;
                let score = sampler.score(&tables);
                let traj = unroll(tables, &spec)?;
                draws.push((population_return(&traj, &model) - log_q, score));
            }
            let baseline = draws.iter().map(|d| d.0).sum::<f64>() / draws.len() as f64;
            let mut grad = vec![0.0; sampler.log_alpha.len()];
            for (objective, score) in &draws {
                let w = (objective - baseline) / draws.len() as f64;
                for (g, sc) in grad.iter_mut().zip(score) {
                    *g += w * sc;
                }
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric("baseline sampler gradient is not finite".into()));
            }
            ascend(&mut sampler_adam, &mut sampler.log_alpha, &grad)?;
            sampler.log_alpha.iter_mut().for_each(|x| *x = x.clamp(-5.0, 5.0));
        }
        let mut samples = Vec::with_capacity(cfg.samples);
        for _ in 0..cfg.samples {
            let (tables, log_q) = sampler.sample(&mut rng)?;
            samples.push((unroll(tables, &spec)?, log_q));
        }
        let log_w: Vec<f64> = samples
            .iter()
            .map(|(traj, log_q)| population_return(traj, &model) - log_q)
            .collect();
        let log_partition = log_mean_exp(&log_w);
        let top = soft_max_value(&log_w, 1.0);
        let picked: Vec<usize> = index::sample(&mut rng, population.len(), batch).into_vec();
        let mut grad = vec![0.0; model.core.params.len()];
        let mut demo_mean = 0.0;
        for &j in &picked {
            demo_mean += population_return(&population[j], &model) / batch as f64;
            accumulate_population_grad(&population[j], &model, 1.0 / batch as f64, &mut grad)?;
        }
        for ((traj, _), lw) in samples.iter().zip(&log_w) {
            let w = (lw - top).exp();
            // Negligible weights are skipped; their omission is below rounding.
            if w > 1e-12 {
                accumulate_population_grad(traj, &model, -w, &mut grad)?;
            }
        }
        let l_hat = demo_mean - log_partition;
        if !l_hat.is_finite() {
            return Err(Error::Numeric(format!("baseline likelihood estimate is {l_hat}")));
        }
        log.0.push(TrainingRecord {
            epoch,
            l_hat,
            grad_norm_omega: norm(&grad),
            grad_norm_phi: 0.0,
        });
        adam.learning_rate = cfg.learning_rate_at(epoch);
        ascend(&mut adam, &mut model.core.params, &grad)?;
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::envs::{build_env, EnvConfig, EnvName, EnvVariant};
    use crate::mfg::{all_trajectories, trajectory_log_prob, FnTransition, Policy};

    fn tiny_spec(gamma: f64, horizon: usize) -> MfgSpec {
        let transition = FnTransition::new(2, 2, |s: usize, a: usize, mu: &MeanField| {
            let p = 0.2 + 0.5 * mu.get(1) * (a as f64) + 0.1 * s as f64;
            vec![1.0 - p, p]
        });
        MfgSpec::new(
            vec!["x".into(), "y".into()],
            vec!["u".into(), "v".into()],
            Arc::new(transition),
            None,
            MeanField::new(vec![0.6, 0.4]).unwrap(),
            gamma,
            horizon,
        )
        .unwrap()
    }

    fn random_model(seed: u64, hidden: &[usize]) -> RewardModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = RewardModel::new(2, 2, hidden, 0.9, &mut rng).unwrap();
        for p in model.core.params.iter_mut().chain(model.potential.params.iter_mut()) {
            *p = rng.random_range(-1.0..1.0);
        }
        model
    }

    fn flow() -> MeanFieldFlow {
        MeanFieldFlow::new(vec![
            MeanField::new(vec![0.6, 0.4]).unwrap(),
            MeanField::new(vec![0.3, 0.7]).unwrap(),
            MeanField::new(vec![0.5, 0.5]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn expert_flow_counts() {
        let plays = vec![vec![
            Trajectory::new(vec![(0, 0), (0, 0)]),
            Trajectory::new(vec![(0, 1), (1, 0)]),
            Trajectory::new(vec![(0, 0), (1, 1)]),
            Trajectory::new(vec![(0, 0), (1, 0)]),
        ]];
        let demos = DemoSet::new("virus", "original", 0.99, plays).unwrap();
        let flow = estimate_expert_flow(&demos, 2).unwrap();
        assert_eq!(flow[0].probs(), &[1.0, 0.0]);
        assert_eq!(flow[1].probs(), &[0.25, 0.75]);
    }

    #[test]
    fn zero_model_has_zero_return() {
        let model = RewardModel::zeros(2, 2, &[], 0.9).unwrap();
        let tau = Trajectory::new(vec![(0, 1), (1, 0), (1, 1)]);
        assert_eq!(demo_reward_sum(&tau, &model, &flow()).unwrap(), 0.0);
    }

    #[test]
    fn constant_reward_geometric_sum() {
        let mut model = RewardModel::zeros(2, 2, &[], 0.99).unwrap();
        let bias = model.core.params.len() - 1;
        model.core.params[bias] = 1.0;
        let tau = Trajectory::new(vec![(0, 1), (1, 0), (1, 1)]);
        let value = demo_reward_sum(&tau, &model, &flow()).unwrap();
        assert!((value - (1.0 + 0.99 + 0.9801)).abs() < 1e-12);
    }

    #[test]
    fn reward_sum_matches_independent_fold() {
        let model = random_model(3, &[4]);
        let flow = flow();
        let tau = Trajectory::new(vec![(1, 1), (0, 0), (1, 0)]);
        let mut expect = 0.0;
        for t in 0..3 {
            let (s, a) = tau.steps()[t];
            let next = (t + 1 < 3).then(|| (tau.state(t + 1), &flow[t + 1]));
            expect += 0.9f64.powi(t as i32) * model.shaped_reward(s, a, &flow[t], next).unwrap();
        }
        let got = demo_reward_sum(&tau, &model, &flow).unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn shaping_telescopes_to_initial_potential() {
        let model = random_model(5, &[]);
        let flat = model.without_potential();
        let flow = flow();
        for tau in all_trajectories(2, 2, 3) {
            let diff = demo_reward_sum(&tau, &model, &flow).unwrap()
                - demo_reward_sum(&tau, &flat, &flow).unwrap();
            let g0 = model.potential_value(tau.state(0), &flow[0]).unwrap();
            assert!((diff + g0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_certain_sample_partition() {
        let model = random_model(1, &[]);
        let tau = Trajectory::new(vec![(1, 0), (0, 1), (0, 0)]);
        let sample = SampledTrajectory {
            trajectory: tau.clone(),
            log_q: 0.0,
        };
        let log_z = estimate_partition(&[sample], &model, &flow()).unwrap();
        assert!((log_z - demo_reward_sum(&tau, &model, &flow()).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn uniform_samplers_with_zero_reward() {
        let model = RewardModel::zeros(2, 2, &[], 0.9).unwrap();
        let samples: Vec<SampledTrajectory> = all_trajectories(2, 2, 3)
            .into_iter()
            .map(|trajectory| SampledTrajectory {
                trajectory,
                log_q: 3.0 * 0.5f64.ln(),
            })
            .collect();
        for sample in &samples {
            let log_z = estimate_partition(std::slice::from_ref(sample), &model, &flow()).unwrap();
            assert!((log_z - 3.0 * 2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_probability_sample_is_rejected() {
        let model = RewardModel::zeros(2, 2, &[], 0.9).unwrap();
        let sample = SampledTrajectory {
            trajectory: Trajectory::new(vec![(0, 0), (0, 0), (0, 0)]),
            log_q: f64::NEG_INFINITY,
        };
        assert!(matches!(
            estimate_partition(&[sample], &model, &flow()),
            Err(Error::InvalidArgument(_))
        ));
        assert!(estimate_partition(&[], &model, &flow()).is_err());
    }

    #[test]
    fn matched_batches_give_zero_gradient() {
        let model = random_model(2, &[3]);
        let taus = all_trajectories(2, 2, 3);
        let demos: Vec<&Trajectory> = taus.iter().collect();
        // A sampler proportional to exp(R) makes every weight equal.
        let flow = flow();
        let samples: Vec<SampledTrajectory> = taus
            .iter()
            .map(|tau| SampledTrajectory {
                trajectory: tau.clone(),
                log_q: demo_reward_sum(tau, &model, &flow).unwrap(),
            })
            .collect();
        let obj = mfirl_objective_and_grads(&demos, &model, &flow, &samples).unwrap();
        assert!(norm(&obj.grad_omega) < 1e-12);
        assert!(norm(&obj.grad_phi) < 1e-12);
    }

    #[test]
    fn linear_gradient_is_feature_difference() {
        let model = random_model(4, &[]);
        let flow = flow();
        let taus = all_trajectories(2, 2, 3);
        let demos: Vec<&Trajectory> = taus[..5].iter().collect();
        let samples: Vec<SampledTrajectory> = taus[3..9]
            .iter()
            .map(|tau| SampledTrajectory {
                trajectory: tau.clone(),
                log_q: 0.0,
            })
            .collect();
        let obj = mfirl_objective_and_grads(&demos, &model, &flow, &samples).unwrap();
        let features = |tau: &Trajectory| -> Vec<f64> {
            let mut f = vec![0.0; 7];
            for t in 0..3 {
                let (s, a) = tau.steps()[t];
                let x = encode_features(s, a, &flow[t], 2).unwrap();
                for (i, v) in x.iter().enumerate() {
                    f[i] += 0.9f64.powi(t as i32) * v;
                }
                f[6] += 0.9f64.powi(t as i32);
            }
            f
        };
        let returns: Vec<f64> = samples
            .iter()
            .map(|s| demo_reward_sum(&s.trajectory, &model, &flow).unwrap())
            .collect();
        let top = returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = returns.iter().map(|r| (r - top).exp()).collect();
        let total: f64 = weights.iter().sum();
        for i in 0..7 {
            let demo: f64 = demos.iter().map(|t| features(t)[i]).sum::<f64>() / demos.len() as f64;
            let model_side: f64 = samples
                .iter()
                .zip(&weights)
                .map(|(s, w)| w / total * features(&s.trajectory)[i])
                .sum();
            assert!((obj.grad_omega[i] - (demo - model_side)).abs() < 1e-10);
        }
    }

    #[test]
    fn exact_partition_matches_enumeration() {
        let spec = tiny_spec(0.9, 3);
        let model = random_model(8, &[2]);
        let flow = flow();
        let uniform = Policy::uniform(2, 2, 3);
        let mut terms = Vec::new();
        for tau in all_trajectories(2, 2, 3) {
            let lp = trajectory_log_prob(&tau, &uniform, &flow, &spec).unwrap() + 3.0 * 2f64.ln();
            if lp > f64::NEG_INFINITY {
                terms.push(lp + demo_reward_sum(&tau, &model, &flow).unwrap());
            }
        }
        let expect = soft_max_value(&terms, 1.0);
        let got = exact_log_partition(&model, &flow, &spec).unwrap();
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
    }

    #[test]
    fn population_reward_examples() {
        let spec = build_env(&EnvConfig::new(EnvName::LeftRight, EnvVariant::Original)).unwrap();
        let mu = MeanField::new(vec![0.0, 0.5, 0.5]).unwrap();
        let pi = PerStepPolicy::from_rows(vec![vec![0.3, 0.7], vec![1.0, 0.0], vec![0.2, 0.8]]).unwrap();
        let value = population_reward(&mu, &pi, spec.reward().unwrap());
        assert!((value + 0.5).abs() < 1e-12);
        let zero = RewardModel::zeros(3, 2, &[], 0.99).unwrap();
        assert_eq!(population_reward(&mu, &pi, &zero), 0.0);
        let point = MeanField::point_mass(3, 1);
        let det = PerStepPolicy::from_rows(vec![vec![1.0, 0.0]; 3]).unwrap();
        let direct = spec.reward().unwrap().reward(1, 0, &point);
        assert_eq!(population_reward(&point, &det, spec.reward().unwrap()), direct);
    }

    #[test]
    fn population_demos_rows() {
        let plays = vec![
            vec![
                Trajectory::new(vec![(0, 1), (0, 0)]),
                Trajectory::new(vec![(0, 1), (0, 1)]),
            ],
            vec![
                Trajectory::new(vec![(1, 0), (0, 0)]),
                Trajectory::new(vec![(1, 1), (0, 0)]),
            ],
        ];
        let demos = DemoSet::new("virus", "original", 0.99, plays).unwrap();
        let pop = estimate_population_demos(&demos, 2, 2).unwrap();
        assert_eq!(pop.len(), 2);
        assert_eq!(pop[0].steps()[0].policy.row(0), &[0.0, 1.0]);
        assert_eq!(pop[0].steps()[0].policy.row(1), &[0.5, 0.5]);
        assert_eq!(pop[1].steps()[0].policy.row(1), &[0.5, 0.5]);
        assert_eq!(pop[0].steps()[1].mu.probs(), &[1.0, 0.0]);
    }

    #[test]
    fn dirichlet_score_matches_finite_difference() {
        let mut sampler = PolicySampler::new(1, 1, 3);
        sampler.log_alpha = vec![0.3, -0.2, 0.5];
        let row = vec![0.2, 0.5, 0.3];
        let score = sampler.score(&[vec![row.clone()]]);
        for i in 0..3 {
            let h = 1e-6;
            let mut up = sampler.log_alpha.clone();
            up[i] += h;
            let mut down = sampler.log_alpha.clone();
            down[i] -= h;
            let f = |la: &[f64]| {
                let alphas: Vec<f64> = la.iter().map(|x| x.exp()).collect();
                dirichlet_log_density(&alphas, &row)
            };
            let fd = (f(&up) - f(&down)) / (2.0 * h);
            assert!((fd - score[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn model_json_round_trip() {
        let model = random_model(9, &[4, 3]);
        let back = RewardModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(model, back);
        assert_eq!(back.n_states(), 2);
        assert_eq!(back.n_actions(), 2);
        assert!(RewardModel::from_json("{\"gamma\":0.5}").is_err());
    }

    #[test]
    fn training_is_deterministic_and_logged() {
        let spec = tiny_spec(0.9, 3);
        let expert = spec.with_reward(Arc::new(crate::mfg::FnReward(
            |s: usize, a: usize, _: &MeanField| s as f64 - 0.5 * a as f64,
        )));
        let eq = crate::solver::solve_ermfne(
            expert.reward().unwrap(),
            &expert,
            &crate::solver::SolverConfig::default(),
        )
        .unwrap();
        let (plays, _) = crate::mfg::sample_game_play(&expert, &eq.policy, 20, 7).unwrap();
        let demos = DemoSet::new("tiny", "original", 0.9, vec![plays]).unwrap();
        let cfg = IrlConfig::tabular().with_epochs(5).with_seed(11);
        let (a, log_a) = mfirl_train(&spec, &demos, &cfg).unwrap();
        let (b, log_b) = mfirl_train(&spec, &demos, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(log_a, log_b);
        assert_eq!(log_a.records().len(), 5);
        let csv = log_a.to_csv_string().unwrap();
        assert!(csv.starts_with("epoch,L_hat,grad_norm_omega,grad_norm_phi\n"));
        let (c, _) = mfgmdp_irl_train(&spec, &demos, &cfg).unwrap();
        assert!(c.potential.params.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn horizon_mismatch_is_config_error() {
        let spec = tiny_spec(0.9, 4);
        let plays = vec![vec![Trajectory::new(vec![(0, 0), (1, 1), (0, 0)])]];
        let demos = DemoSet::new("tiny", "original", 0.9, plays).unwrap();
        assert!(matches!(
            mfirl_train(&spec, &demos, &IrlConfig::tabular()),
            Err(Error::Config(_))
        ));
    }
}
