//! The five benchmark games (investment, malware spread, virus infection,
//! rock-paper-scissors, left-right), each with an original and a "new"
//! dynamics variant, plus the one-hot feature encoding used by learned
//! rewards.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::mfg::{MeanField, MfgSpec, RewardFn, TransitionModel};

/// Which benchmark game.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvName {
    Invest,
    Malware,
    Virus,
    Rps,
    #[serde(rename = "lr")]
    LeftRight,
}

impl EnvName {
    pub const ALL: [EnvName; 5] = [
        EnvName::Invest,
        EnvName::Malware,
        EnvName::Virus,
        EnvName::Rps,
        EnvName::LeftRight,
    ];

    pub fn key(self) -> &'static str {
        match self {
            EnvName::Invest => "invest",
            EnvName::Malware => "malware",
            EnvName::Virus => "virus",
            EnvName::Rps => "rps",
            EnvName::LeftRight => "lr",
        }
    }
}

impl fmt::Display for EnvName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for EnvName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnvName::ALL
            .into_iter()
            .find(|e| e.key() == s)
            .ok_or_else(|| Error::Config(format!("unknown environment {s:?}")))
    }
}

/// Original dynamics, or the perturbed dynamics used to test transfer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvVariant {
    Original,
    New,
}

impl EnvVariant {
    pub fn key(self) -> &'static str {
        match self {
            EnvVariant::Original => "original",
            EnvVariant::New => "new",
        }
    }
}

impl fmt::Display for EnvVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for EnvVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(EnvVariant::Original),
            "new" => Ok(EnvVariant::New),
            _ => Err(Error::Config(format!("unknown variant {s:?}"))),
        }
    }
}

/// Numeric parameters of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum TaskParams {
    Invest {
        quality_weight: f64,
        mean_quality_cost: f64,
        invest_cost: f64,
        threshold: f64,
    },
    Malware {
        risk: f64,
        intervene_cost: f64,
        /// Bounds of the uniform law of the deterioration fraction.
        chi_low: f64,
        chi_high: f64,
    },
    Virus {
        /// Per-contact infection coefficient; the infection rate is its
        /// square times the infected share.
        infection: f64,
        recovery: f64,
        distancing_cost: f64,
    },
    Rps {
        /// `[rock beats scissors, rock loses to paper, paper beats rock,
        /// paper loses to scissors, scissors beats paper, scissors loses to
        /// rock]`.
        payoffs: [f64; 6],
        /// Probability of landing on a uniformly random state instead.
        noise: f64,
    },
    #[serde(rename = "lr")]
    LeftRight {
        /// Probability of landing uniformly on left or right instead of the
        /// chosen side.
        slip: f64,
    },
}

impl TaskParams {
    pub fn defaults(name: EnvName, variant: EnvVariant) -> Self {
        let new = variant == EnvVariant::New;
        match name {
            EnvName::Invest => TaskParams::Invest {
                quality_weight: 0.3,
                mean_quality_cost: 0.2,
                invest_cost: 0.2,
                threshold: if new { 5.0 } else { 4.0 },
            },
            EnvName::Malware => TaskParams::Malware {
                risk: 0.2,
                intervene_cost: 0.5,
                chi_low: if new { 0.5 } else { 0.0 },
                chi_high: 1.0,
            },
            EnvName::Virus => TaskParams::Virus {
                infection: if new { 0.8 } else { 0.9 },
                recovery: 0.3,
                distancing_cost: 0.5,
            },
            EnvName::Rps => TaskParams::Rps {
                payoffs: [2.0, 1.0, 4.0, 2.0, 6.0, 3.0],
                noise: if new { 0.2 } else { 0.0 },
            },
            EnvName::LeftRight => TaskParams::LeftRight {
                slip: if new { 0.2 } else { 0.0 },
            },
        }
    }

    fn name(&self) -> EnvName {
        match self {
            TaskParams::Invest { .. } => EnvName::Invest,
            TaskParams::Malware { .. } => EnvName::Malware,
            TaskParams::Virus { .. } => EnvName::Virus,
            TaskParams::Rps { .. } => EnvName::Rps,
            TaskParams::LeftRight { .. } => EnvName::LeftRight,
        }
    }

    fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        let ok = match *self {
            TaskParams::Invest { threshold, .. } => (0.0..=9.0).contains(&threshold),
            TaskParams::Malware {
                chi_low, chi_high, ..
            } => unit(chi_low) && unit(chi_high) && chi_low < chi_high,
            TaskParams::Virus {
                infection,
                recovery,
                ..
            } => unit(infection) && unit(recovery),
            TaskParams::Rps { noise, payoffs } => {
                unit(noise) && payoffs.iter().all(|p| p.is_finite())
            }
            TaskParams::LeftRight { slip } => unit(slip),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("task parameters out of range: {self:?}")))
        }
    }
}

/// Full environment configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub name: EnvName,
    pub variant: EnvVariant,
    pub horizon: usize,
    pub gamma: f64,
    pub params: TaskParams,
}

pub const DEFAULT_HORIZON: usize = 50;
pub const DEFAULT_GAMMA: f64 = 0.99;

impl EnvConfig {
    pub fn new(name: EnvName, variant: EnvVariant) -> Self {
        Self {
            name,
            variant,
            horizon: DEFAULT_HORIZON,
            gamma: DEFAULT_GAMMA,
            params: TaskParams::defaults(name, variant),
        }
    }

    /// Parse the catalog keys, e.g. `("virus", "new")`.
    pub fn from_keys(name: &str, variant: &str) -> Result<Self> {
        Ok(Self::new(name.parse()?, variant.parse()?))
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }
}

/// Distribution of `floor(chi * (10 - s) / divisor)` for `chi ~ U(low, high)`,
/// placed on next states `s + k`. Computed from the measure of each preimage
/// interval.
pub fn increment_distribution(state: usize, divisor: f64, low: f64, high: f64) -> Vec<f64> {
    assert!(state < 10 && divisor > 0.0 && low < high);
    let room = (10 - state) as f64;
    let mut out = vec![0.0; 10];
    let mut k = 0usize;
    loop {
        // chi * room / divisor lies in [k, k+1)
        let a = (k as f64 * divisor / room).max(low);
        let b = ((k + 1) as f64 * divisor / room).min(high);
        if k as f64 * divisor / room >= high {
            break;
        }
        if b > a {
            // Only chi = 1 exactly can overshoot the top state, a null set.
            out[(state + k).min(9)] += (b - a) / (high - low);
        }
        k += 1;
    }
    out
}

/// `<mu> = sum_s s * mu(s)` for games whose states are the integers `0..|S|`.
pub fn mean_state(mu: &MeanField, spec: &MfgSpec) -> Result<f64> {
    let numeric = spec
        .states()
        .iter()
        .enumerate()
        .all(|(i, label)| label.parse::<usize>() == Ok(i));
    if !numeric || mu.len() != spec.n_states() {
        return invalid("mean_state needs a game with integer states 0..|S|");
    }
    Ok(weighted_mean(mu))
}

fn weighted_mean(mu: &MeanField) -> f64 {
    mu.probs().iter().enumerate().map(|(s, p)| s as f64 * p).sum()
}

/// `one_hot(s) ++ one_hot(a) ++ mu`.
pub fn encode_features(
    state: usize,
    action: usize,
    mu: &MeanField,
    n_actions: usize,
) -> Result<Vec<f64>> {
    let n_states = mu.len();
    if state >= n_states || action >= n_actions {
        return invalid(format!(
            "feature index out of range: s={state}, a={action} for |S|={n_states}, |A|={n_actions}"
        ));
    }
    let mut x = vec![0.0; 2 * n_states + n_actions];
    x[state] = 1.0;
    x[n_states + action] = 1.0;
    x[n_states + n_actions..].copy_from_slice(mu.probs());
    Ok(x)
}

/// `one_hot(s) ++ mu`, the input of potential functions.
pub fn encode_state_features(state: usize, mu: &MeanField) -> Result<Vec<f64>> {
    let n_states = mu.len();
    if state >= n_states {
        return invalid(format!("state {state} out of range for |S|={n_states}"));
    }
    let mut x = vec![0.0; 2 * n_states];
    x[state] = 1.0;
    x[n_states..].copy_from_slice(mu.probs());
    Ok(x)
}

pub fn feature_width(n_states: usize, n_actions: usize) -> usize {
    2 * n_states + n_actions
}

struct Invest {
    params: TaskParams,
}

impl TransitionModel for Invest {
    fn n_states(&self) -> usize {
        10
    }

    fn n_actions(&self) -> usize {
        2
    }

    fn next_state_dist(&self, state: usize, action: usize, mu: &MeanField) -> Vec<f64> {
        let TaskParams::Invest { threshold, .. } = self.params else {
            unreachable!()
        };
        if action == 0 {
            let mut row = vec![0.0; 10];
            row[state] = 1.0;
            return row;
        }
        let divisor = if weighted_mean(mu) < threshold { 1.0 } else { 2.0 };
        increment_distribution(state, divisor, 0.0, 1.0)
    }
}

impl RewardFn for Invest {
    fn reward(&self, state: usize, action: usize, mu: &MeanField) -> f64 {
        let TaskParams::Invest {
            quality_weight,
            mean_quality_cost,
            invest_cost,
            ..
        } = self.params
        else {
            unreachable!()
        };
        quality_weight * state as f64 / 10.0
            - mean_quality_cost * weighted_mean(mu)
            - invest_cost * action as f64
    }
}

struct Malware {
    params: TaskParams,
}

impl TransitionModel for Malware {
    fn n_states(&self) -> usize {
        10
    }

    fn n_actions(&self) -> usize {
        2
    }

    fn next_state_dist(&self, state: usize, action: usize, _mu: &MeanField) -> Vec<f64> {
        let TaskParams::Malware {
            chi_low, chi_high, ..
        } = self.params
        else {
            unreachable!()
        };
        if action == 1 {
            let mut row = vec![0.0; 10];
            row[0] = 1.0;
            return row;
        }
        increment_distribution(state, 1.0, chi_low, chi_high)
    }
}

impl RewardFn for Malware {
    fn reward(&self, state: usize, action: usize, mu: &MeanField) -> f64 {
        let TaskParams::Malware {
            risk,
            intervene_cost,
            ..
        } = self.params
        else {
            unreachable!()
        };
        -(risk + weighted_mean(mu)) * state as f64 / 10.0 - intervene_cost * action as f64
    }
}

const INFECTED: usize = 1;
const DISTANCING: usize = 1;

struct Virus {
    params: TaskParams,
}

impl TransitionModel for Virus {
    fn n_states(&self) -> usize {
        2
    }

    fn n_actions(&self) -> usize {
        2
    }

    fn next_state_dist(&self, state: usize, action: usize, mu: &MeanField) -> Vec<f64> {
        let TaskParams::Virus {
            infection,
            recovery,
            ..
        } = self.params
        else {
            unreachable!()
        };
        if state == INFECTED {
            return vec![recovery, 1.0 - recovery];
        }
        if action == DISTANCING {
            return vec![1.0, 0.0];
        }
        let p = infection * infection * mu.get(INFECTED);
        vec![1.0 - p, p]
    }
}

impl RewardFn for Virus {
    fn reward(&self, state: usize, action: usize, _mu: &MeanField) -> f64 {
        let TaskParams::Virus {
            distancing_cost, ..
        } = self.params
        else {
            unreachable!()
        };
        let infected = if state == INFECTED { 1.0 } else { 0.0 };
        let distancing = if action == DISTANCING { 1.0 } else { 0.0 };
        -infected - distancing_cost * distancing
    }
}

struct Rps {
    params: TaskParams,
}

impl TransitionModel for Rps {
    fn n_states(&self) -> usize {
        3
    }

    fn n_actions(&self) -> usize {
        3
    }

    fn next_state_dist(&self, _state: usize, action: usize, _mu: &MeanField) -> Vec<f64> {
        let TaskParams::Rps { noise, .. } = self.params else {
            unreachable!()
        };
        let mut row = vec![noise / 3.0; 3];
        row[action] += 1.0 - noise;
        row
    }
}

impl RewardFn for Rps {
    fn reward(&self, state: usize, _action: usize, mu: &MeanField) -> f64 {
        let TaskParams::Rps { payoffs: c, .. } = self.params else {
            unreachable!()
        };
        let (rock, paper, scissors) = (mu.get(0), mu.get(1), mu.get(2));
        match state {
            0 => c[0] * scissors - c[1] * paper,
            1 => c[2] * rock - c[3] * scissors,
            _ => c[4] * paper - c[5] * rock,
        }
    }
}

/// States `C, L, R`; actions `L, R`.
struct LeftRight {
    slip: f64,
}

impl TransitionModel for LeftRight {
    fn n_states(&self) -> usize {
        3
    }

    fn n_actions(&self) -> usize {
        2
    }

    fn next_state_dist(&self, _state: usize, action: usize, _mu: &MeanField) -> Vec<f64> {
        let mut row = vec![0.0, self.slip / 2.0, self.slip / 2.0];
        row[action + 1] += 1.0 - self.slip;
        row
    }
}

impl RewardFn for LeftRight {
    fn reward(&self, state: usize, _action: usize, mu: &MeanField) -> f64 {
        match state {
            1 => -mu.get(1),
            2 => -mu.get(2),
            _ => 0.0,
        }
    }
}

fn labels(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn numeric_labels(n: usize) -> Vec<String> {
    (0..n).map(|s| s.to_string()).collect()
}

/// Build the game described by `config`, ground-truth reward included.
pub fn build_env(config: &EnvConfig) -> Result<MfgSpec> {
    config.params.validate()?;
    if config.params.name() != config.name {
        return Err(Error::Config(format!(
            "parameters for {} given to {}",
            config.params.name(),
            config.name
        )));
    }
    if config.horizon == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    if !(config.gamma > 0.0 && config.gamma <= 1.0) {
        return Err(Error::Config(format!("gamma {} outside (0, 1]", config.gamma)));
    }
    let params = config.params.clone();
    let (states, actions, transition, reward, mu0): (
        Vec<String>,
        Vec<String>,
        Arc<dyn TransitionModel>,
        Arc<dyn RewardFn>,
        MeanField,
    ) = match config.name {
        EnvName::Invest => {
            let env = Arc::new(Invest { params });
            (numeric_labels(10), numeric_labels(2), env.clone(), env, MeanField::uniform(10))
        }
        EnvName::Malware => {
            let env = Arc::new(Malware { params });
            (numeric_labels(10), numeric_labels(2), env.clone(), env, MeanField::uniform(10))
        }
        EnvName::Virus => {
            let env = Arc::new(Virus { params });
            (labels(&["S", "I"]), labels(&["U", "D"]), env.clone(), env, MeanField::uniform(2))
        }
        EnvName::Rps => {
            let env = Arc::new(Rps { params });
            (
                labels(&["R", "P", "S"]),
                labels(&["R", "P", "S"]),
                env.clone(),
                env,
                MeanField::uniform(3),
            )
        }
        EnvName::LeftRight => {
            let TaskParams::LeftRight { slip } = params else {
                unreachable!()
            };
            let env = Arc::new(LeftRight { slip });
            (
                labels(&["C", "L", "R"]),
                labels(&["L", "R"]),
                env.clone(),
                env,
                MeanField::new(vec![0.0, 0.5, 0.5])?,
            )
        }
    };
    MfgSpec::new(
        states,
        actions,
        transition,
        Some(reward),
        mu0,
        config.gamma,
        config.horizon,
    )
}

/// Left-right with every agent starting in the centre and no discounting:
/// the two-step counterexample game for reward shaping.
pub fn left_right_center_start(horizon: usize) -> Result<MfgSpec> {
    let config = EnvConfig::new(EnvName::LeftRight, EnvVariant::Original)
        .with_horizon(horizon)
        .with_gamma(1.0);
    build_env(&config)?.with_mu0(MeanField::point_mass(3, 0))
}
