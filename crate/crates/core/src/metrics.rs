//! Divergences between expert and learned equilibria, and scoring of a
//! learned reward against the ground truth.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::irl::RewardModel;
use crate::mfg::{expected_return, MeanFieldFlow, MfgSpec, Policy};
use crate::solver::{solve_ermfne, Equilibrium, SolverConfig};

/// Additive smoothing of the smoothed divergences.
pub const SMOOTHING: f64 = 1e-8;

/// `KL(p || q)` with natural log, `0 log(0 / x) = 0`, and `+inf` where `q`
/// has no mass under positive `p`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if pi <= 0.0 {
                0.0
            } else if qi <= 0.0 {
                f64::INFINITY
            } else {
                pi * (pi / qi).ln()
            }
        })
        .sum()
}

fn smooth(p: &[f64]) -> Vec<f64> {
    let total: f64 = p.iter().map(|x| x + SMOOTHING).sum();
    p.iter().map(|x| (x + SMOOTHING) / total).collect()
}

/// `KL` after adding `1e-8` to every entry of both arguments and
/// renormalizing.
pub fn smoothed_kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    kl_divergence(&smooth(p), &smooth(q))
}

fn check_flows(expert: &MeanFieldFlow, learned: &MeanFieldFlow) -> Result<()> {
    if expert.horizon() != learned.horizon() || expert.n_states() != learned.n_states() {
        return invalid("flows differ in horizon or state count");
    }
    Ok(())
}

fn check_policies(expert: &Policy, learned: &Policy, flow: &MeanFieldFlow) -> Result<()> {
    if expert.horizon() != learned.horizon()
        || expert.n_states() != learned.n_states()
        || expert.n_actions() != learned.n_actions()
        || flow.horizon() != expert.horizon()
        || flow.n_states() != expert.n_states()
    {
        return invalid("policies and flow differ in shape");
    }
    Ok(())
}

fn dev_mf_with(expert: &MeanFieldFlow, learned: &MeanFieldFlow, kl: fn(&[f64], &[f64]) -> f64) -> Result<f64> {
    check_flows(expert, learned)?;
    Ok(expert
        .iter()
        .zip(learned.iter())
        .skip(1)
        .map(|(e, l)| kl(e.probs(), l.probs()))
        .sum())
}

fn dev_policy_with(
    expert: &Policy,
    learned: &Policy,
    expert_flow: &MeanFieldFlow,
    kl: fn(&[f64], &[f64]) -> f64,
) -> Result<f64> {
    check_policies(expert, learned, expert_flow)?;
    let mut total = 0.0;
    for (t, mu) in expert_flow.iter().enumerate() {
        for (s, &weight) in mu.probs().iter().enumerate() {
            if weight > 0.0 {
                total += weight * kl(expert[t].row(s), learned[t].row(s));
            }
        }
    }
    Ok(total)
}

/// `sum_{t>=1} KL(mu^E_t || mu_t)`.
pub fn dev_mf(expert: &MeanFieldFlow, learned: &MeanFieldFlow) -> Result<f64> {
    dev_mf_with(expert, learned, kl_divergence)
}

/// [`dev_mf`] with smoothed divergences.
pub fn dev_mf_smoothed(expert: &MeanFieldFlow, learned: &MeanFieldFlow) -> Result<f64> {
    dev_mf_with(expert, learned, smoothed_kl_divergence)
}

/// `sum_t sum_s mu^E_t(s) KL(pi^E_t(.|s) || pi_t(.|s))`.
pub fn dev_policy(expert: &Policy, learned: &Policy, expert_flow: &MeanFieldFlow) -> Result<f64> {
    dev_policy_with(expert, learned, expert_flow, kl_divergence)
}

/// [`dev_policy`] with smoothed divergences.
pub fn dev_policy_smoothed(
    expert: &Policy,
    learned: &Policy,
    expert_flow: &MeanFieldFlow,
) -> Result<f64> {
    dev_policy_with(expert, learned, expert_flow, smoothed_kl_divergence)
}

/// Scores of one learned reward on one game.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Ground-truth expected return of the equilibrium the learned reward
    /// induces, without entropy bonus.
    pub expected_return: f64,
    pub dev_mf: f64,
    pub dev_policy: f64,
    pub dev_mf_smoothed: f64,
    pub dev_policy_smoothed: f64,
    /// Whether both the expert and the learned equilibrium converged.
    pub converged: bool,
}

/// Ground-truth equilibrium of a game with a reward.
pub fn expert_equilibrium(spec: &MfgSpec, cfg: &SolverConfig) -> Result<Equilibrium> {
    let reward = spec
        .reward()
        .ok_or_else(|| Error::Config("the game has no ground-truth reward".into()))?;
    solve_ermfne(reward, spec, cfg)
}

/// Score a learned equilibrium against the expert one.
pub fn compare_equilibria(
    spec: &MfgSpec,
    expert: &Equilibrium,
    learned: &Equilibrium,
) -> Result<Evaluation> {
    Ok(Evaluation {
        expected_return: expected_return(&learned.flow, &learned.policy, spec)?,
        dev_mf: dev_mf(&expert.flow, &learned.flow)?,
        dev_policy: dev_policy(&expert.policy, &learned.policy, &expert.flow)?,
        dev_mf_smoothed: dev_mf_smoothed(&expert.flow, &learned.flow)?,
        dev_policy_smoothed: dev_policy_smoothed(&expert.policy, &learned.policy, &expert.flow)?,
        converged: expert.converged && learned.converged,
    })
}

/// Solve the equilibrium of the learned shaped reward and score it under
/// the ground-truth reward of `spec`.
pub fn evaluate_reward(model: &RewardModel, spec: &MfgSpec, cfg: &SolverConfig) -> Result<Evaluation> {
    model.check_spec(spec)?;
    let expert = expert_equilibrium(spec, cfg)?;
    let learned = solve_ermfne(&model.shaped(), spec, cfg)?;
    compare_equilibria(spec, &expert, &learned)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mfg::{MeanField, PerStepPolicy};

    fn flow(rows: &[[f64; 2]]) -> MeanFieldFlow {
        MeanFieldFlow::new(rows.iter().map(|r| MeanField::new(r.to_vec()).unwrap()).collect()).unwrap()
    }

    #[test]
    fn closed_form_kl() {
        let e = flow(&[[1.0, 0.0], [0.5, 0.5]]);
        let l = flow(&[[0.0, 1.0], [0.25, 0.75]]);
        let expect = 0.5 * (4.0f64 / 3.0).ln();
        assert!((dev_mf(&e, &l).unwrap() - expect).abs() < 1e-15);
        assert!((expect - 0.14384).abs() < 1e-5);
        assert_eq!(dev_mf(&e, &e).unwrap(), 0.0);
    }

    #[test]
    fn unsupported_mass_is_infinite_unless_smoothed() {
        let e = flow(&[[0.5, 0.5], [0.5, 0.5]]);
        let l = flow(&[[0.5, 0.5], [1.0, 0.0]]);
        assert_eq!(dev_mf(&e, &l).unwrap(), f64::INFINITY);
        let smoothed = dev_mf_smoothed(&e, &l).unwrap();
        assert!(smoothed.is_finite() && smoothed > 5.0);
    }

    #[test]
    fn horizon_mismatch() {
        let e = flow(&[[0.5, 0.5], [0.5, 0.5]]);
        let l = flow(&[[0.5, 0.5]]);
        assert!(dev_mf(&e, &l).is_err());
    }

    #[test]
    fn policy_divergence_weighting() {
        let expert_flow = flow(&[[1.0, 0.0]]);
        let expert = Policy::new(vec![PerStepPolicy::from_rows(vec![vec![0.5, 0.5], vec![1.0, 0.0]]).unwrap()]).unwrap();
        let learned = Policy::new(vec![PerStepPolicy::from_rows(vec![vec![0.25, 0.75], vec![0.0, 1.0]]).unwrap()]).unwrap();
        // state 1 has weight zero
        let got = dev_policy(&expert, &learned, &expert_flow).unwrap();
        let expect = 0.5 * (2.0f64).ln() + 0.5 * (0.5f64 / 0.75).ln();
        assert!((got - expect).abs() < 1e-15);
        assert_eq!(dev_policy(&expert, &expert, &expert_flow).unwrap(), 0.0);
        let two = flow(&[[0.4, 0.6]]);
        let got = dev_policy(&expert, &expert.clone(), &two).unwrap();
        assert_eq!(got, 0.0);
        assert_eq!(dev_policy(&expert, &learned, &two).unwrap(), f64::INFINITY);
    }
}
