//! Property tests over random games.

use std::sync::Arc;

use mfirl::envs::{build_env, EnvConfig, EnvName, EnvVariant};
use mfirl::irl::estimate_expert_flow;
use mfirl::metrics::{kl_divergence, smoothed_kl_divergence};
use mfirl::mfg::{
    agent_marginals, all_trajectories, induce_flow, mkv_step, sample_game_play, trajectory_log_prob,
    DemoSet, FnReward, FnTransition, MeanField, MfgSpec, PerStepPolicy, Policy,
};
use mfirl::solver::{soft_backward_induction, solve_ermfne, SolverConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

fn random_spec(seed: u64, n_states: usize, n_actions: usize, horizon: usize) -> MfgSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<f64> = (0..n_states * n_actions * n_states)
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    let transition = FnTransition::new(n_states, n_actions, move |s: usize, a: usize, mu: &MeanField| {
        let start = (s * n_actions + a) * n_states;
        let w: Vec<f64> = (0..n_states)
            .map(|k| base[start + k] * (0.5 + mu.get(k)) + 1e-3)
            .collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    });
    let weights: Vec<f64> = (0..n_states * n_actions).map(|_| rng.random_range(-1.0..1.0)).collect();
    let reward = FnReward(move |s: usize, a: usize, mu: &MeanField| {
        weights[s * n_actions + a] - mu.get(s)
    });
    MfgSpec::new(
        (0..n_states).map(|s| s.to_string()).collect(),
        (0..n_actions).map(|a| a.to_string()).collect(),
        Arc::new(transition),
        Some(Arc::new(reward)),
        MeanField::new(simplex(&mut rng, n_states)).unwrap(),
        0.9,
        horizon,
    )
    .unwrap()
}

fn random_policy(seed: u64, n_states: usize, n_actions: usize, horizon: usize) -> Policy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    Policy::new(
        (0..horizon)
            .map(|_| {
                PerStepPolicy::from_rows((0..n_states).map(|_| simplex(&mut rng, n_actions)).collect())
                    .unwrap()
            })
            .collect(),
    )
    .unwrap()
}

fn dims() -> impl Strategy<Value = (u64, usize, usize, usize)> {
    (any::<u64>(), 1usize..5, 1usize..4, 1usize..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mkv_step_stays_on_the_simplex((seed, s, a, t) in dims()) {
        let spec = random_spec(seed, s, a, t);
        let pi = random_policy(seed, s, a, t);
        let next = mkv_step(spec.mu0(), &pi[0], spec.transition()).unwrap();
        prop_assert!((next.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(next.probs().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn consistent_agent_marginals_equal_the_flow((seed, s, a, t) in dims()) {
        let spec = random_spec(seed, s, a, t);
        let pi = random_policy(seed, s, a, t);
        let flow = induce_flow(&pi, &spec).unwrap();
        let marginals = agent_marginals(&pi, &flow, &spec).unwrap();
        for (m, f) in marginals.iter().zip(flow.iter()) {
            for (x, y) in m.probs().iter().zip(f.probs()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn trajectory_law_sums_to_one((seed, s, a, t) in (any::<u64>(), 1usize..4, 1usize..3, 1usize..4)) {
        let spec = random_spec(seed, s, a, t);
        let pi = random_policy(seed, s, a, t);
        let flow = induce_flow(&pi, &spec).unwrap();
        let total: f64 = all_trajectories(s, a, t)
            .iter()
            .map(|tau| trajectory_log_prob(tau, &pi, &flow, &spec).unwrap().exp())
            .sum();
        prop_assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn soft_best_response_rows_are_distributions((seed, s, a, t) in dims()) {
        let spec = random_spec(seed, s, a, t);
        let flow = induce_flow(&random_policy(seed, s, a, t), &spec).unwrap();
        let (_, pi) = soft_backward_induction(&flow, spec.reward().unwrap(), &spec, 1.0).unwrap();
        for step in pi.steps() {
            for row in step.to_rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&p| p > 0.0));
            }
        }
    }

    #[test]
    fn ermfne_is_a_fixed_point((seed, s, a, t) in dims()) {
        let spec = random_spec(seed, s, a, t);
        let eq = solve_ermfne(spec.reward().unwrap(), &spec, &SolverConfig::default()).unwrap();
        prop_assert!(eq.converged);
        let flow = induce_flow(&eq.policy, &spec).unwrap();
        prop_assert!(flow.max_abs_diff(&eq.flow) < 1e-9);
    }

    #[test]
    fn expert_flow_estimate_rows_sum_to_one((seed, s, a, t) in dims(), agents in 1usize..20, plays in 1usize..4) {
        let spec = random_spec(seed, s, a, t);
        let pi = random_policy(seed, s, a, t);
        let games = (0..plays)
            .map(|j| sample_game_play(&spec, &pi, agents, seed.wrapping_add(j as u64)).unwrap().0)
            .collect();
        let demos = DemoSet::new("random", "original", spec.gamma(), games).unwrap();
        let flow = estimate_expert_flow(&demos, s).unwrap();
        for mu in flow.iter() {
            prop_assert!((mu.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_equal_inputs(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = simplex(&mut rng, n);
        let q = simplex(&mut rng, n);
        prop_assert!(kl_divergence(&p, &q) >= 0.0);
        prop_assert!(smoothed_kl_divergence(&p, &q) >= -1e-15);
        prop_assert!(kl_divergence(&p, &p).abs() < 1e-15);
    }
}

/// Per-state deviation of a finite-population mean field from the
/// mean-field limit stays inside a Hoeffding band.
#[test]
fn empirical_mean_field_concentrates() {
    let spec = build_env(&EnvConfig::new(EnvName::Virus, EnvVariant::Original).with_horizon(2)).unwrap();
    let pi = Policy::uniform(spec.n_states(), spec.n_actions(), 2);
    let limit = induce_flow(&pi, &spec).unwrap();
    let n = 2000;
    // two-sided band at confidence 1 - 1e-6 per state and step
    let band = ((2.0f64 / 1e-6).ln() / (2.0 * n as f64)).sqrt();
    for seed in 0..20 {
        let (_, empirical) = sample_game_play(&spec, &pi, n, seed).unwrap();
        for (e, m) in empirical.iter().zip(limit.iter()).skip(1) {
            for (x, y) in e.probs().iter().zip(m.probs()) {
                assert!((x - y).abs() < band, "seed {seed}: {x} vs {y}, band {band}");
            }
        }
    }
}
