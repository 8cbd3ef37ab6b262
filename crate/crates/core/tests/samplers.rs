//! Energy-model regime and approximate samplers.

use std::sync::Arc;
use std::time::Instant;

use mfirl::envs::{build_env, EnvConfig, EnvName, EnvVariant};
use mfirl::mfg::{
    all_trajectories, energy_log_weight, trajectory_log_prob, FnReward, FnTransition, MeanField, MfgSpec,
};
use mfirl::solver::{
    soft_backward_induction, solve_ermfne, train_adaptive_samplers, SamplerConfig, SolverConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn law_gap(spec: &MfgSpec) -> f64 {
    let reward = spec.reward().unwrap();
    let eq = solve_ermfne(reward, spec, &SolverConfig::default()).unwrap();
    let (_, pi) = soft_backward_induction(&eq.flow, reward, spec, 1.0).unwrap();
    let taus = all_trajectories(spec.n_states(), spec.n_actions(), spec.horizon());
    let law: Vec<f64> = taus
        .iter()
        .map(|tau| trajectory_log_prob(tau, &pi, &eq.flow, spec).unwrap().exp())
        .collect();
    let energy: Vec<f64> = taus
        .iter()
        .map(|tau| energy_log_weight(tau, &eq.flow, reward, spec).unwrap().exp())
        .collect();
    let z: f64 = energy.iter().sum();
    law.iter().zip(&energy).map(|(p, e)| (p - e / z).abs()).sum()
}

fn two_state_game(noise: f64) -> MfgSpec {
    let transition = FnTransition::new(2, 2, move |_s: usize, a: usize, _mu: &MeanField| {
        let mut row = vec![noise / 2.0; 2];
        row[a] += 1.0 - noise;
        row
    });
    let reward = FnReward(|s: usize, a: usize, mu: &MeanField| {
        [0.3, -0.2, 1.0, 0.1][s * 2 + a] - mu.get(s)
    });
    MfgSpec::new(
        vec!["x".into(), "y".into()],
        vec!["u".into(), "v".into()],
        Arc::new(transition),
        Some(Arc::new(reward)),
        MeanField::point_mass(2, 0),
        1.0,
        3,
    )
    .unwrap()
}

#[test]
fn energy_model_is_exact_only_for_deterministic_dynamics() {
    assert!(law_gap(&two_state_game(0.0)) < 1e-10);
    let gap = law_gap(&two_state_game(0.5));
    assert!(gap > 1e-3, "stochastic dynamics gap {gap}");
}

#[test]
fn approximate_samplers_track_exact_soft_policy_on_virus() {
    let start = Instant::now();
    let spec = build_env(&EnvConfig::new(EnvName::Virus, EnvVariant::Original)).unwrap();
    let reward = spec.reward().unwrap();
    let eq = solve_ermfne(reward, &spec, &SolverConfig::default()).unwrap();
    let exact = train_adaptive_samplers(reward, &eq.flow, &spec, &SamplerConfig::tabular(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let approx = train_adaptive_samplers(reward, &eq.flow, &spec, &SamplerConfig::approximator(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    // mean over steps of the flow-weighted L1 distance between policy rows
    let mut total = 0.0;
    for t in 0..spec.horizon() {
        for s in 0..spec.n_states() {
            let l1: f64 = exact[t].row(s).iter().zip(approx[t].row(s)).map(|(p, q)| (p - q).abs()).sum();
            total += eq.flow[t].get(s) * l1;
        }
    }
    let mean = total / spec.horizon() as f64;
    assert!(mean < 0.05, "mean weighted L1 {mean}, {:?}", start.elapsed());
}
