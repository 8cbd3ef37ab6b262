//! Forward equilibrium solving and inverse reinforcement learning for finite
//! mean-field games.

pub mod envs;
pub mod error;
pub mod harness;
pub mod irl;
pub mod metrics;
pub mod mfg;
pub mod nn;
pub mod solver;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/mean-field-games.md")]
    mod mean_field_games {}
    #[doc = include_str!("../../../book/src/equilibria.md")]
    mod equilibria {}
    #[doc = include_str!("../../../book/src/reward-shaping.md")]
    mod reward_shaping {}
    #[doc = include_str!("../../../book/src/learning-rewards.md")]
    mod learning_rewards {}
    #[doc = include_str!("../../../book/src/baseline.md")]
    mod baseline {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
