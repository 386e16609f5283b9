//! A toy grid world, scripted and cloned policies, and return scoring.

mod grid;
mod policy;
mod rollout;

pub use grid::{Cell, GridWorld, GridWorldSpec, Step, MOVES};
pub use policy::{train_bc, BcConfig, BcPolicy, ExpertPolicy, MixedPolicy, Policy, RandomPolicy};
pub use rollout::{
    collect, episode_return, evaluate, grid_schema, mean_return, rollouts, run_episode, Baselines, ReturnStats,
};
