//! Episode rollouts, dataset collection and normalized-return scoring.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::grid::GridWorld;
use crate::env::policy::{ExpertPolicy, Policy, RandomPolicy};
use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Tensor};
use crate::trajectory::{flatten, Trajectory};
use crate::transition::{Schema, TransitionDataset};

/// Columns of a grid-world transition: 2-D state and action, terminal flag.
pub fn grid_schema() -> Schema {
    Schema::new(2, 2, true)
}

/// One episode. The terminal transition carries a zero next state.
pub fn run_episode<P: Policy + ?Sized>(world: &GridWorld, policy: &P, rng: &mut SeededRng) -> Result<Trajectory> {
    let schema = grid_schema();
    let mut cell = world.reset(rng);
    let mut data = Vec::new();
    let mut steps = 0;
    while steps < world.spec().max_steps {
        let s = world.observe(cell);
        let a = policy.act(&s, rng);
        if a.len() != 2 {
            return Err(Error::shape(format!("policy produced {} action components", a.len())));
        }
        let step = world.step(cell, &a);
        let next = if step.done { [0.0; 2] } else { world.observe(step.next) };
        data.extend_from_slice(&[s[0], s[1], a[0], a[1], step.reward, next[0], next[1]]);
        data.push(f64::from(u8::from(step.done)));
        steps += 1;
        cell = step.next;
        if step.done {
            break;
        }
    }
    Trajectory::new(schema.clone(), Tensor::matrix(steps, schema.width(), data)?)
}

/// `episodes` independent episodes, each on its own random stream, so the
/// result does not depend on the thread count.
pub fn rollouts<P: Policy + ?Sized>(
    world: &GridWorld,
    policy: &P,
    episodes: usize,
    rng: &mut SeededRng,
) -> Result<Vec<Trajectory>> {
    let base = SeededRng::new(rng.next_u64());
    (0..episodes)
        .into_par_iter()
        .map(|i| run_episode(world, policy, &mut base.derive(i as u64)))
        .collect()
}

/// Trajectories and their flattened transitions.
pub fn collect<P: Policy + ?Sized>(
    world: &GridWorld,
    policy: &P,
    episodes: usize,
    rng: &mut SeededRng,
) -> Result<(Vec<Trajectory>, TransitionDataset)> {
    if episodes == 0 {
        return Err(Error::invalid("collect needs at least one episode"));
    }
    let trajs = rollouts(world, policy, episodes, rng)?;
    let flat = flatten(&grid_schema(), &trajs)?;
    Ok((trajs, flat))
}

/// Sum of rewards of a trajectory.
pub fn episode_return(t: &Trajectory) -> f64 {
    let rc = t.schema().reward_col();
    t.rows().row_iter().map(|r| r[rc]).sum()
}

/// Mean returns of the random and scripted-expert policies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub random: f64,
    pub expert: f64,
}

impl Baselines {
    /// Expert anchor uses a noise-free shortest-path controller.
    pub fn measure(world: &GridWorld, episodes: usize, rng: &mut SeededRng) -> Result<Self> {
        let random = mean_return(world, &RandomPolicy, episodes, rng)?.0;
        let expert = mean_return(world, &ExpertPolicy::new(world.clone(), 0.0), episodes, rng)?.0;
        Ok(Self { random, expert })
    }
}

/// Raw and normalized returns of a policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnStats {
    pub raw_mean: f64,
    /// Standard error of `raw_mean`.
    pub raw_se: f64,
    pub random: f64,
    pub expert: f64,
    /// `100·(raw − random)/(expert − random)`.
    pub normalized: f64,
}

/// Mean episode return and its standard error.
pub fn mean_return<P: Policy + ?Sized>(
    world: &GridWorld,
    policy: &P,
    episodes: usize,
    rng: &mut SeededRng,
) -> Result<(f64, f64)> {
    if episodes == 0 {
        return Err(Error::invalid("evaluation needs at least one episode"));
    }
    let returns: Vec<f64> = rollouts(world, policy, episodes, rng)?
        .iter()
        .map(episode_return)
        .collect();
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let se = if returns.len() > 1 {
        (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        0.0
    };
    Ok((mean, se))
}

pub fn evaluate<P: Policy + ?Sized>(
    policy: &P,
    world: &GridWorld,
    episodes: usize,
    baselines: Baselines,
    rng: &mut SeededRng,
) -> Result<ReturnStats> {
    let gap = baselines.expert - baselines.random;
    if !(gap.abs() > 1e-12) {
        return Err(Error::invalid(format!(
            "expert and random baselines coincide ({} vs {})",
            baselines.expert, baselines.random
        )));
    }
    let (raw_mean, raw_se) = mean_return(world, policy, episodes, rng)?;
    Ok(ReturnStats {
        raw_mean,
        raw_se,
        random: baselines.random,
        expert: baselines.expert,
        normalized: 100.0 * (raw_mean - baselines.random) / gap,
    })
}
