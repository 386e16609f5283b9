//! Scripted policies and behavior cloning.

use serde::{Deserialize, Serialize};

use crate::env::grid::{GridWorld, MOVES};
use crate::error::{Error, Result};
use crate::numerics::{grad, MlpLayout, Network, NetworkSpec, Optimizer, OptimizerKind, ParamSet, SeededRng, Tensor};
use crate::transition::TransitionDataset;

/// Maps an observation to a continuous action.
pub trait Policy: Sync {
    fn act(&self, state: &[f64], rng: &mut SeededRng) -> Vec<f64>;
}

/// Uniform actions in `[-1, 1]²`.
#[derive(Clone, Copy, Debug, Default)]
pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn act(&self, _: &[f64], rng: &mut SeededRng) -> Vec<f64> {
        vec![2.0 * rng.uniform() - 1.0, 2.0 * rng.uniform() - 1.0]
    }
}

/// Shortest-path controller: a unit step toward the goal plus Gaussian noise.
#[derive(Clone, Debug)]
pub struct ExpertPolicy {
    world: GridWorld,
    pub noise: f64,
}

impl ExpertPolicy {
    pub fn new(world: GridWorld, noise: f64) -> Self {
        Self { world, noise }
    }

    /// The first move in [`MOVES`] order that gets one step closer.
    pub fn best_move(&self, state: &[f64]) -> Option<(isize, isize)> {
        let c = self.world.locate(state);
        let d = self.world.distance(c)?;
        MOVES.into_iter().find(|&m| {
            self.world
                .neighbor(c, m)
                .and_then(|n| self.world.distance(n))
                .is_some_and(|dn| dn + 1 == d)
        })
    }
}

impl Policy for ExpertPolicy {
    fn act(&self, state: &[f64], rng: &mut SeededRng) -> Vec<f64> {
        let (dx, dy) = self.best_move(state).unwrap_or((0, 0));
        let mut a = vec![dx as f64, dy as f64];
        if self.noise > 0.0 {
            for v in &mut a {
                *v = (*v + self.noise * rng.normal()).clamp(-1.0, 1.0);
            }
        }
        a
    }
}

/// Takes a uniformly random action with probability `random_prob`, the
/// wrapped policy's action otherwise.
#[derive(Clone, Debug)]
pub struct MixedPolicy<P> {
    pub inner: P,
    pub random_prob: f64,
}

impl<P: Policy> Policy for MixedPolicy<P> {
    fn act(&self, state: &[f64], rng: &mut SeededRng) -> Vec<f64> {
        if rng.bernoulli(self.random_prob) {
            RandomPolicy.act(state, rng)
        } else {
            self.inner.act(state, rng)
        }
    }
}

/// Behavior-cloning settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BcConfig {
    pub width: usize,
    pub depth: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            width: 64,
            depth: 3,
            epochs: 200,
            batch: 64,
            lr: 3e-3,
        }
    }
}

/// A deterministic MLP policy fitted to `(s, a)` pairs.
#[derive(Clone, Debug)]
pub struct BcPolicy {
    net: MlpLayout,
    params: ParamSet,
}

impl BcPolicy {
    pub fn predict(&self, states: &Tensor) -> Result<Tensor> {
        Ok(self.net.forward_cached(&self.params, states)?.0)
    }
}

impl Policy for BcPolicy {
    fn act(&self, state: &[f64], _: &mut SeededRng) -> Vec<f64> {
        let (y, _) = self.net.forward_rows(&self.params, state, 1);
        y
    }
}

/// Fits a policy by minimizing the mean squared action error. Returns the
/// policy and the mean loss of every epoch.
pub fn train_bc(data: &TransitionDataset, cfg: &BcConfig, rng: &mut SeededRng) -> Result<(BcPolicy, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::Empty("behavior cloning on an empty dataset".into()));
    }
    if cfg.batch == 0 || cfg.depth == 0 {
        return Err(Error::invalid("batch size and depth must be at least 1"));
    }
    let (states, actions) = data.state_action();
    let spec = NetworkSpec::uniform(states.cols(), cfg.width, cfg.depth, actions.cols());
    let mut params = ParamSet::new();
    let net = MlpLayout::register(spec, &mut params, "bc", rng)?;
    let mut opt = Optimizer::new(OptimizerKind::adam(cfg.lr));
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..states.rows()).collect();
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch) {
            let x = states.select_rows(idx);
            let y = actions.select_rows(idx);
            let loss = |row: usize, out: &[f64], g: &mut [f64]| {
                let target = y.row(row);
                let mut l = 0.0;
                for ((gi, o), t) in g.iter_mut().zip(out).zip(target) {
                    *gi = 2.0 * (o - t);
                    l += (o - t) * (o - t);
                }
                l
            };
            let (l, g) = grad(&net, &params, &x, &loss)?;
            opt.step(&mut params, &g)?;
            total += l * idx.len() as f64;
        }
        losses.push(total / states.rows() as f64);
    }
    Ok((BcPolicy { net, params }, losses))
}
