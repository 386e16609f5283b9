//! Novelty scores from random network distillation, and the batch
//! replacement rule that feeds the most novel synthetic rows back into
//! training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{grad, MlpLayout, Network, NetworkSpec, Optimizer, OptimizerKind, ParamSet, SeededRng, Tensor};

/// Shape and training settings of an [`RndPair`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CuriosityConfig {
    /// Fraction of each batch replaced by synthetic rows.
    pub rate: f64,
    pub output_dim: usize,
    pub width: usize,
    pub target_depth: usize,
    pub predictor_depth: usize,
    pub optimizer: OptimizerKind,
}

impl Default for CuriosityConfig {
    fn default() -> Self {
        Self {
            rate: 0.3,
            output_dim: 32,
            width: 64,
            target_depth: 4,
            predictor_depth: 2,
            optimizer: OptimizerKind::adam(1e-3),
        }
    }
}

impl CuriosityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::invalid(format!(
                "curiosity rate must lie in [0, 1], got {}",
                self.rate
            )));
        }
        Ok(())
    }
}

/// A frozen random target network and a predictor trained to imitate it.
#[derive(Clone, Debug)]
pub struct RndPair {
    target: MlpLayout,
    target_params: ParamSet,
    predictor: MlpLayout,
    predictor_params: ParamSet,
    optimizer: Optimizer,
}

impl RndPair {
    pub fn new(input_dim: usize, cfg: &CuriosityConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let mut target_params = ParamSet::new();
        let target = MlpLayout::register(
            NetworkSpec::uniform(input_dim, cfg.width, cfg.target_depth, cfg.output_dim),
            &mut target_params,
            "target",
            rng,
        )?;
        let mut predictor_params = ParamSet::new();
        let predictor = MlpLayout::register(
            NetworkSpec::uniform(input_dim, cfg.width, cfg.predictor_depth, cfg.output_dim),
            &mut predictor_params,
            "predictor",
            rng,
        )?;
        Ok(Self {
            target,
            target_params,
            predictor,
            predictor_params,
            optimizer: Optimizer::new(cfg.optimizer),
        })
    }

    /// A pair whose predictor has exactly the target's architecture and
    /// parameters, so every score is zero.
    pub fn mirrored(input_dim: usize, cfg: &CuriosityConfig, rng: &mut SeededRng) -> Result<Self> {
        let mut pair = Self::new(input_dim, cfg, rng)?;
        pair.predictor = pair.target.clone();
        pair.predictor_params = pair.target_params.clone();
        Ok(pair)
    }

    pub fn input_dim(&self) -> usize {
        self.target.input_dim()
    }

    pub fn target_params(&self) -> &ParamSet {
        &self.target_params
    }

    pub fn predictor_params(&self) -> &ParamSet {
        &self.predictor_params
    }

    /// `‖f̂(x) − f(x)‖²` for every row of `x`.
    pub fn scores(&self, x: &Tensor) -> Result<Vec<f64>> {
        let f = self.target.forward(&self.target_params, x)?;
        let g = self.predictor.forward(&self.predictor_params, x)?;
        Ok((0..x.rows())
            .map(|r| f.row(r).iter().zip(g.row(r)).map(|(a, b)| (a - b).powi(2)).sum())
            .collect())
    }

    /// One optimizer step on the mean score of `batch`; returns the mean
    /// score before the step.
    pub fn update_predictor(&mut self, batch: &Tensor) -> Result<f64> {
        if batch.rows() == 0 {
            return Err(Error::Empty("predictor update on an empty batch".into()));
        }
        let targets = self.target.forward(&self.target_params, batch)?;
        let loss = |r: usize, out: &[f64], g: &mut [f64]| {
            let mut s = 0.0;
            for ((o, t), gi) in out.iter().zip(targets.row(r)).zip(g.iter_mut()) {
                let d = o - t;
                *gi = 2.0 * d;
                s += d * d;
            }
            s
        };
        let (value, grads) = grad(&self.predictor, &self.predictor_params, batch, &loss)?;
        self.optimizer.step(&mut self.predictor_params, &grads)?;
        Ok(value)
    }
}

/// Curiosity score of every row of `x`.
pub fn curiosity_score(pair: &RndPair, x: &Tensor) -> Result<Vec<f64>> {
    pair.scores(x)
}

/// Number of rows replaced at rate `p` in a batch of `b`.
pub fn replacement_count(p: f64, b: usize) -> usize {
    ((p * b as f64) + 1e-9).floor().min(b as f64) as usize
}

/// Indices of the `m` highest scores, ties broken by lower index.
pub fn top_indices(scores: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    order.truncate(m);
    order
}

/// Result of [`curious_replace`].
#[derive(Clone, Debug, PartialEq)]
pub struct Replacement {
    pub batch: Tensor,
    /// Batch positions that now hold synthetic rows.
    pub positions: Vec<usize>,
    /// Synthetic rows inserted, aligned with `positions`.
    pub inserted: Vec<usize>,
}

/// Overwrites `floor(p·B)` uniformly chosen rows of `real` with the
/// highest-scoring rows of `synth`.
pub fn curious_replace(
    real: &Tensor,
    synth: &Tensor,
    scores: &[f64],
    p: f64,
    rng: &mut SeededRng,
) -> Result<Replacement> {
    let b = real.rows();
    if synth.rows() != b || scores.len() != b {
        return Err(Error::shape(format!(
            "batch {b}, synthetic {}, scores {}",
            synth.rows(),
            scores.len()
        )));
    }
    if b > 0 && synth.cols() != real.cols() {
        return Err(Error::shape("real and synthetic widths differ"));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("curiosity rate must lie in [0, 1], got {p}")));
    }
    let m = replacement_count(p, b);
    let inserted = top_indices(scores, m);
    let positions = rng.choose_distinct(b, m);
    let mut batch = real.clone();
    for (&pos, &src) in positions.iter().zip(&inserted) {
        batch.row_mut(pos).copy_from_slice(synth.row(src));
    }
    Ok(Replacement {
        batch,
        positions,
        inserted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mirrored_pair_scores_zero() {
        let pair = RndPair::mirrored(3, &CuriosityConfig::default(), &mut SeededRng::new(0)).unwrap();
        let mut x = Tensor::zeros(&[5, 3]);
        SeededRng::new(1).fill_normal(x.data_mut(), 2.0);
        assert!(pair.scores(&x).unwrap().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn scores_are_non_negative() {
        let pair = RndPair::new(2, &CuriosityConfig::default(), &mut SeededRng::new(0)).unwrap();
        let mut x = Tensor::zeros(&[50, 2]);
        SeededRng::new(2).fill_normal(x.data_mut(), 3.0);
        assert!(pair.scores(&x).unwrap().iter().all(|&s| s >= 0.0));
        assert!(pair.scores(&Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn replacement_count_floors() {
        assert_eq!(replacement_count(0.3, 10), 3);
        assert_eq!(replacement_count(0.29, 100), 29);
        assert_eq!(replacement_count(0.0, 10), 0);
        assert_eq!(replacement_count(1.0, 7), 7);
        assert_eq!(replacement_count(0.05, 10), 0);
    }

    #[test]
    fn ties_break_by_index() {
        assert_eq!(top_indices(&[1.0, 3.0, 3.0, 0.5, 3.0], 2), vec![1, 2]);
    }

    #[test]
    fn bad_rate_rejected() {
        let x = Tensor::zeros(&[2, 1]);
        assert!(curious_replace(&x, &x, &[0.0, 0.0], 1.5, &mut SeededRng::new(0)).is_err());
        assert!(curious_replace(&x, &x, &[0.0], 0.5, &mut SeededRng::new(0)).is_err());
    }
}
