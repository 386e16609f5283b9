//! Differentially private gradient steps.
//!
//! Each step Poisson-samples units (single examples or whole trajectories),
//! clips every unit's gradient to norm `C`, sums the clipped gradients in
//! unit order, adds one draw of `N(0, C²σ²·I)` and divides by the realized
//! batch size.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, NoiseSchedule, NoisedBatch, Penalty};
use crate::error::{Error, Result};
use crate::numerics::{grad_of_rows, Optimizer, OptimizerKind, ParamSet, SeededRng, Tensor};

/// What one privacy unit is.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    #[default]
    Transition,
    Trajectory,
}

/// Hyper-parameters of private training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpSgdConfig {
    pub clip: f64,
    pub sigma: f64,
    pub q: f64,
    /// Update rule applied to the privatized gradient. Plain SGD uses the
    /// learning rate directly; Adam only post-processes the noisy gradient.
    pub optimizer: OptimizerKind,
    pub level: Level,
}

impl DpSgdConfig {
    pub fn new(clip: f64, sigma: f64, q: f64, lr: f64) -> Self {
        Self {
            clip,
            sigma,
            q,
            optimizer: OptimizerKind::sgd(lr),
            level: Level::Transition,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0) || !self.clip.is_finite() {
            return Err(Error::invalid(format!("clip norm must be positive, got {}", self.clip)));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::invalid(format!(
                "noise multiplier must be >= 0, got {}",
                self.sigma
            )));
        }
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::invalid(format!(
                "sampling ratio must lie in (0, 1], got {}",
                self.q
            )));
        }
        Ok(())
    }
}

/// Scales `g` to norm at most `c`.
pub fn clip(g: &ParamSet, c: f64) -> ParamSet {
    let mut out = g.clone();
    clip_in_place(&mut out, c);
    out
}

/// In-place [`clip`]; returns the norm after clipping.
pub fn clip_in_place(g: &mut ParamSet, c: f64) -> f64 {
    let norm = g.norm();
    if norm <= c {
        return norm;
    }
    g.scale(c / norm);
    // rounding can leave the result an ulp above c
    let mut n = g.norm();
    while n > c {
        g.scale((1.0 - f64::EPSILON) * c / n);
        n = g.norm();
    }
    n
}

/// Units selected for one step.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SampledBatch {
    pub indices: Vec<usize>,
}

impl SampledBatch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Includes each of `0..n` independently with probability `q`.
pub fn poisson_sample(n: usize, q: f64, rng: &mut SeededRng) -> SampledBatch {
    let indices = if q >= 1.0 {
        (0..n).collect()
    } else {
        (0..n).filter(|_| rng.uniform() < q).collect()
    };
    SampledBatch { indices }
}

/// Diagnostics of one private step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    pub batch_size: usize,
    /// Norm of every unit's clipped contribution, in unit order.
    pub clipped_norms: Vec<f64>,
    /// Mean training loss over the sampled units.
    pub loss: f64,
    pub skipped: bool,
}

const CHUNK: usize = 32;

/// Sum of clipped per-unit gradients and the per-unit loss values.
///
/// Units are processed in parallel chunks and reduced strictly in order, so
/// the result does not depend on the thread count.
pub fn clipped_sum<F>(template: &ParamSet, units: usize, c: f64, unit_grad: F) -> Result<(ParamSet, Vec<f64>, f64)>
where
    F: Fn(usize) -> Result<(f64, ParamSet)> + Sync,
{
    let mut sum = template.zeros_like();
    let mut norms = Vec::with_capacity(units);
    let mut loss = 0.0;
    let mut start = 0;
    while start < units {
        let end = (start + CHUNK).min(units);
        let part: Vec<(f64, ParamSet, f64)> = (start..end)
            .into_par_iter()
            .map(|u| {
                let (l, mut g) = unit_grad(u)?;
                let n = clip_in_place(&mut g, c);
                Ok((l, g, n))
            })
            .collect::<Result<_>>()?;
        for (l, g, n) in part {
            sum.axpy(1.0, &g)?;
            norms.push(n);
            loss += l;
        }
        start = end;
    }
    Ok((sum, norms, loss))
}

/// Adds `C·σ·N(0, I)` to `sum` and divides by `max(1, batch)`.
pub fn privatize(sum: &mut ParamSet, batch: usize, c: f64, sigma: f64, rng: &mut SeededRng) {
    let std = c * sigma;
    if std > 0.0 {
        for (_, t) in sum.iter_mut() {
            for v in t.data_mut() {
                *v += std * rng.normal();
            }
        }
    }
    sum.scale(1.0 / batch.max(1) as f64);
}

fn finish(
    params: &mut ParamSet,
    opt: &mut Optimizer,
    cfg: &DpSgdConfig,
    units: usize,
    rng: &mut SeededRng,
    unit_grad: impl Fn(usize) -> Result<(f64, ParamSet)> + Sync,
) -> Result<StepStats> {
    let (mut sum, norms, loss) = clipped_sum(params, units, cfg.clip, unit_grad)?;
    privatize(&mut sum, units, cfg.clip, cfg.sigma, rng);
    opt.step(params, &sum)?;
    Ok(StepStats {
        batch_size: units,
        clipped_norms: norms,
        loss: loss / units as f64,
        skipped: false,
    })
}

/// One transition-level step on the rows of `data` (already in model space).
pub fn dp_step_transition<D: Denoiser>(
    net: &D,
    params: &mut ParamSet,
    sched: &NoiseSchedule,
    data: &Tensor,
    cfg: &DpSgdConfig,
    opt: &mut Optimizer,
    rng: &mut SeededRng,
) -> Result<StepStats> {
    cfg.validate()?;
    if data.rows() == 0 {
        return Err(Error::Empty("private step on an empty dataset".into()));
    }
    let batch = poisson_sample(data.rows(), cfg.q, rng);
    if batch.is_empty() {
        return Ok(StepStats {
            skipped: true,
            ..StepStats::default()
        });
    }
    let x0 = data.select_rows(&batch.indices);
    let nb = NoisedBatch::draw(sched, &x0, None, net.cond_dim(), Penalty::Squared, rng)?;
    let frozen = params.clone();
    finish(params, opt, cfg, batch.len(), rng, |u| {
        grad_of_rows(net, &frozen, &nb.inputs, &[u], &nb)
    })
}

/// Fragments of a trajectory dataset in model space.
///
/// Row `i` of `fragments`, `conditions` and `mask` describe one fragment;
/// `groups[j]` is the row range owned by trajectory `j`.
#[derive(Clone, Debug)]
pub struct FragmentTable {
    pub fragments: Tensor,
    pub conditions: Tensor,
    pub mask: Tensor,
    pub groups: Vec<Range<usize>>,
}

impl FragmentTable {
    pub fn validate(&self) -> Result<()> {
        let rows = self.fragments.rows();
        if self.conditions.rows() != rows || self.mask.shape() != self.fragments.shape() {
            return Err(Error::shape("fragment, condition and mask tables disagree"));
        }
        for g in &self.groups {
            if g.is_empty() {
                return Err(Error::Empty("trajectory without fragments".into()));
            }
            if g.end > rows {
                return Err(Error::shape(format!("group {g:?} beyond {rows} fragments")));
            }
        }
        Ok(())
    }

    pub fn trajectories(&self) -> usize {
        self.groups.len()
    }

    /// Rows of the selected trajectories, with their new group ranges.
    pub fn select(&self, trajectories: &[usize]) -> FragmentTable {
        let mut rows = Vec::new();
        let mut groups = Vec::with_capacity(trajectories.len());
        for &j in trajectories {
            let start = rows.len();
            rows.extend(self.groups[j].clone());
            groups.push(start..rows.len());
        }
        FragmentTable {
            fragments: self.fragments.select_rows(&rows),
            conditions: self.conditions.select_rows(&rows),
            mask: self.mask.select_rows(&rows),
            groups,
        }
    }
}

/// Gradient of the mean masked fragment loss of one trajectory.
pub fn trajectory_grad<D: Denoiser>(
    net: &D,
    params: &ParamSet,
    nb: &NoisedBatch,
    rows: Range<usize>,
) -> Result<(f64, ParamSet)> {
    let rows: Vec<usize> = rows.collect();
    grad_of_rows(net, params, &nb.inputs, &rows, nb)
}

/// One trajectory-level step: each sampled trajectory contributes the mean
/// gradient over its fragments, clipped as a whole.
pub fn dp_step_trajectory<D: Denoiser>(
    net: &D,
    params: &mut ParamSet,
    sched: &NoiseSchedule,
    table: &FragmentTable,
    cfg: &DpSgdConfig,
    opt: &mut Optimizer,
    rng: &mut SeededRng,
) -> Result<StepStats> {
    cfg.validate()?;
    table.validate()?;
    if table.trajectories() == 0 {
        return Err(Error::Empty("private step on an empty trajectory set".into()));
    }
    let batch = poisson_sample(table.trajectories(), cfg.q, rng);
    if batch.is_empty() {
        return Ok(StepStats {
            skipped: true,
            ..StepStats::default()
        });
    }
    let sub = table.select(&batch.indices);
    let nb = NoisedBatch::draw(
        sched,
        &sub.fragments,
        Some(&sub.conditions),
        net.cond_dim(),
        Penalty::Absolute,
        rng,
    )?
    .with_mask(sub.mask.clone())?;
    let frozen = params.clone();
    finish(params, opt, cfg, batch.len(), rng, |u| {
        trajectory_grad(net, &frozen, &nb, sub.groups[u].clone())
    })
}
