//! Noise-prediction training objectives.

use crate::diffusion::{noise_data, pack_inputs, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::{grad, ParamSet, RowLoss, SeededRng, Tensor};

/// Per-example penalty on the noise residual.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Penalty {
    /// Sum of squared residuals.
    Squared,
    /// Sum of absolute residuals.
    Absolute,
}

/// A batch corrupted at random timesteps, ready to be fed to a denoiser.
///
/// Implements [`RowLoss`] so it can drive both plain and per-example
/// gradients. Row `i` of `inputs` pairs with row `i` of `noise`.
#[derive(Clone, Debug)]
pub struct NoisedBatch {
    pub inputs: Tensor,
    pub noise: Tensor,
    pub steps: Vec<usize>,
    pub penalty: Penalty,
    /// Optional 0/1 weights per data coordinate, same shape as `noise`.
    pub mask: Option<Tensor>,
}

impl NoisedBatch {
    /// Draws, for each row in order, `t ~ U{1..T}` and then `e ~ N(0, I)`.
    pub fn draw(
        sched: &NoiseSchedule,
        x0: &Tensor,
        cond: Option<&Tensor>,
        cond_dim: usize,
        penalty: Penalty,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if x0.rows() == 0 {
            return Err(Error::Empty("diffusion loss of an empty batch".into()));
        }
        if let Some(c) = cond {
            if c.rows() != x0.rows() {
                return Err(Error::shape(format!(
                    "{} conditions for {} examples",
                    c.rows(),
                    x0.rows()
                )));
            }
        }
        let (rows, dim) = (x0.rows(), x0.cols());
        let mut steps = Vec::with_capacity(rows);
        let mut noise = Tensor::zeros(&[rows, dim]);
        let mut xt = Tensor::zeros(&[rows, dim]);
        for r in 0..rows {
            let t = rng.range_inclusive(1, sched.steps());
            rng.fill_normal(noise.row_mut(r), 1.0);
            let ab = sched.alpha_bar(t);
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            let (x, e) = (x0.row(r), noise.row(r));
            for (o, (xi, ei)) in xt.row_mut(r).iter_mut().zip(x.iter().zip(e)) {
                *o = a * xi + b * ei;
            }
            steps.push(sched.model_step(t));
        }
        let inputs = pack_inputs(&xt, cond, &steps, cond_dim)?;
        Ok(Self {
            inputs,
            noise,
            steps,
            penalty,
            mask: None,
        })
    }

    /// Builds a batch from explicit timesteps and noise.
    pub fn from_parts(
        sched: &NoiseSchedule,
        x0: &Tensor,
        cond: Option<&Tensor>,
        cond_dim: usize,
        steps: Vec<usize>,
        noise: Tensor,
        penalty: Penalty,
    ) -> Result<Self> {
        if steps.len() != x0.rows() {
            return Err(Error::shape("one timestep per example required"));
        }
        let mut xt = Tensor::zeros(x0.shape());
        for (r, &t) in steps.iter().enumerate() {
            sched.check_step(t)?;
            let row = Tensor::new(vec![x0.cols()], x0.row(r).to_vec())?;
            let e = Tensor::new(vec![x0.cols()], noise.row(r).to_vec())?;
            xt.row_mut(r).copy_from_slice(noise_data(&row, t, &e, sched)?.data());
        }
        let model: Vec<usize> = steps.iter().map(|&t| sched.model_step(t)).collect();
        let inputs = pack_inputs(&xt, cond, &model, cond_dim)?;
        Ok(Self {
            inputs,
            noise,
            steps: model,
            penalty,
            mask: None,
        })
    }

    pub fn with_mask(mut self, mask: Tensor) -> Result<Self> {
        if mask.shape() != self.noise.shape() {
            return Err(Error::shape(format!(
                "mask {:?} for noise {:?}",
                mask.shape(),
                self.noise.shape()
            )));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.noise.rows()
    }
}

impl RowLoss for NoisedBatch {
    fn row_loss(&self, row: usize, output: &[f64], grad: &mut [f64]) -> f64 {
        let target = self.noise.row(row);
        let mask = self.mask.as_ref().map(|m| m.row(row));
        let mut total = 0.0;
        for i in 0..output.len() {
            let w = mask.map_or(1.0, |m| m[i]);
            let d = output[i] - target[i];
            match self.penalty {
                Penalty::Squared => {
                    total += w * d * d;
                    grad[i] = 2.0 * w * d;
                }
                Penalty::Absolute => {
                    total += w * d.abs();
                    grad[i] = w * if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
            }
        }
        total
    }
}

/// Mean per-example `‖e − e_θ(x_t, t)‖²` and its gradient.
pub fn diffusion_loss<D: Denoiser>(
    net: &D,
    params: &ParamSet,
    sched: &NoiseSchedule,
    batch: &Tensor,
    rng: &mut SeededRng,
) -> Result<(f64, ParamSet)> {
    let nb = NoisedBatch::draw(sched, batch, None, net.cond_dim(), Penalty::Squared, rng)?;
    grad(net, params, &nb.inputs, &nb)
}

/// Mean per-example `‖e − e_θ(x_t, t, c)‖₁` and its gradient.
pub fn conditional_loss<D: Denoiser>(
    net: &D,
    params: &ParamSet,
    sched: &NoiseSchedule,
    batch: &Tensor,
    conditions: &Tensor,
    rng: &mut SeededRng,
) -> Result<(f64, ParamSet)> {
    let nb = NoisedBatch::draw(sched, batch, Some(conditions), net.cond_dim(), Penalty::Absolute, rng)?;
    grad(net, params, &nb.inputs, &nb)
}

/// Squared noise-prediction error of every row of `x`, averaged over
/// `draws` independent corruptions. Lower means the row is fitted better.
pub fn example_losses<D: Denoiser>(
    net: &D,
    params: &ParamSet,
    sched: &NoiseSchedule,
    x: &Tensor,
    draws: usize,
    rng: &mut SeededRng,
) -> Result<Vec<f64>> {
    if draws == 0 {
        return Err(Error::invalid("at least one corruption per row is needed"));
    }
    let mut out = vec![0.0; x.rows()];
    let mut scratch = vec![0.0; x.cols()];
    for _ in 0..draws {
        let nb = NoisedBatch::draw(sched, x, None, net.cond_dim(), Penalty::Squared, rng)?;
        let y = net.forward(params, &nb.inputs)?;
        for (r, o) in out.iter_mut().enumerate() {
            *o += nb.row_loss(r, y.row(r), &mut scratch);
        }
    }
    for o in &mut out {
        *o /= draws as f64;
    }
    Ok(out)
}
