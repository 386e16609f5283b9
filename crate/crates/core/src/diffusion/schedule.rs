//! Forward-process noise schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Which denominator the reverse-step mean uses.
///
/// The standard ancestral step is
/// `μ = (x_t − β_t/√(1−ᾱ_t)·ε̂) / √α_t`. `Literal` replaces `√(1−ᾱ_t)` with
/// `√(1−β_t)`, which does not converge to the data distribution in general
/// and is kept only for comparison runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeanForm {
    #[default]
    Standard,
    Literal,
}

/// Linear-β noise schedule with cached products.
///
/// Step `t` runs from 1 to `steps`; vectors are stored at index `t − 1`.
/// `ᾱ_0` is taken to be 1.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta_min: f64,
    beta_max: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
    /// Denoiser timestep queried at each schedule step (identity unless
    /// the schedule was respaced).
    model_steps: Vec<usize>,
    mean_form: MeanForm,
}

impl NoiseSchedule {
    /// Linear ramp of `steps` values from `beta_min` to `beta_max`.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas(beta_min, beta_max, betas, (1..=steps).collect()))
    }

    /// Linear schedule whose β range is scaled with `steps` so that the
    /// total corruption matches a 1000-step `[1e-4, 0.02]` ramp.
    pub fn scaled_linear(steps: usize) -> Result<Self> {
        let scale = 1000.0 / steps.max(1) as f64;
        let beta_max = (0.02 * scale).min(0.999);
        let beta_min = (1e-4 * scale).min(beta_max);
        Self::linear(steps, beta_min, beta_max)
    }

    fn from_betas(beta_min: f64, beta_max: f64, betas: Vec<f64>, model_steps: Vec<usize>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = betas.iter().map(|b| b.sqrt()).collect();
        Self {
            beta_min,
            beta_max,
            betas,
            alphas,
            alpha_bars,
            sigmas,
            model_steps,
            mean_form: MeanForm::Standard,
        }
    }

    pub fn with_mean_form(mut self, form: MeanForm) -> Self {
        self.mean_form = form;
        self
    }

    pub fn mean_form(&self) -> MeanForm {
        self.mean_form
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_min, self.beta_max)
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange { t, steps: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    /// Timestep fed to the denoiser at schedule step `t`.
    pub fn model_step(&self, t: usize) -> usize {
        self.model_steps[t - 1]
    }

    /// Coefficient multiplying the predicted noise in the reverse-step mean.
    pub fn noise_coeff(&self, t: usize) -> f64 {
        let beta = self.beta(t);
        match self.mean_form {
            MeanForm::Standard => beta / (1.0 - self.alpha_bar(t)).sqrt(),
            MeanForm::Literal => beta / (1.0 - beta).sqrt(),
        }
    }

    /// A shorter schedule visiting `count` evenly spaced timesteps of this
    /// one, with β recomputed so the retained `ᾱ` values are unchanged.
    pub fn respaced(&self, count: usize) -> Result<Self> {
        let steps = self.steps();
        if count == 0 || count > steps {
            return Err(Error::invalid(format!("respacing to {count} of {steps} steps")));
        }
        let kept: Vec<usize> = (1..=count)
            .map(|i| ((i * steps) as f64 / count as f64).round() as usize)
            .map(|t| t.clamp(1, steps))
            .collect();
        let mut betas = Vec::with_capacity(count);
        let mut prev = 1.0;
        for &t in &kept {
            let ab = self.alpha_bar(t);
            betas.push((1.0 - ab / prev).clamp(1e-12, 0.999_999));
            prev = ab;
        }
        let model_steps = kept.iter().map(|&t| self.model_step(t)).collect();
        Ok(Self::from_betas(self.beta_min, self.beta_max, betas, model_steps).with_mean_form(self.mean_form))
    }
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·e`. `t = 0` returns `x0` unchanged.
pub fn noise_data(x0: &Tensor, t: usize, noise: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if x0.shape() != noise.shape() {
        return Err(Error::shape(format!(
            "data {:?} and noise {:?}",
            x0.shape(),
            noise.shape()
        )));
    }
    if t == 0 {
        return Ok(x0.clone());
    }
    schedule.check(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data().iter().zip(noise.data()).map(|(x, e)| a * x + b * e).collect();
    Tensor::new(x0.shape().to_vec(), data)
}

impl NoiseSchedule {
    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        self.check(t)
    }
}
