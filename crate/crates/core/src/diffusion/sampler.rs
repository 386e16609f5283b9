//! Ancestral sampling.

use rayon::prelude::*;

use crate::diffusion::{pack_inputs, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, SeededRng, Tensor};

/// Rows generated per independent random stream in [`sample`].
pub const SAMPLE_CHUNK: usize = 256;

/// One reverse step from `x_t` to `x_{t−1}`.
///
/// `μ = (x_t − k_t·e_θ(x_t, t)) / √α_t`, followed by `σ_t·e` except at
/// `t = 1`, where the step is deterministic.
pub fn sample_step<D: Denoiser>(
    net: &D,
    params: &ParamSet,
    x_t: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
    cond: Option<&Tensor>,
) -> Result<Tensor> {
    sched.check_step(t)?;
    if x_t.cols() != net.data_dim() {
        return Err(Error::shape(format!(
            "state width {} for denoiser of width {}",
            x_t.cols(),
            net.data_dim()
        )));
    }
    let rows = x_t.rows();
    if rows == 0 {
        return Ok(x_t.clone());
    }
    let steps = vec![sched.model_step(t); rows];
    let eps = net.forward(params, &pack_inputs(x_t, cond, &steps, net.cond_dim())?)?;
    let k = sched.noise_coeff(t);
    let inv = 1.0 / sched.alpha(t).sqrt();
    let sigma = if t == 1 { 0.0 } else { sched.sigma(t) };
    let mut out = Tensor::zeros(x_t.shape());
    for ((o, x), e) in out.data_mut().iter_mut().zip(x_t.data()).zip(eps.data()) {
        *o = inv * (x - k * e);
    }
    if sigma > 0.0 {
        for o in out.data_mut() {
            *o += sigma * rng.normal();
        }
    }
    Ok(out)
}

fn rollout<D: Denoiser>(
    net: &D,
    params: &ParamSet,
    sched: &NoiseSchedule,
    rows: usize,
    rng: &mut SeededRng,
    cond: Option<&Tensor>,
) -> Result<Tensor> {
    let mut x = Tensor::zeros(&[rows, net.data_dim()]);
    rng.fill_normal(x.data_mut(), 1.0);
    for t in (1..=sched.steps()).rev() {
        x = sample_step(net, params, &x, t, sched, rng, cond)?;
    }
    Ok(x)
}

/// Draws `n` samples, each denoised from fresh Gaussian noise over every
/// step of `sched`.
///
/// `cond` holds either one row shared by all samples or one row per sample.
/// Rows are produced in chunks of [`SAMPLE_CHUNK`], chunk `c` using stream
/// `c` derived from a seed drawn from `rng`; the result does not depend on
/// the number of worker threads.
pub fn sample<D: Denoiser>(
    net: &D,
    params: &ParamSet,
    sched: &NoiseSchedule,
    n: usize,
    rng: &mut SeededRng,
    cond: Option<&Tensor>,
) -> Result<Tensor> {
    let dim = net.data_dim();
    if let Some(c) = cond {
        if c.rows() != 1 && c.rows() != n {
            return Err(Error::shape(format!("{} conditions for {n} samples", c.rows())));
        }
    }
    let base = SeededRng::new(rng.next_u64());
    if n == 0 {
        return Ok(Tensor::zeros(&[0, dim]));
    }
    let chunks = n.div_ceil(SAMPLE_CHUNK);
    let parts: Vec<Tensor> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * SAMPLE_CHUNK;
            let hi = (lo + SAMPLE_CHUNK).min(n);
            let chunk_cond = cond.map(|t| {
                if t.rows() == 1 {
                    t.clone()
                } else {
                    t.select_rows(&(lo..hi).collect::<Vec<_>>())
                }
            });
            let mut stream = base.derive(c as u64);
            rollout(net, params, sched, hi - lo, &mut stream, chunk_cond.as_ref())
        })
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(n * dim);
    for p in parts {
        data.extend(p.into_data());
    }
    Tensor::matrix(n, dim, data)
}
