//! Noise-prediction networks.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{MlpCache, MlpLayout, Network, NetworkSpec, ParamSet, SeededRng, Tensor};

/// A network predicting the injected noise.
///
/// Input rows are packed as `[x_t (data_dim) | condition (cond_dim) | t]`
/// where `t` is the integer timestep stored as a float. The output has
/// `data_dim` columns.
pub trait Denoiser: Network {
    fn data_dim(&self) -> usize;
    fn cond_dim(&self) -> usize;
    /// Number of timesteps the network was built for.
    fn steps(&self) -> usize;
}

/// Packs `x`, optional per-row conditions and a timestep per row into
/// denoiser input rows.
pub fn pack_inputs(x: &Tensor, cond: Option<&Tensor>, t: &[usize], cond_dim: usize) -> Result<Tensor> {
    let rows = x.rows();
    if t.len() != rows {
        return Err(Error::shape(format!("{} timesteps for {rows} rows", t.len())));
    }
    let data_dim = x.cols();
    let c = match cond {
        Some(c) => {
            if c.cols() != cond_dim || (c.rows() != rows && c.rows() != 1) {
                return Err(Error::shape(format!(
                    "condition {:?} for {rows} rows of width {cond_dim}",
                    c.shape()
                )));
            }
            Some(c)
        }
        None if cond_dim > 0 => {
            return Err(Error::shape(format!("missing condition of width {cond_dim}")));
        }
        None => None,
    };
    let width = data_dim + cond_dim + 1;
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        out.extend_from_slice(x.row(r));
        if let Some(c) = c {
            out.extend_from_slice(c.row(if c.rows() == 1 { 0 } else { r }));
        }
        out.push(t[r] as f64);
    }
    Tensor::matrix(rows, width, out)
}

/// Shape of an [`MlpDenoiser`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpDenoiserSpec {
    pub data_dim: usize,
    pub cond_dim: usize,
    pub steps: usize,
    pub width: usize,
    pub depth: usize,
    /// Length of the random Fourier time embedding (even).
    pub time_features: usize,
}

impl MlpDenoiserSpec {
    pub fn new(data_dim: usize, steps: usize) -> Self {
        Self {
            data_dim,
            cond_dim: 0,
            steps,
            width: 128,
            depth: 4,
            time_features: 16,
        }
    }
}

/// MLP denoiser fed with random Fourier features of `t / T`.
///
/// The feature frequencies are drawn once at construction and kept fixed.
#[derive(Clone, Debug)]
pub struct MlpDenoiser {
    spec: MlpDenoiserSpec,
    freqs: Vec<f64>,
    mlp: MlpLayout,
}

/// Forward state of an [`MlpDenoiser`].
pub struct MlpDenoiserCache(MlpCache);

const FREQ_SCALE: f64 = 4.0;

impl MlpDenoiser {
    pub fn new(spec: MlpDenoiserSpec, params: &mut ParamSet, rng: &mut SeededRng) -> Result<Self> {
        if !spec.time_features.is_multiple_of(2) || spec.steps == 0 || spec.data_dim == 0 {
            return Err(Error::invalid(format!("bad denoiser shape {spec:?}")));
        }
        let mut freqs = vec![0.0; spec.time_features / 2];
        rng.fill_normal(&mut freqs, FREQ_SCALE);
        Self::with_freqs(spec, freqs, params, rng)
    }

    /// Rebuilds a denoiser around stored frequencies.
    pub fn with_freqs(
        spec: MlpDenoiserSpec,
        freqs: Vec<f64>,
        params: &mut ParamSet,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if freqs.len() * 2 != spec.time_features {
            return Err(Error::shape(format!(
                "{} frequencies for {} time features",
                freqs.len(),
                spec.time_features
            )));
        }
        let net = NetworkSpec::uniform(
            spec.data_dim + spec.cond_dim + spec.time_features,
            spec.width,
            spec.depth,
            spec.data_dim,
        );
        let mlp = MlpLayout::register(net, params, "denoiser", rng)?;
        Ok(Self { spec, freqs, mlp })
    }

    pub fn spec(&self) -> &MlpDenoiserSpec {
        &self.spec
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    fn expand(&self, input: &Tensor) -> Vec<f64> {
        let lead = self.spec.data_dim + self.spec.cond_dim;
        let width = lead + self.spec.time_features;
        let rows = input.rows();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            let row = input.row(r);
            out.extend_from_slice(&row[..lead]);
            let u = row[lead] / self.spec.steps as f64;
            for f in &self.freqs {
                out.push((TAU * f * u).sin());
            }
            for f in &self.freqs {
                out.push((TAU * f * u).cos());
            }
        }
        out
    }
}

impl Network for MlpDenoiser {
    type Cache = MlpDenoiserCache;

    fn input_dim(&self) -> usize {
        self.spec.data_dim + self.spec.cond_dim + 1
    }

    fn output_dim(&self) -> usize {
        self.spec.data_dim
    }

    fn forward_cached(&self, params: &ParamSet, input: &Tensor) -> Result<(Tensor, Self::Cache)> {
        self.check_input(input)?;
        let rows = input.rows();
        let (y, cache) = self.mlp.forward_rows(params, &self.expand(input), rows);
        Ok((Tensor::matrix(rows, self.spec.data_dim, y)?, MlpDenoiserCache(cache)))
    }

    fn backward(
        &self,
        params: &ParamSet,
        cache: &Self::Cache,
        grad_output: &Tensor,
        grads: &mut ParamSet,
    ) -> Result<()> {
        self.mlp
            .backward_rows(params, &cache.0, grad_output.data(), grads, false);
        Ok(())
    }
}

impl Denoiser for MlpDenoiser {
    fn data_dim(&self) -> usize {
        self.spec.data_dim
    }

    fn cond_dim(&self) -> usize {
        self.spec.cond_dim
    }

    fn steps(&self) -> usize {
        self.spec.steps
    }
}
