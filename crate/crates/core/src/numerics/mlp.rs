//! Feed-forward networks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::layers::{activate, activate_backward, Activation, Linear};
use crate::numerics::{Network, ParamSet, SeededRng, Tensor};

/// Architecture of a multi-layer perceptron.
///
/// `hidden` lists hidden-layer widths; the network has `hidden.len() + 1`
/// affine layers. With `skip`, a hidden layer whose input and output widths
/// agree adds its input back (`h + act(W·h + b)`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub skip: bool,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize, activation: Activation, skip: bool) -> Self {
        Self {
            input_dim,
            hidden,
            output_dim,
            activation,
            skip,
        }
    }

    /// `depth` affine layers, all hidden layers `width` wide.
    pub fn uniform(input_dim: usize, width: usize, depth: usize, output_dim: usize) -> Self {
        let hidden = vec![width; depth.saturating_sub(1)];
        Self::new(input_dim, hidden, output_dim, Activation::Silu, true)
    }

    pub fn depth(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::invalid(format!("layer widths must be positive: {self:?}")));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden);
        w.push(self.output_dim);
        w
    }
}

/// An MLP whose parameters live inside a shared [`ParamSet`].
#[derive(Clone, Debug)]
pub struct MlpLayout {
    spec: NetworkSpec,
    layers: Vec<Linear>,
}

/// Activations saved by [`MlpLayout::forward_rows`].
#[derive(Clone, Debug)]
pub struct MlpCache {
    rows: usize,
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl MlpLayout {
    pub fn register(spec: NetworkSpec, params: &mut ParamSet, prefix: &str, rng: &mut SeededRng) -> Result<Self> {
        spec.validate()?;
        let widths = spec.widths();
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::register(params, &format!("{prefix}.l{i}"), w[0], w[1], rng))
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    fn is_residual(&self, i: usize) -> bool {
        let l = &self.layers[i];
        self.spec.skip && i > 0 && i + 1 < self.layers.len() && l.fan_in == l.fan_out
    }

    pub fn forward_rows(&self, params: &ParamSet, x: &[f64], rows: usize) -> (Vec<f64>, MlpCache) {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(params, &h, rows);
            let next = if i == last {
                z.clone()
            } else {
                let mut a = activate(self.spec.activation, &z);
                if self.is_residual(i) {
                    for (v, r) in a.iter_mut().zip(&h) {
                        *v += r;
                    }
                }
                a
            };
            inputs.push(h);
            pre.push(z);
            h = next;
        }
        (h, MlpCache { rows, inputs, pre })
    }

    /// Reverse pass. Returns `dL/dx` when `need_input_grad`.
    pub fn backward_rows(
        &self,
        params: &ParamSet,
        cache: &MlpCache,
        grad_out: &[f64],
        grads: &mut ParamSet,
        need_input_grad: bool,
    ) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut g = grad_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let residual = if self.is_residual(i) { Some(g.clone()) } else { None };
            if i != last {
                activate_backward(self.spec.activation, &cache.pre[i], &mut g);
            }
            let need = i > 0 || need_input_grad;
            let mut gx = self.layers[i].backward(params, &cache.inputs[i], &g, cache.rows, grads, need);
            if let Some(r) = residual {
                for (a, b) in gx.iter_mut().zip(&r) {
                    *a += b;
                }
            }
            g = gx;
        }
        g
    }
}

impl Network for MlpLayout {
    type Cache = MlpCache;

    fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    fn forward_cached(&self, params: &ParamSet, input: &Tensor) -> Result<(Tensor, MlpCache)> {
        self.check_input(input)?;
        let rows = input.rows();
        let (y, cache) = self.forward_rows(params, input.data(), rows);
        Ok((Tensor::matrix(rows, self.spec.output_dim, y)?, cache))
    }

    fn backward(&self, params: &ParamSet, cache: &MlpCache, grad_output: &Tensor, grads: &mut ParamSet) -> Result<()> {
        self.backward_rows(params, cache, grad_output.data(), grads, false);
        Ok(())
    }
}

/// A standalone MLP owning its parameters.
#[derive(Clone, Debug)]
pub struct Mlp {
    layout: MlpLayout,
    params: ParamSet,
}

impl Mlp {
    pub fn new(spec: NetworkSpec, rng: &mut SeededRng) -> Result<Self> {
        let mut params = ParamSet::new();
        let layout = MlpLayout::register(spec, &mut params, "net", rng)?;
        Ok(Self { layout, params })
    }

    pub fn from_parts(layout: MlpLayout, params: ParamSet) -> Self {
        Self { layout, params }
    }

    pub fn layout(&self) -> &MlpLayout {
        &self.layout
    }

    pub fn spec(&self) -> &NetworkSpec {
        self.layout.spec()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.layout.forward(&self.params, batch)
    }

    /// Makes a single-layer square network compute the identity map.
    pub fn set_identity_single_layer(&mut self) {
        let l = self.layout.layers[0];
        let n = l.fan_in.min(l.fan_out);
        let w = self.params.at_mut(l.weight);
        w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            w.data_mut()[i * l.fan_out + i] = 1.0;
        }
        self.params.at_mut(l.bias).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}
