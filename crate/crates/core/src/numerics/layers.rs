//! Layer primitives with hand-written forward and reverse passes.
//!
//! Every layer works on row matrices (`[rows, width]`). Parameters live in a
//! [`ParamSet`]; a layer only remembers the slot indices of its tensors, so a
//! gradient set built with [`ParamSet::zeros_like`] is addressed the same way.

use serde::{Deserialize, Serialize};

use crate::numerics::{ParamSet, SeededRng, Tensor};

/// `c = a·b` (or `c += a·b` when `accumulate`), with optional transposes.
///
/// Shapes are those of the logical operands: `op(a)` is `m×k`, `op(b)` is
/// `k×n`, `c` is `m×n`, all row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above describe `a`, `b` and `c` exactly; the
    // debug assertions check the buffer lengths.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Silu,
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
        }
    }

    /// Derivative evaluated at the pre-activation value.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "identity" | "linear" => Some(Activation::Identity),
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            "silu" | "swish" => Some(Activation::Silu),
            "gelu" => Some(Activation::Gelu),
            _ => None,
        }
    }
}

/// Applies `act` to `pre`, returning the activated copy.
pub fn activate(act: Activation, pre: &[f64]) -> Vec<f64> {
    pre.iter().map(|&v| act.apply(v)).collect()
}

/// Multiplies `grad` in place by `act'(pre)`.
pub fn activate_backward(act: Activation, pre: &[f64], grad: &mut [f64]) {
    if act == Activation::Identity {
        return;
    }
    for (g, &x) in grad.iter_mut().zip(pre) {
        *g *= act.derivative(x);
    }
}

/// Affine map `y = x·W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Registers a uniformly initialised layer (`±1/sqrt(fan_in)`).
    pub fn register(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut w = Tensor::zeros(&[fan_in, fan_out]);
        for v in w.data_mut() {
            *v = bound * (2.0 * rng.uniform() - 1.0);
        }
        let mut b = Tensor::zeros(&[fan_out]);
        for v in b.data_mut() {
            *v = bound * (2.0 * rng.uniform() - 1.0);
        }
        let weight = params.push(format!("{name}.weight"), w);
        let bias = params.push(format!("{name}.bias"), b);
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, params: &ParamSet, x: &[f64], rows: usize) -> Vec<f64> {
        let mut y = vec![0.0; rows * self.fan_out];
        let b = params.at(self.bias).data();
        for row in y.chunks_mut(self.fan_out) {
            row.copy_from_slice(b);
        }
        gemm(
            rows,
            self.fan_in,
            self.fan_out,
            x,
            false,
            params.at(self.weight).data(),
            false,
            &mut y,
            true,
        );
        y
    }

    /// Accumulates weight and bias gradients and returns `dL/dx`.
    pub fn backward(
        &self,
        params: &ParamSet,
        x: &[f64],
        grad_y: &[f64],
        rows: usize,
        grads: &mut ParamSet,
        need_input_grad: bool,
    ) -> Vec<f64> {
        gemm(
            self.fan_in,
            rows,
            self.fan_out,
            x,
            true,
            grad_y,
            false,
            grads.at_mut(self.weight).data_mut(),
            true,
        );
        let gb = grads.at_mut(self.bias).data_mut();
        for row in grad_y.chunks(self.fan_out) {
            for (g, v) in gb.iter_mut().zip(row) {
                *g += v;
            }
        }
        if !need_input_grad {
            return Vec::new();
        }
        let mut gx = vec![0.0; rows * self.fan_in];
        gemm(
            rows,
            self.fan_out,
            self.fan_in,
            grad_y,
            false,
            params.at(self.weight).data(),
            true,
            &mut gx,
            false,
        );
        gx
    }
}

/// Per-row layer normalisation with learned gain and bias.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: usize,
    pub bias: usize,
    pub width: usize,
}

const LN_EPS: f64 = 1e-5;

/// Saved statistics for the layer-norm reverse pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn register(params: &mut ParamSet, name: &str, width: usize) -> Self {
        let gain = params.push(format!("{name}.gain"), Tensor::filled(&[width], 1.0));
        let bias = params.push(format!("{name}.bias"), Tensor::zeros(&[width]));
        Self { gain, bias, width }
    }

    pub fn forward(&self, params: &ParamSet, x: &[f64]) -> (Vec<f64>, LayerNormCache) {
        let g = params.at(self.gain).data();
        let b = params.at(self.bias).data();
        let w = self.width;
        let rows = x.len() / w;
        let mut y = vec![0.0; x.len()];
        let mut normalized = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let xr = &x[r * w..(r + 1) * w];
            let mean = xr.iter().sum::<f64>() / w as f64;
            let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..w {
                let n = (xr[j] - mean) * is;
                normalized[r * w + j] = n;
                y[r * w + j] = g[j] * n + b[j];
            }
        }
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(
        &self,
        params: &ParamSet,
        cache: &LayerNormCache,
        grad_y: &[f64],
        grads: &mut ParamSet,
    ) -> Vec<f64> {
        let w = self.width;
        let rows = grad_y.len() / w;
        let g = params.at(self.gain).data();
        {
            let gg = grads.at_mut(self.gain).data_mut();
            for r in 0..rows {
                for j in 0..w {
                    gg[j] += grad_y[r * w + j] * cache.normalized[r * w + j];
                }
            }
        }
        {
            let gb = grads.at_mut(self.bias).data_mut();
            for row in grad_y.chunks(w) {
                for (a, v) in gb.iter_mut().zip(row) {
                    *a += v;
                }
            }
        }
        let mut gx = vec![0.0; grad_y.len()];
        let mut dn = vec![0.0; w];
        for r in 0..rows {
            let nr = &cache.normalized[r * w..(r + 1) * w];
            for j in 0..w {
                dn[j] = grad_y[r * w + j] * g[j];
            }
            let mean_dn = dn.iter().sum::<f64>() / w as f64;
            let mean_dn_n = dn.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
            let is = cache.inv_std[r];
            for j in 0..w {
                gx[r * w + j] = is * (dn[j] - mean_dn - nr[j] * mean_dn_n);
            }
        }
        gx
    }
}
