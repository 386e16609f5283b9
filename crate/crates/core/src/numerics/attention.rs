//! Pre-norm multi-head self-attention blocks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::layers::{activate, activate_backward, gemm, Activation, LayerNorm, LayerNormCache, Linear};
use crate::numerics::{ParamSet, SeededRng};

/// Shape of an attention stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    /// Hidden width of the feed-forward sublayer as a multiple of `width`.
    pub ff_mult: usize,
    pub activation: Activation,
}

impl AttentionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.ff_mult == 0 {
            return Err(Error::invalid("attention width, heads and ff_mult must be positive"));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "head count {} does not divide width {}",
                self.heads, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct BlockCache {
    ln1: LayerNormCache,
    h1: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    attended: Vec<f64>,
    ln2: LayerNormCache,
    h2: Vec<f64>,
    ff_pre: Vec<f64>,
    ff_act: Vec<f64>,
}

/// A stack of transformer blocks followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct AttentionStack {
    spec: AttentionSpec,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
}

/// Saved activations for [`AttentionStack::backward`].
#[derive(Clone, Debug)]
pub struct AttentionCache {
    batch: usize,
    tokens: usize,
    blocks: Vec<BlockCache>,
    final_ln: LayerNormCache,
}

impl AttentionStack {
    pub fn register(spec: AttentionSpec, params: &mut ParamSet, prefix: &str, rng: &mut SeededRng) -> Result<Self> {
        spec.validate()?;
        let k = spec.width;
        let hidden = k * spec.ff_mult;
        let blocks = (0..spec.layers)
            .map(|i| {
                let p = format!("{prefix}.block{i}");
                Block {
                    ln1: LayerNorm::register(params, &format!("{p}.ln1"), k),
                    qkv: Linear::register(params, &format!("{p}.qkv"), k, 3 * k, rng),
                    proj: Linear::register(params, &format!("{p}.proj"), k, k, rng),
                    ln2: LayerNorm::register(params, &format!("{p}.ln2"), k),
                    ff1: Linear::register(params, &format!("{p}.ff1"), k, hidden, rng),
                    ff2: Linear::register(params, &format!("{p}.ff2"), hidden, k, rng),
                }
            })
            .collect();
        let final_ln = LayerNorm::register(params, &format!("{prefix}.ln_f"), k);
        Ok(Self { spec, blocks, final_ln })
    }

    pub fn spec(&self) -> &AttentionSpec {
        &self.spec
    }

    /// `x` holds `batch` sequences of `tokens` rows of width `spec.width`.
    pub fn forward(&self, params: &ParamSet, x: &[f64], batch: usize, tokens: usize) -> (Vec<f64>, AttentionCache) {
        let mut h = x.to_vec();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, c) = self.block_forward(block, params, &h, batch, tokens);
            caches.push(c);
            h = y;
        }
        let (y, final_ln) = self.final_ln.forward(params, &h);
        (
            y,
            AttentionCache {
                batch,
                tokens,
                blocks: caches,
                final_ln,
            },
        )
    }

    pub fn backward(
        &self,
        params: &ParamSet,
        cache: &AttentionCache,
        grad_out: &[f64],
        grads: &mut ParamSet,
    ) -> Vec<f64> {
        let mut g = self.final_ln.backward(params, &cache.final_ln, grad_out, grads);
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            g = self.block_backward(block, params, bc, &g, cache.batch, cache.tokens, grads);
        }
        g
    }

    fn block_forward(
        &self,
        block: &Block,
        params: &ParamSet,
        x: &[f64],
        batch: usize,
        tokens: usize,
    ) -> (Vec<f64>, BlockCache) {
        let k = self.spec.width;
        let rows = batch * tokens;
        let (h1, ln1) = block.ln1.forward(params, x);
        let qkv = block.qkv.forward(params, &h1, rows);
        let (attended, probs) = self.attend(&qkv, batch, tokens);
        let a = block.proj.forward(params, &attended, rows);
        let x2: Vec<f64> = x.iter().zip(&a).map(|(u, v)| u + v).collect();
        let (h2, ln2) = block.ln2.forward(params, &x2);
        let ff_pre = block.ff1.forward(params, &h2, rows);
        let ff_act = activate(self.spec.activation, &ff_pre);
        let f = block.ff2.forward(params, &ff_act, rows);
        let y: Vec<f64> = x2.iter().zip(&f).map(|(u, v)| u + v).collect();
        debug_assert_eq!(y.len(), rows * k);
        (
            y,
            BlockCache {
                ln1,
                h1,
                qkv,
                probs,
                attended,
                ln2,
                h2,
                ff_pre,
                ff_act,
            },
        )
    }

    /// Scaled dot-product attention over each sequence and head.
    /// Returns the concatenated head outputs and the attention weights.
    fn attend(&self, qkv: &[f64], batch: usize, tokens: usize) -> (Vec<f64>, Vec<f64>) {
        let k = self.spec.width;
        let heads = self.spec.heads;
        let dh = k / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = tokens;
        let mut out = vec![0.0; batch * n * k];
        let mut probs = vec![0.0; batch * heads * n * n];
        let mut q = vec![0.0; n * dh];
        let mut kk = vec![0.0; n * dh];
        let mut v = vec![0.0; n * dh];
        let mut o = vec![0.0; n * dh];
        for b in 0..batch {
            for hd in 0..heads {
                gather_head(qkv, 3 * k, b, n, 0, hd, dh, &mut q);
                gather_head(qkv, 3 * k, b, n, k, hd, dh, &mut kk);
                gather_head(qkv, 3 * k, b, n, 2 * k, hd, dh, &mut v);
                let p = &mut probs[(b * heads + hd) * n * n..(b * heads + hd + 1) * n * n];
                gemm(n, dh, n, &q, false, &kk, true, p, false);
                for row in p.chunks_mut(n) {
                    let mut mx = f64::NEG_INFINITY;
                    for s in row.iter_mut() {
                        *s *= scale;
                        mx = mx.max(*s);
                    }
                    let mut z = 0.0;
                    for s in row.iter_mut() {
                        *s = (*s - mx).exp();
                        z += *s;
                    }
                    row.iter_mut().for_each(|s| *s /= z);
                }
                gemm(n, n, dh, p, false, &v, false, &mut o, false);
                for t in 0..n {
                    let dst = (b * n + t) * k + hd * dh;
                    out[dst..dst + dh].copy_from_slice(&o[t * dh..(t + 1) * dh]);
                }
            }
        }
        (out, probs)
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward(
        &self,
        block: &Block,
        params: &ParamSet,
        c: &BlockCache,
        grad_y: &[f64],
        batch: usize,
        tokens: usize,
        grads: &mut ParamSet,
    ) -> Vec<f64> {
        let k = self.spec.width;
        let rows = batch * tokens;
        // y = x2 + ff2(act(ff1(ln2(x2))))
        let mut g_act = block.ff2.backward(params, &c.ff_act, grad_y, rows, grads, true);
        activate_backward(self.spec.activation, &c.ff_pre, &mut g_act);
        let g_h2 = block.ff1.backward(params, &c.h2, &g_act, rows, grads, true);
        let g_ln2 = block.ln2.backward(params, &c.ln2, &g_h2, grads);
        let g_x2: Vec<f64> = grad_y.iter().zip(&g_ln2).map(|(a, b)| a + b).collect();
        // x2 = x + proj(attend(qkv(ln1(x))))
        let g_att = block.proj.backward(params, &c.attended, &g_x2, rows, grads, true);
        let g_qkv = self.attend_backward(&c.qkv, &c.probs, &g_att, batch, tokens);
        let g_h1 = block.qkv.backward(params, &c.h1, &g_qkv, rows, grads, true);
        let g_ln1 = block.ln1.backward(params, &c.ln1, &g_h1, grads);
        debug_assert_eq!(g_ln1.len(), rows * k);
        g_x2.iter().zip(&g_ln1).map(|(a, b)| a + b).collect()
    }

    fn attend_backward(&self, qkv: &[f64], probs: &[f64], grad_out: &[f64], batch: usize, tokens: usize) -> Vec<f64> {
        let k = self.spec.width;
        let heads = self.spec.heads;
        let dh = k / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = tokens;
        let mut g_qkv = vec![0.0; qkv.len()];
        let mut q = vec![0.0; n * dh];
        let mut kk = vec![0.0; n * dh];
        let mut v = vec![0.0; n * dh];
        let mut go = vec![0.0; n * dh];
        let mut gp = vec![0.0; n * n];
        let mut gq = vec![0.0; n * dh];
        let mut gk = vec![0.0; n * dh];
        let mut gv = vec![0.0; n * dh];
        for b in 0..batch {
            for hd in 0..heads {
                gather_head(qkv, 3 * k, b, n, 0, hd, dh, &mut q);
                gather_head(qkv, 3 * k, b, n, k, hd, dh, &mut kk);
                gather_head(qkv, 3 * k, b, n, 2 * k, hd, dh, &mut v);
                gather_head(grad_out, k, b, n, 0, hd, dh, &mut go);
                let p = &probs[(b * heads + hd) * n * n..(b * heads + hd + 1) * n * n];
                // O = P·V
                gemm(n, dh, n, &go, false, &v, true, &mut gp, false);
                gemm(n, n, dh, p, true, &go, false, &mut gv, false);
                // softmax, then the 1/sqrt(dh) scale
                for (grow, prow) in gp.chunks_mut(n).zip(p.chunks(n)) {
                    let dot: f64 = grow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    for (g, &pv) in grow.iter_mut().zip(prow) {
                        *g = pv * (*g - dot) * scale;
                    }
                }
                // S = Q·Kᵀ
                gemm(n, n, dh, &gp, false, &kk, false, &mut gq, false);
                gemm(n, n, dh, &gp, true, &q, false, &mut gk, false);
                scatter_head(&mut g_qkv, b, n, k, 0, hd, dh, &gq);
                scatter_head(&mut g_qkv, b, n, k, k, hd, dh, &gk);
                scatter_head(&mut g_qkv, b, n, k, 2 * k, hd, dh, &gv);
            }
        }
        g_qkv
    }
}

#[allow(clippy::too_many_arguments)]
fn gather_head(src: &[f64], row_w: usize, b: usize, n: usize, offset: usize, hd: usize, dh: usize, dst: &mut [f64]) {
    for t in 0..n {
        let s = (b * n + t) * row_w + offset + hd * dh;
        dst[t * dh..(t + 1) * dh].copy_from_slice(&src[s..s + dh]);
    }
}

#[allow(clippy::too_many_arguments)]
fn scatter_head(dst: &mut [f64], b: usize, n: usize, k: usize, offset: usize, hd: usize, dh: usize, src: &[f64]) {
    let row_w = 3 * k;
    for t in 0..n {
        let d = (b * n + t) * row_w + offset + hd * dh;
        dst[d..d + dh].copy_from_slice(&src[t * dh..(t + 1) * dh]);
    }
}
