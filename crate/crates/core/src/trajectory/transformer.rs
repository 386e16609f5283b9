//! A transformer noise predictor over fragment tokens.
//!
//! Each packed input row `[x_t (H·W) | link (W) | t]` becomes `5·H + 6`
//! tokens of width `k`: one for the timestep, five for the link transition,
//! then one per component (`s, a, r, s′, d`) of every noisy transition. Only
//! the component-token outputs are decoded back into a fragment-shaped noise
//! prediction.

use serde::{Deserialize, Serialize};

use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::numerics::{
    Activation, AttentionCache, AttentionSpec, AttentionStack, MlpCache, MlpLayout, Network, NetworkSpec, ParamSet,
    SeededRng, Tensor,
};
use crate::transition::Schema;

/// Number of transition components, and of link tokens.
pub const COMPONENTS: usize = 5;
const LEAD: usize = 1 + COMPONENTS;
const COMPONENT_NAMES: [&str; COMPONENTS] = ["state", "action", "reward", "next_state", "terminal"];

/// Tokens produced for a fragment of `horizon` transitions.
pub fn token_count(horizon: usize) -> usize {
    COMPONENTS * horizon + LEAD
}

/// Sinusoidal code of `pos`: `sin(pos/10000^(2j/k))` at `2j`, the cosine at
/// `2j+1`.
pub fn sinusoid(pos: f64, k: usize) -> Vec<f64> {
    (0..k)
        .map(|d| {
            let j = (d / 2) as f64;
            let angle = pos / 10_000f64.powf(2.0 * j / k as f64);
            if d % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Fixed positional code of token `i`.
pub fn positional_embedding(i: usize, k: usize) -> Vec<f64> {
    sinusoid(i as f64, k)
}

/// Token vectors of one input, `[tokens, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.cols()
    }
}

/// Adds the positional code of each index to its token.
pub fn add_positional(seq: &TokenSequence) -> TokenSequence {
    let k = seq.width();
    let mut tokens = seq.tokens.clone();
    for i in 0..tokens.rows() {
        for (v, p) in tokens.row_mut(i).iter_mut().zip(positional_embedding(i, k)) {
            *v += p;
        }
    }
    TokenSequence { tokens }
}

/// Shape of a [`TransformerDenoiser`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerSpec {
    pub horizon: usize,
    /// Encoded widths of `s, a, r, s′, d`.
    pub components: [usize; COMPONENTS],
    /// Token width `k`.
    pub embed: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_mult: usize,
    pub steps: usize,
    pub activation: Activation,
}

impl TransformerSpec {
    /// Defaults for the encoded layout of `schema`.
    pub fn new(schema: &Schema, horizon: usize, steps: usize) -> Self {
        Self {
            horizon,
            components: schema.encoded_components().map(|r| r.len()),
            embed: 32,
            heads: 4,
            layers: 3,
            ff_mult: 4,
            steps,
            activation: Activation::Silu,
        }
    }

    /// Encoded width of one transition.
    pub fn width(&self) -> usize {
        self.components.iter().sum()
    }

    pub fn tokens(&self) -> usize {
        token_count(self.horizon)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.steps == 0 {
            return Err(Error::invalid("horizon and step count must be positive"));
        }
        if self.embed == 0 || !self.embed.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "token width must be even and positive, got {}",
                self.embed
            )));
        }
        if self.components.contains(&0) {
            return Err(Error::invalid("every transition component needs at least one column"));
        }
        Ok(())
    }

    fn attention(&self) -> AttentionSpec {
        AttentionSpec {
            width: self.embed,
            heads: self.heads,
            layers: self.layers,
            ff_mult: self.ff_mult,
            activation: self.activation,
        }
    }
}

/// Transformer noise predictor for fragments conditioned on a link.
#[derive(Clone, Debug)]
pub struct TransformerDenoiser {
    spec: TransformerSpec,
    offsets: [usize; COMPONENTS],
    time: MlpLayout,
    cond: MlpLayout,
    embed: Vec<MlpLayout>,
    stack: AttentionStack,
    decode: Vec<MlpLayout>,
    positions: Vec<f64>,
}

/// Forward state of a [`TransformerDenoiser`].
pub struct TransformerCache {
    batch: usize,
    time: MlpCache,
    cond: MlpCache,
    embed: Vec<MlpCache>,
    attn: AttentionCache,
    decode: Vec<MlpCache>,
}

impl TransformerDenoiser {
    pub fn new(spec: TransformerSpec, params: &mut ParamSet, rng: &mut SeededRng) -> Result<Self> {
        spec.validate()?;
        let k = spec.embed;
        let act = spec.activation;
        let two_layer = |i: usize, o: usize| NetworkSpec::new(i, vec![k], o, act, false);
        let time = MlpLayout::register(two_layer(k, k), params, "traj.time", rng)?;
        let cond = MlpLayout::register(two_layer(spec.width(), COMPONENTS * k), params, "traj.link", rng)?;
        let embed = (0..COMPONENTS)
            .map(|c| {
                let name = format!("traj.embed.{}", COMPONENT_NAMES[c]);
                MlpLayout::register(two_layer(spec.components[c], k), params, &name, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let stack = AttentionStack::register(spec.attention(), params, "traj.attn", rng)?;
        let decode = (0..COMPONENTS)
            .map(|c| {
                let name = format!("traj.decode.{}", COMPONENT_NAMES[c]);
                MlpLayout::register(two_layer(k, spec.components[c]), params, &name, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut offsets = [0; COMPONENTS];
        for c in 1..COMPONENTS {
            offsets[c] = offsets[c - 1] + spec.components[c - 1];
        }
        let positions = (0..spec.tokens()).flat_map(|i| positional_embedding(i, k)).collect();
        Ok(Self {
            spec,
            offsets,
            time,
            cond,
            embed,
            stack,
            decode,
            positions,
        })
    }

    pub fn spec(&self) -> &TransformerSpec {
        &self.spec
    }

    /// Zeroes the output layer of every decoder.
    pub fn zero_decoders(&self, params: &mut ParamSet) {
        for d in &self.decode {
            let last = d.layers().last().expect("decoder has layers");
            params.at_mut(last.weight).data_mut().fill(0.0);
            params.at_mut(last.bias).data_mut().fill(0.0);
        }
    }

    fn token_of(&self, p: usize, c: usize) -> usize {
        LEAD + COMPONENTS * p + c
    }

    /// Rows `(b, p)` of component `c` gathered from fragment-shaped data.
    fn gather_component(&self, src: &[f64], row_width: usize, batch: usize, c: usize) -> Vec<f64> {
        let (h, w, wc) = (self.spec.horizon, self.spec.width(), self.spec.components[c]);
        let mut out = Vec::with_capacity(batch * h * wc);
        for b in 0..batch {
            for p in 0..h {
                let at = b * row_width + p * w + self.offsets[c];
                out.extend_from_slice(&src[at..at + wc]);
            }
        }
        out
    }

    fn gather_token(&self, tokens: &[f64], batch: usize, c: usize) -> Vec<f64> {
        let (h, k, n) = (self.spec.horizon, self.spec.embed, self.spec.tokens());
        let mut out = Vec::with_capacity(batch * h * k);
        for b in 0..batch {
            for p in 0..h {
                let at = (b * n + self.token_of(p, c)) * k;
                out.extend_from_slice(&tokens[at..at + k]);
            }
        }
        out
    }

    fn scatter_token(&self, tokens: &mut [f64], src: &[f64], batch: usize, c: usize) {
        let (h, k, n) = (self.spec.horizon, self.spec.embed, self.spec.tokens());
        for b in 0..batch {
            for p in 0..h {
                let at = (b * n + self.token_of(p, c)) * k;
                let from = (b * h + p) * k;
                tokens[at..at + k].copy_from_slice(&src[from..from + k]);
            }
        }
    }

    /// Token vectors for every input row, before positional codes.
    fn embed_rows(&self, params: &ParamSet, input: &Tensor) -> (Vec<f64>, MlpCache, MlpCache, Vec<MlpCache>) {
        let batch = input.rows();
        let (k, n, w) = (self.spec.embed, self.spec.tokens(), self.spec.width());
        let data_dim = self.spec.horizon * w;
        let row_width = input.cols();

        let mut tin = Vec::with_capacity(batch * k);
        let mut cin = Vec::with_capacity(batch * w);
        for r in input.row_iter() {
            tin.extend(sinusoid(r[data_dim + w], k));
            cin.extend_from_slice(&r[data_dim..data_dim + w]);
        }
        let (temb, tcache) = self.time.forward_rows(params, &tin, batch);
        let (cemb, ccache) = self.cond.forward_rows(params, &cin, batch);

        let mut tokens = vec![0.0; batch * n * k];
        for b in 0..batch {
            let base = b * n * k;
            tokens[base..base + k].copy_from_slice(&temb[b * k..(b + 1) * k]);
            tokens[base + k..base + LEAD * k].copy_from_slice(&cemb[b * COMPONENTS * k..(b + 1) * COMPONENTS * k]);
        }
        let mut caches = Vec::with_capacity(COMPONENTS);
        for c in 0..COMPONENTS {
            let x = self.gather_component(input.data(), row_width, batch, c);
            let (e, cache) = self.embed[c].forward_rows(params, &x, batch * self.spec.horizon);
            self.scatter_token(&mut tokens, &e, batch, c);
            caches.push(cache);
        }
        (tokens, tcache, ccache, caches)
    }

    /// Token sequences of every input row, without positional codes.
    pub fn embed_inputs(&self, params: &ParamSet, input: &Tensor) -> Result<Vec<TokenSequence>> {
        self.check_input(input)?;
        let (tokens, ..) = self.embed_rows(params, input);
        let (n, k) = (self.spec.tokens(), self.spec.embed);
        tokens
            .chunks(n * k)
            .map(|t| {
                Ok(TokenSequence {
                    tokens: Tensor::matrix(n, k, t.to_vec())?,
                })
            })
            .collect()
    }
}

impl Network for TransformerDenoiser {
    type Cache = TransformerCache;

    fn input_dim(&self) -> usize {
        (self.spec.horizon + 1) * self.spec.width() + 1
    }

    fn output_dim(&self) -> usize {
        self.spec.horizon * self.spec.width()
    }

    fn forward_cached(&self, params: &ParamSet, input: &Tensor) -> Result<(Tensor, TransformerCache)> {
        self.check_input(input)?;
        let batch = input.rows();
        let (h, w, n) = (self.spec.horizon, self.spec.width(), self.spec.tokens());
        let (mut tokens, time, cond, embed) = self.embed_rows(params, input);
        for seq in tokens.chunks_mut(self.positions.len()) {
            for (v, p) in seq.iter_mut().zip(&self.positions) {
                *v += p;
            }
        }
        let (hidden, attn) = self.stack.forward(params, &tokens, batch, n);
        let mut out = Tensor::zeros(&[batch, h * w]);
        let mut decode = Vec::with_capacity(COMPONENTS);
        for c in 0..COMPONENTS {
            let z = self.gather_token(&hidden, batch, c);
            let (y, cache) = self.decode[c].forward_rows(params, &z, batch * h);
            let wc = self.spec.components[c];
            for b in 0..batch {
                let row = out.row_mut(b);
                for p in 0..h {
                    let at = p * w + self.offsets[c];
                    row[at..at + wc].copy_from_slice(&y[(b * h + p) * wc..(b * h + p + 1) * wc]);
                }
            }
            decode.push(cache);
        }
        Ok((
            out,
            TransformerCache {
                batch,
                time,
                cond,
                embed,
                attn,
                decode,
            },
        ))
    }

    fn backward(
        &self,
        params: &ParamSet,
        cache: &TransformerCache,
        grad_output: &Tensor,
        grads: &mut ParamSet,
    ) -> Result<()> {
        let batch = cache.batch;
        let (k, n) = (self.spec.embed, self.spec.tokens());
        if grad_output.shape() != [batch, self.output_dim()] {
            return Err(Error::shape("output gradient does not match the forward batch"));
        }
        let mut dtokens = vec![0.0; batch * n * k];
        for c in 0..COMPONENTS {
            let g = self.gather_component(grad_output.data(), self.output_dim(), batch, c);
            let dz = self.decode[c].backward_rows(params, &cache.decode[c], &g, grads, true);
            self.scatter_token(&mut dtokens, &dz, batch, c);
        }
        let din = self.stack.backward(params, &cache.attn, &dtokens, grads);

        let mut dt = Vec::with_capacity(batch * k);
        let mut dc = Vec::with_capacity(batch * COMPONENTS * k);
        for b in 0..batch {
            let base = b * n * k;
            dt.extend_from_slice(&din[base..base + k]);
            dc.extend_from_slice(&din[base + k..base + LEAD * k]);
        }
        self.time.backward_rows(params, &cache.time, &dt, grads, false);
        self.cond.backward_rows(params, &cache.cond, &dc, grads, false);
        for c in 0..COMPONENTS {
            let g = self.gather_token(&din, batch, c);
            self.embed[c].backward_rows(params, &cache.embed[c], &g, grads, false);
        }
        Ok(())
    }
}

impl Denoiser for TransformerDenoiser {
    fn data_dim(&self) -> usize {
        self.spec.horizon * self.spec.width()
    }

    fn cond_dim(&self) -> usize {
        self.spec.width()
    }

    fn steps(&self) -> usize {
        self.spec.steps
    }
}
