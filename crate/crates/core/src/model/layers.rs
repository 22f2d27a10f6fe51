//! Parameterized building blocks. Each block holds [`ParamId`]s into the
//! model's [`ParamStore`] and records its forward pass on a [`Graph`].

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::util::derive_seed;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Samples `n` values from N(0, std²) on a stream keyed by `(seed, label)`.
pub(crate) fn normal_values(seed: u64, label: &str, n: usize, std: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, label));
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(&mut rng)).collect()
}

pub(crate) struct Init<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub seed: u64,
    pub frozen: bool,
}

impl<T: Scalar> Init<'_, T> {
    pub fn normal(&mut self, name: &str, shape: Vec<usize>, std: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let t = Tensor::from_f64(shape, &normal_values(self.seed, name, n, std))?;
        self.store.insert(name, t, self.frozen)
    }

    pub fn constant(&mut self, name: &str, shape: Vec<usize>, value: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let t = Tensor::new(shape, vec![T::lit(value); n])?;
        self.store.insert(name, t, self.frozen)
    }

    /// Weight `[fan_in × fan_out]` scaled by `1/sqrt(fan_in)`.
    pub fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        self.normal(name, vec![fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Self> {
        let w = init.weight(&format!("{name}.weight"), fan_in, fan_out)?;
        let b = if bias {
            Some(init.constant(&format!("{name}.bias"), vec![fan_out], 0.0)?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.constant(&format!("{name}.gamma"), vec![d], 1.0)?,
            beta: init.constant(&format!("{name}.beta"), vec![d], 0.0)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Multi-head attention without projection biases.
#[derive(Clone, Debug)]
pub(crate) struct Attention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub n_heads: usize,
}

impl Attention {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, d: usize, n_heads: usize) -> Result<Self> {
        Ok(Self {
            wq: init.weight(&format!("{name}.wq"), d, d)?,
            wk: init.weight(&format!("{name}.wk"), d, d)?,
            wv: init.weight(&format!("{name}.wv"), d, d)?,
            wo: init.weight(&format!("{name}.wo"), d, d)?,
            n_heads,
        })
    }

    /// `queries[Tq×d]` attend over `keys[Tk×d]`; `visible` is a row-major
    /// `Tq×Tk` mask (all visible when `None`).
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        queries: Var,
        keys: Var,
        visible: Option<Arc<Vec<bool>>>,
    ) -> Result<Var> {
        let d = g.shape(queries)[1];
        let dh = d / self.n_heads;
        let wq = g.param(store, self.wq);
        let wk = g.param(store, self.wk);
        let wv = g.param(store, self.wv);
        let wo = g.param(store, self.wo);
        let q = g.matmul(queries, wq)?;
        let k = g.matmul(keys, wk)?;
        let v = g.matmul(keys, wv)?;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, scale);
            let p = g.masked_softmax(s, visible.clone())?;
            heads.push(g.matmul(p, vh)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        g.matmul(cat, wo)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, d: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(init, &format!("{name}.up"), d, hidden, true)?,
            down: Linear::new(init, &format!("{name}.down"), hidden, d, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ff(ln(x))`.
#[derive(Clone, Debug)]
pub(crate) struct Block {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl Block {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, d: usize, n_heads: usize, ff_hidden: usize) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(init, &format!("{name}.ln_attn"), d)?,
            attn: Attention::new(init, &format!("{name}.attn"), d, n_heads)?,
            ln_ff: LayerNorm::new(init, &format!("{name}.ln_ff"), d)?,
            ff: FeedForward::new(init, &format!("{name}.ff"), d, ff_hidden)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        visible: Option<Arc<Vec<bool>>>,
    ) -> Result<Var> {
        let h = self.ln_attn.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, h, visible)?;
        let x = g.add(x, a)?;
        let h = self.ln_ff.forward(g, store, x)?;
        let f = self.ff.forward(g, store, h)?;
        g.add(x, f)
    }
}

/// Flamingo-style gated cross-attention block. Both branches are scaled by
/// `tanh` of a scalar gate initialized to zero.
#[derive(Clone, Debug)]
pub(crate) struct GatedCrossAttention {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub attn_gate: ParamId,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
    pub ff_gate: ParamId,
}

impl GatedCrossAttention {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, d: usize, n_heads: usize, ff_hidden: usize) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(init, &format!("{name}.ln_attn"), d)?,
            attn: Attention::new(init, &format!("{name}.attn"), d, n_heads)?,
            attn_gate: init.constant(&format!("{name}.attn_gate"), vec![1], 0.0)?,
            ln_ff: LayerNorm::new(init, &format!("{name}.ln_ff"), d)?,
            ff: FeedForward::new(init, &format!("{name}.ff"), d, ff_hidden)?,
            ff_gate: init.constant(&format!("{name}.ff_gate"), vec![1], 0.0)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        latents: Var,
        visible: Arc<Vec<bool>>,
    ) -> Result<Var> {
        let h = self.ln_attn.forward(g, store, x)?;
        let a = self.attn.forward(g, store, h, latents, Some(visible))?;
        let gate = g.param(store, self.attn_gate);
        let gate = g.tanh(gate);
        let a = g.scale_by(a, gate)?;
        let x = g.add(x, a)?;
        let h = self.ln_ff.forward(g, store, x)?;
        let f = self.ff.forward(g, store, h)?;
        let gate = g.param(store, self.ff_gate);
        let gate = g.tanh(gate);
        let f = g.scale_by(f, gate)?;
        g.add(x, f)
    }
}

/// One Perceiver resampler layer: latents attend over `[media; latents]`.
#[derive(Clone, Debug)]
pub(crate) struct ResamplerLayer {
    pub ln_media: LayerNorm,
    pub ln_latents: LayerNorm,
    pub attn: Attention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl ResamplerLayer {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, d: usize, n_heads: usize, ff_hidden: usize) -> Result<Self> {
        Ok(Self {
            ln_media: LayerNorm::new(init, &format!("{name}.ln_media"), d)?,
            ln_latents: LayerNorm::new(init, &format!("{name}.ln_latents"), d)?,
            attn: Attention::new(init, &format!("{name}.attn"), d, n_heads)?,
            ln_ff: LayerNorm::new(init, &format!("{name}.ln_ff"), d)?,
            ff: FeedForward::new(init, &format!("{name}.ff"), d, ff_hidden)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, media: Var, latents: Var) -> Result<Var> {
        let m = self.ln_media.forward(g, store, media)?;
        let q = self.ln_latents.forward(g, store, latents)?;
        let kv = g.concat_rows(&[m, q])?;
        let a = self.attn.forward(g, store, q, kv, None)?;
        let latents = g.add(latents, a)?;
        let h = self.ln_ff.forward(g, store, latents)?;
        let f = self.ff.forward(g, store, h)?;
        g.add(latents, f)
    }
}
