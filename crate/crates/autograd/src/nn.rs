//! Attention blocks, MLPs and the other layers the models are built from.
//!
//! Layers own only [`ParamId`]s; values live in a [`ParamStore`] and are
//! read through the [`Graph`] at forward time.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Mask, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normal(0, std) initialised tensor.
pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// `softmax(q·kᵀ/√d_k + bias)·v` where blocked mask entries get `-inf` bias.
pub fn scaled_dot_attention(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Mask>,
) -> Result<Var> {
    let (lq, dk) = g.value(q).dims2()?;
    let (lk, dk2) = g.value(k).dims2()?;
    if dk != dk2 {
        return Err(TensorError::shape("attention", g.shape(q), g.shape(k)));
    }
    let (lv, _) = g.value(v).dims2()?;
    if lv != lk {
        return Err(TensorError::shape("attention", g.shape(k), g.shape(v)));
    }
    if let Some(m) = mask {
        if m.rows() != lq || m.cols() != lk {
            return Err(TensorError::shape("attention mask", &[m.rows(), m.cols()], &[lq, lk]));
        }
    }
    let scores = g.matmul_t(q, k)?;
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt());
    let scores = match mask {
        Some(m) => g.mask_fill(scores, m)?,
        None => scores,
    };
    let weights = g.softmax(scores, 1)?;
    g.matmul(weights, v)
}

pub fn causal_mask(n: usize) -> Result<Mask> {
    Mask::causal(n)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let std = (1.0 / in_dim.max(1) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            normal_tensor(&[in_dim, out_dim], std, rng),
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?;
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// `x: [n, in] -> [n, out]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out_dim, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::Contract(format!(
                "{dim} model dims cannot be split into {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng)?,
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            out: Linear::new(store, &format!("{name}.o"), dim, dim, rng)?,
            heads,
        })
    }

    /// Queries come from `x`, keys and values from `context`.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        context: Var,
        mask: Option<&Mask>,
    ) -> Result<Var> {
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, context)?;
        let v = self.value.forward(g, context)?;
        let dim = g.shape(q)[1];
        let hd = dim / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * hd, hd)?;
            let kh = g.slice_cols(k, h * hd, hd)?;
            let vh = g.slice_cols(v, h * hd, hd)?;
            outs.push(scaled_dot_attention(g, qh, kh, vh, mask)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        self.out.forward(g, merged)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl AttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(AttentionBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, hidden, dim, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let a = self.attn.forward(g, h, h, mask)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        g.add(x, m)
    }
}

/// Decoder block with causal self-attention and cross-attention to a memory.
#[derive(Clone, Debug)]
pub struct CrossAttentionBlock {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl CrossAttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(CrossAttentionBlock {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), dim)?,
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), dim, heads, rng)?,
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), dim)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross"), dim, heads, rng)?,
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln_mlp"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, hidden, dim, rng)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        memory: Var,
        self_mask: &Mask,
    ) -> Result<Var> {
        let h = self.ln_self.forward(g, x)?;
        let a = self.self_attn.forward(g, h, h, Some(self_mask))?;
        let x = g.add(x, a)?;
        let h = self.ln_cross.forward(g, x)?;
        let c = self.cross_attn.forward(g, h, memory, None)?;
        let x = g.add(x, c)?;
        let h = self.ln_mlp.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        g.add(x, m)
    }
}
