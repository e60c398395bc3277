//! Transformer building blocks shared by the retriever and generator.

use rand::Rng;

use crate::error::Result;

use super::graph::{Graph, Mask, Var};
use super::params::{trunc_normal, ParamId, ParamStore};
use super::real::Real;
use super::tensor::Tensor;

pub const INIT_STD: f32 = 0.02;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(ps: &mut ParamStore, rng: &mut R, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let weight = ps.add(
            format!("{name}.weight"),
            trunc_normal(rng, &[d_in, d_out], INIT_STD),
            true,
        );
        let bias = bias.then(|| ps.add(format!("{name}.bias"), Tensor::zeros([d_out]), false));
        Linear { weight, bias }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let y = g.matmul(x, w, false)?;
        match self.bias {
            Some(b) => {
                let b = g.param(ps, b);
                g.add_broadcast(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: ps.add(format!("{name}.gain"), Tensor::full([d], 1.0), false),
            bias: ps.add(format!("{name}.bias"), Tensor::zeros([d]), false),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let gain = g.param(ps, self.gain);
        let bias = g.param(ps, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(ps: &mut ParamStore, rng: &mut R, name: &str, d: usize, d_kv: usize, heads: usize) -> Self {
        MultiHeadAttention {
            query: Linear::new(ps, rng, &format!("{name}.query"), d, d, true),
            key: Linear::new(ps, rng, &format!("{name}.key"), d_kv, d, true),
            value: Linear::new(ps, rng, &format!("{name}.value"), d_kv, d, true),
            out: Linear::new(ps, rng, &format!("{name}.out"), d, d, true),
            heads,
        }
    }

    /// Attend from `x` over `source` (`x` itself for self-attention).
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        source: Var,
        mask: Option<&Mask>,
    ) -> Result<Var> {
        let q = self.query.forward(g, ps, x)?;
        let k = self.key.forward(g, ps, source)?;
        let v = self.value.forward(g, ps, source)?;
        let a = g.attention(q, k, v, self.heads, mask)?;
        self.out.forward(g, ps, a)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(ps: &mut ParamStore, rng: &mut R, name: &str, d: usize, d_ff: usize) -> Self {
        FeedForward {
            up: Linear::new(ps, rng, &format!("{name}.up"), d, d_ff, true),
            down: Linear::new(ps, rng, &format!("{name}.down"), d_ff, d, true),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, ps, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, ps, h)
    }
}

/// Pre-norm transformer block: self-attention, optional cross-attention over
/// an external memory, then a feedforward layer, each with a residual.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross: Option<(LayerNorm, MultiHeadAttention)>,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockShape {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Width of the cross-attention memory, when the block has one.
    pub d_memory: Option<usize>,
}

impl Block {
    pub fn new<R: Rng>(ps: &mut ParamStore, rng: &mut R, name: &str, shape: BlockShape) -> Self {
        let BlockShape {
            d_model,
            heads,
            d_ff,
            d_memory,
        } = shape;
        Block {
            ln_self: LayerNorm::new(ps, &format!("{name}.ln_self"), d_model),
            self_attn: MultiHeadAttention::new(ps, rng, &format!("{name}.self_attn"), d_model, d_model, heads),
            cross: d_memory.map(|dm| {
                (
                    LayerNorm::new(ps, &format!("{name}.ln_cross"), d_model),
                    MultiHeadAttention::new(ps, rng, &format!("{name}.cross_attn"), d_model, dm, heads),
                )
            }),
            ln_ff: LayerNorm::new(ps, &format!("{name}.ln_ff"), d_model),
            ff: FeedForward::new(ps, rng, &format!("{name}.ff"), d_model, d_ff),
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        self_mask: Option<&Mask>,
        memory: Option<Var>,
    ) -> Result<Var> {
        let h = self.ln_self.forward(g, ps, x)?;
        let h = self.self_attn.forward(g, ps, h, h, self_mask)?;
        let mut x = g.add(x, h)?;
        if let (Some((ln, attn)), Some(mem)) = (&self.cross, memory) {
            let h = ln.forward(g, ps, x)?;
            let h = attn.forward(g, ps, h, mem, None)?;
            x = g.add(x, h)?;
        }
        let h = self.ln_ff.forward(g, ps, x)?;
        let h = self.ff.forward(g, ps, h)?;
        g.add(x, h)
    }
}
