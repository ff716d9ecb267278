//! Linear, layer-norm, attention and transformer-block building blocks.

use super::params::{fan_in, Bound, ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Rng, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, rng: &mut Rng, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let w = ps.add(format!("{name}.w"), fan_in(rng, in_dim, out_dim));
        let b = bias.then(|| ps.add(format!("{name}.b"), Tensor::zeros(vec![out_dim])));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w])?;
        match self.b {
            Some(b) => g.add_bcast(y, p[b]),
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

/// Layer normalization with learnable gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor::full(vec![dim], T::one())),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(vec![dim])),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let n = g.layer_norm(x);
        let s = g.mul_bcast(n, p[self.gamma])?;
        g.add_bcast(s, p[self.beta])
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Multi-head self-attention over `[batch, seq, dim]`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, rng: &mut Rng, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!("width {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(ps, rng, &format!("{name}.q"), dim, dim, true),
            k: Linear::new(ps, rng, &format!("{name}.k"), dim, dim, true),
            v: Linear::new(ps, rng, &format!("{name}.v"), dim, dim, true),
            o: Linear::new(ps, rng, &format!("{name}.o"), dim, dim, true),
            heads,
            dim,
        })
    }

    fn split_heads<T: Real>(&self, g: &mut Graph<T>, x: Var, b: usize, n: usize) -> Result<Var> {
        let dh = self.dim / self.heads;
        let x = g.reshape(x, &[b, n, self.heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * self.heads, n, dh])
    }

    /// `x: [b, n, dim]`; `mask`, when given, is an additive `[n, n]` bias.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, mask: Option<Var>) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::shape("attention", &[&s, &[self.dim]]));
        }
        let (b, n) = (s[0], s[1]);
        let dh = self.dim / self.heads;
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, x)?;
        let v = self.v.forward(g, p, x)?;
        let q = self.split_heads(g, q, b, n)?;
        let k = self.split_heads(g, k, b, n)?;
        let v = self.split_heads(g, v, b, n)?;
        let scores = g.batch_matmul(q, k, true)?;
        let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            scores = g.add_bcast(scores, m)?;
        }
        let attn = g.softmax(scores);
        let ctx = g.batch_matmul(attn, v, false)?;
        let ctx = g.reshape(ctx, &[b, self.heads, n, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, n, self.dim])?;
        self.o.forward(g, p, ctx)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.q, &self.k, &self.v, &self.o]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))` then `h + mlp(ln(h))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        rng: &mut Rng,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        let hidden = dim * mlp_ratio.max(1);
        Ok(Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim),
            attn: Attention::new(ps, rng, &format!("{name}.attn"), dim, heads)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim),
            fc1: Linear::new(ps, rng, &format!("{name}.fc1"), dim, hidden, true),
            fc2: Linear::new(ps, rng, &format!("{name}.fc2"), hidden, dim, true),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, mask: Option<Var>) -> Result<Var> {
        let h = self.ln1.forward(g, p, x)?;
        let h = self.attn.forward(g, p, h, mask)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, p, x)?;
        let h = self.fc1.forward(g, p, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, p, h)?;
        g.add(x, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.ln1.params();
        v.extend(self.attn.params());
        v.extend(self.ln2.params());
        v.extend(self.fc1.params());
        v.extend(self.fc2.params());
        v
    }
}

/// A stack of blocks followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct Trunk {
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl Trunk {
    pub fn new<T: Real>(
        ps: &mut ParamSet<T>,
        rng: &mut Rng,
        name: &str,
        dim: usize,
        heads: usize,
        depth: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| Block::new(ps, rng, &format!("{name}.blocks.{i}"), dim, heads, mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            blocks,
            norm: LayerNorm::new(ps, &format!("{name}.norm"), dim),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, mut x: Var, mask: Option<Var>) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(g, p, x, mask)?;
        }
        self.norm.forward(g, p, x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.blocks.iter().flat_map(Block::params).collect();
        v.extend(self.norm.params());
        v
    }
}
