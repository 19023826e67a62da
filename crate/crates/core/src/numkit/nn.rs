use rand::Rng;

use super::params::{Graph, ParamId, ParamStore};
use super::tape::Var;
use super::tensor::Tensor2D;
use crate::{Error, Result};

/// `x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight =
            store.insert_he_uniform(format!("{name}.weight"), in_dim, out_dim, in_dim, rng)?;
        let bias = store.insert_uniform(format!("{name}.bias"), 1, out_dim, in_dim, rng)?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let xw = g.tape.matmul(x, w)?;
        g.tape.add_row(xw, b)
    }
}

/// Two-layer perceptron: linear, SiLU, linear.
#[derive(Debug, Clone, Copy)]
pub struct Mlp2 {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp2 {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out_dim, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.tape.silu(h);
        self.fc2.forward(g, h)
    }
}

/// Learnable affine part of a layer normalization.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.insert(format!("{name}.gamma"), Tensor2D::filled(1, dim, 1.0))?,
            beta: store.insert(format!("{name}.beta"), Tensor2D::zeros(1, dim))?,
            eps: Self::DEFAULT_EPS,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.tape.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Multi-head cross-attention weights.
#[derive(Debug, Clone, Copy)]
pub struct Mhca {
    pub q: Linear,
    /// Key projection weight; a key bias would shift every score in a
    /// row equally and cancel in the softmax, so there is none.
    pub k: ParamId,
    pub v: Linear,
    pub out: Linear,
    pub n_heads: usize,
}

impl Mhca {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        n_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_heads == 0 || dim % n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "model dim {dim} is not divisible by {n_heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k: store.insert_he_uniform(format!("{name}.k.weight"), dim, dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng)?,
            n_heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.q.out_dim
    }

    /// Queries come from `query`, keys and values from `context`.
    pub fn forward(&self, g: &mut Graph<'_>, query: Var, context: Var) -> Result<Var> {
        let dim = self.dim();
        for (what, v) in [("query", query), ("context", context)] {
            if g.value(v).cols() != dim {
                return Err(Error::shape(
                    "mhca",
                    format!("{what} width {} != model dim {dim}", g.value(v).cols()),
                ));
            }
        }
        let q = self.q.forward(g, query)?;
        let kw = g.param(self.k);
        let k = g.tape.matmul(context, kw)?;
        let v = self.v.forward(g, context)?;
        let dh = dim / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (qh, kh, vh) = if self.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    g.tape.slice_cols(q, h * dh, dh)?,
                    g.tape.slice_cols(k, h * dh, dh)?,
                    g.tape.slice_cols(v, h * dh, dh)?,
                )
            };
            let scores = g.tape.matmul_nt(qh, kh)?;
            let scores = g.tape.scale(scores, scale);
            let attn = g.tape.softmax_rows(scores);
            heads.push(g.tape.matmul(attn, vh)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.tape.concat_cols(&heads)?
        };
        self.out.forward(g, cat)
    }
}
