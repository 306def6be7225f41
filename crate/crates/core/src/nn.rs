//! Layers shared by the ECG encoder, the text encoder and the query network.
//!
//! A layer only stores [`ParamId`]s; values live in a [`ParamStore`] and are
//! bound into each forward graph, so the same layer runs in `f32` for
//! training and in `f64` for gradient checks.

use rand::Rng;

use crate::numerics::{Bindings, Graph, NumericsError, ParamId, ParamStore, Scalar, Var};

pub const LN_EPS: f64 = 1e-5;
const EMBED_STD: f64 = 0.02;

fn xavier_std(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

/// `y = x W + b`, with `W` stored `[in x out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore<f64>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self, NumericsError> {
        let w = store.insert_normal(format!("{name}.w"), &[fan_in, fan_out], xavier_std(fan_in, fan_out), rng)?;
        let b = if bias {
            Some(store.insert_const(format!("{name}.b"), &[fan_out], 0.0)?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var, NumericsError> {
        let y = g.matmul(x, p.var(self.w))?;
        match self.b {
            Some(b) => g.add_row(y, p.var(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore<f64>, name: &str, dim: usize) -> Result<Self, NumericsError> {
        Ok(Self {
            gamma: store.insert_const(format!("{name}.gamma"), &[dim], 1.0)?,
            beta: store.insert_const(format!("{name}.beta"), &[dim], 0.0)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var, NumericsError> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta), LN_EPS)
    }
}

/// Learned lookup table `[rows x dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new<R: Rng>(
        store: &mut ParamStore<f64>,
        name: &str,
        rows: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self, NumericsError> {
        Ok(Self {
            table: store.insert_normal(name, &[rows, dim], EMBED_STD, rng)?,
        })
    }

    pub fn lookup<T: Scalar>(&self, g: &mut Graph<T>, p: &Bindings, rows: &[usize]) -> Result<Var, NumericsError> {
        g.gather_rows(p.var(self.table), rows)
    }
}

/// `Linear -> GELU -> Linear`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore<f64>,
        name: &str,
        dim_in: usize,
        hidden: usize,
        dim_out: usize,
        rng: &mut R,
    ) -> Result<Self, NumericsError> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim_in, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim_out, true, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var, NumericsError> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }
}

/// Multi-head scaled dot-product attention. Queries come from a width-`dim`
/// stream; keys and values may come from a stream of a different width.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl Attention {
    pub fn new<R: Rng>(
        store: &mut ParamStore<f64>,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self, NumericsError> {
        if heads == 0 || dim % heads != 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "attention heads",
                left: vec![dim],
                right: vec![heads],
            });
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), kv_dim, dim, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), kv_dim, dim, true, rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng)?,
            heads,
            dim,
        })
    }

    /// `x`: `[n x dim]`, `ctx`: `[m x kv_dim]` -> `[n x dim]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bindings, x: Var, ctx: Var) -> Result<Var, NumericsError> {
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, ctx)?;
        let v = self.v.forward(g, p, ctx)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores, 1)?;
            outs.push(g.matmul(attn, vh)?);
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        self.o.forward(g, p, joined)
    }
}

/// Pre-norm transformer block: `x + Attn(LN x)`, then `x + MLP(LN x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<R: Rng>(
        store: &mut ParamStore<f64>,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Result<Self, NumericsError> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: Attention::new(store, &format!("{name}.attn"), dim, dim, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim * mlp_ratio, dim, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var, NumericsError> {
        let h = self.ln1.forward(g, p, x)?;
        let a = self.attn.forward(g, p, h, h)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, p, x)?;
        let m = self.mlp.forward(g, p, h)?;
        g.add(x, m)
    }
}

/// Row-wise L2 normalization of `[n x d]` (or a single `[d]` row, returned
/// as `[1 x d]`).
pub fn normalize_rows<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var, NumericsError> {
    let v = g.value(x);
    let d = v.cols();
    let rows = v.len() / d.max(1);
    let x = g.reshape(x, &[rows, d])?;
    g.l2_normalize(x, 1)
}
