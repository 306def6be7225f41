//! Cardiac query network: entity-query embeddings self-attend, cross-attend
//! to ECG token features, and a shared linear head scores each query.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Attention, LayerNorm, Linear, Mlp};
use crate::numerics::{Bindings, Graph, ParamStore, Scalar, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueryConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            mlp_ratio: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryLayer {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub ln_cross: LayerNorm,
    pub ln_memory: LayerNorm,
    pub cross_attn: Attention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CardiacQueryNetwork {
    pub cfg: QueryConfig,
    pub layers: Vec<QueryLayer>,
    pub ln_final: LayerNorm,
    pub head: Linear,
}

impl CardiacQueryNetwork {
    /// Queries have width `shared_dim`; ECG tokens have width `token_dim`.
    pub fn new<R: Rng>(
        store: &mut ParamStore<f64>,
        cfg: &QueryConfig,
        shared_dim: usize,
        token_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.num_heads == 0 || shared_dim % cfg.num_heads != 0 {
            return Err(Error::Config(format!(
                "shared_dim {shared_dim} must be a multiple of query num_heads {}",
                cfg.num_heads
            )));
        }
        let d = shared_dim;
        let layers = (0..cfg.num_layers)
            .map(|i| -> Result<QueryLayer> {
                let n = format!("cq.layer{i}");
                Ok(QueryLayer {
                    ln_self: LayerNorm::new(store, &format!("{n}.ln_self"), d)?,
                    self_attn: Attention::new(store, &format!("{n}.self_attn"), d, d, cfg.num_heads, rng)?,
                    ln_cross: LayerNorm::new(store, &format!("{n}.ln_cross"), d)?,
                    ln_memory: LayerNorm::new(store, &format!("{n}.ln_memory"), token_dim)?,
                    cross_attn: Attention::new(store, &format!("{n}.cross_attn"), d, token_dim, cfg.num_heads, rng)?,
                    ln_mlp: LayerNorm::new(store, &format!("{n}.ln_mlp"), d)?,
                    mlp: Mlp::new(store, &format!("{n}.mlp"), d, d * cfg.mlp_ratio, d, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            layers,
            ln_final: LayerNorm::new(store, "cq.ln_final", d)?,
            head: Linear::new(store, "cq.head", d, 1, true, rng)?,
        })
    }

    /// `queries [Q x d_shared]`, `tokens [K x d]` -> logits `[Q]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bindings, queries: Var, tokens: Var) -> Result<Var> {
        let q = g.value(queries).rows();
        if q == 0 || g.value(queries).is_empty() {
            return Err(Error::Invalid("empty query set".into()));
        }
        if g.value(tokens).is_empty() {
            return Err(Error::Invalid("empty token set".into()));
        }
        let mut x = queries;
        for layer in &self.layers {
            let h = layer.ln_self.forward(g, p, x)?;
            let a = layer.self_attn.forward(g, p, h, h)?;
            x = g.add(x, a)?;
            let h = layer.ln_cross.forward(g, p, x)?;
            let mem = layer.ln_memory.forward(g, p, tokens)?;
            let c = layer.cross_attn.forward(g, p, h, mem)?;
            x = g.add(x, c)?;
            let h = layer.ln_mlp.forward(g, p, x)?;
            let m = layer.mlp.forward(g, p, h)?;
            x = g.add(x, m)?;
        }
        let x = self.ln_final.forward(g, p, x)?;
        let logits = self.head.forward(g, p, x)?;
        Ok(g.reshape(logits, &[q])?)
    }
}

/// Mean BCE over queries for one record.
pub fn cq_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[f64]) -> Result<Var> {
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::Invalid("cardiac-query labels must be 0 or 1".into()));
    }
    let labels: Vec<T> = labels.iter().map(|&y| T::from_f64(y)).collect();
    Ok(g.bce_with_logits(logits, &labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net() -> (CardiacQueryNetwork, ParamStore<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let cfg = QueryConfig { num_layers: 2, num_heads: 2, mlp_ratio: 2 };
        let n = CardiacQueryNetwork::new(&mut store, &cfg, 4, 6, &mut rng).unwrap();
        (n, store)
    }

    fn logits(n: &CardiacQueryNetwork, store: &ParamStore<f64>, q: &[f64], rows: usize, tok: &[f64]) -> Vec<f64> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let qv = g.constant(Tensor::from_f64(&[rows, 4], q).unwrap());
        let tv = g.constant(Tensor::from_f64(&[tok.len() / 6, 6], tok).unwrap());
        let out = n.forward(&mut g, &p, qv, tv).unwrap();
        g.value(out).to_f64_vec()
    }

    fn tokens() -> Vec<f64> {
        (0..30).map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.4).collect()
    }

    #[test]
    fn duplicated_query_scores_match_single() {
        let (n, s) = net();
        let q = [0.5, -0.5, 0.5, 0.5];
        let one = logits(&n, &s, &q, 1, &tokens());
        let two = logits(&n, &s, &[q, q].concat(), 2, &tokens());
        assert!((two[0] - one[0]).abs() < 1e-12 && (two[1] - one[0]).abs() < 1e-12, "{one:?} {two:?}");
    }

    #[test]
    fn query_permutation_permutes_logits() {
        let (n, s) = net();
        let a = [1.0, 0.0, 0.0, 0.0];
        let b = [0.0, 0.6, 0.8, 0.0];
        let ab = logits(&n, &s, &[a, b].concat(), 2, &tokens());
        let ba = logits(&n, &s, &[b, a].concat(), 2, &tokens());
        assert!((ab[0] - ba[1]).abs() < 1e-12 && (ab[1] - ba[0]).abs() < 1e-12);
    }

    #[test]
    fn token_order_does_not_matter() {
        let (n, s) = net();
        let q = [0.5, -0.5, 0.5, 0.5];
        let t = tokens();
        let mut rev = Vec::new();
        for r in (0..5).rev() {
            rev.extend_from_slice(&t[r * 6..(r + 1) * 6]);
        }
        let x = logits(&n, &s, &q, 1, &t);
        let y = logits(&n, &s, &q, 1, &rev);
        assert!((x[0] - y[0]).abs() < 1e-12);
    }

    #[test]
    fn bce_reference_values() {
        let mut g: Graph<f64> = Graph::new();
        let z = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let l = cq_loss(&mut g, z, &[1.0, 0.0, 1.0]).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let z = g.constant(Tensor::vector(vec![2.0, -2.0]));
        let l = cq_loss(&mut g, z, &[1.0, 0.0]).unwrap();
        let softplus_m2 = (1.0 + (-2.0f64).exp()).ln();
        assert!((g.value(l).data()[0] - softplus_m2).abs() < 1e-12);
        let z = g.constant(Tensor::vector(vec![30.0, -30.0]));
        let l = cq_loss(&mut g, z, &[1.0, 0.0]).unwrap();
        assert!(g.value(l).data()[0] < 1e-3);
        assert!(cq_loss(&mut g, z, &[0.5, 0.0]).is_err());
    }
}
