//! Lead-aware ECG encoder: segment tokenization with lead and temporal
//! embeddings, lead and segment masking, and a pre-norm transformer over the
//! kept tokens.

mod grid;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use grid::{dynamic_lead_mask, mask_leads, masked_per_lead, segment_mask, TokenGrid};

use crate::data::NUM_LEADS;
use crate::error::{Error, Result};
use crate::nn::{normalize_rows, Block, Embedding, LayerNorm, Linear, Mlp};
use crate::numerics::{Bindings, Graph, ParamStore, Scalar, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Samples per segment (p).
    pub token_length: usize,
    /// Samples per lead (S).
    pub signal_length: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            token_length: 100,
            signal_length: 5000,
            embed_dim: 64,
            num_layers: 3,
            num_heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    /// M = S / p.
    pub fn segments(&self) -> usize {
        self.signal_length / self.token_length.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.token_length == 0 || self.signal_length % self.token_length != 0 {
            return Err(Error::Config(format!(
                "token_length {} must divide signal_length {}",
                self.token_length, self.signal_length
            )));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Parameter handles of the ECG encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgEncoder {
    pub cfg: EncoderConfig,
    pub shared_dim: usize,
    pub projection: Linear,
    pub lead_embeddings: Embedding,
    pub temporal_embeddings: Embedding,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
    pub projector: Mlp,
}

/// Graph outputs of one encoded record.
#[derive(Debug, Clone, Copy)]
pub struct EncodedEcg {
    /// Final token features `[K x d]`.
    pub tokens: Var,
    /// Mean of `tokens`, `[d]`; the linear-probe feature.
    pub features: Var,
    /// Normalized projector output, `[1 x d_shared]`.
    pub pooled: Var,
}

impl EcgEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore<f64>, cfg: &EncoderConfig, shared_dim: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let projection = Linear::new(store, "ecg.tokenizer", cfg.token_length, d, true, rng)?;
        let lead_embeddings = Embedding::new(store, "ecg.lead_embeddings", NUM_LEADS, d, rng)?;
        let temporal_embeddings = Embedding::new(store, "ecg.temporal_embeddings", cfg.segments(), d, rng)?;
        let blocks = (0..cfg.num_layers)
            .map(|i| Block::new(store, &format!("ecg.block{i}"), d, cfg.num_heads, cfg.mlp_ratio, rng))
            .collect::<Result<_, _>>()?;
        let ln_final = LayerNorm::new(store, "ecg.ln_final", d)?;
        let projector = Mlp::new(store, "ecg.projector", d, shared_dim, shared_dim, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            shared_dim,
            projection,
            lead_embeddings,
            temporal_embeddings,
            blocks,
            ln_final,
            projector,
        })
    }

    /// Kept tokens as `W x + b + lead_l + temp_m`, `[K x d]`.
    pub fn embed_tokens<T: Scalar>(&self, g: &mut Graph<T>, p: &Bindings, grid: &TokenGrid) -> Result<Var> {
        if grid.segments() != self.cfg.segments() || grid.token_length() != self.cfg.token_length {
            return Err(Error::Config(format!(
                "grid is {} x {}, encoder expects {} x {}",
                grid.segments(),
                grid.token_length(),
                self.cfg.segments(),
                self.cfg.token_length
            )));
        }
        let kept = grid.kept_positions();
        if kept.is_empty() {
            return Err(Error::Invalid("no tokens left to encode".into()));
        }
        let p_len = grid.token_length();
        let mut raw = Vec::with_capacity(kept.len() * p_len);
        for &(r, s) in &kept {
            raw.extend(grid.patch(r, s).iter().map(|&v| T::from_f64(v)));
        }
        let x = g.constant(Tensor::new(vec![kept.len(), p_len], raw)?);
        let x = self.projection.forward(g, p, x)?;
        let lead_rows: Vec<usize> = kept.iter().map(|&(r, _)| grid.leads()[r].slot()).collect();
        let seg_rows: Vec<usize> = kept.iter().map(|&(_, s)| s).collect();
        let lead = self.lead_embeddings.lookup(g, p, &lead_rows)?;
        let temp = self.temporal_embeddings.lookup(g, p, &seg_rows)?;
        let x = g.add(x, lead)?;
        Ok(g.add(x, temp)?)
    }

    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, p: &Bindings, grid: &TokenGrid) -> Result<EncodedEcg> {
        let mut x = self.embed_tokens(g, p, grid)?;
        for block in &self.blocks {
            x = block.forward(g, p, x)?;
        }
        let tokens = self.ln_final.forward(g, p, x)?;
        let features = g.mean_pool(tokens, 0)?;
        let proj = self.projector.forward(g, p, features)?;
        let pooled = normalize_rows(g, proj)?;
        Ok(EncodedEcg { tokens, features, pooled })
    }
}
