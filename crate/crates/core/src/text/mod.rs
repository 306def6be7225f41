//! Text tower: a small trainable reference encoder and a client for an
//! external embedding service. Both return unit-norm vectors of the shared
//! width.

mod external;
mod tokenizer;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use external::{embed_batch_external, ExternalEmbedderConfig};
pub use tokenizer::{tokenize_text, TextVocab, UNK};

use crate::error::{Error, Result};
use crate::nn::{normalize_rows, Block, Embedding, LayerNorm, Mlp};
use crate::numerics::{Bindings, Graph, ParamStore, Scalar, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextConfig {
    pub width: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            width: 64,
            num_layers: 2,
            num_heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl TextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.num_heads == 0 || self.width % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "text width {} must be a positive multiple of num_heads {}",
                self.width, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Unit-norm text embedding tagged with the hash of its source text.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    pub text_hash: String,
}

impl TextEmbedding {
    pub fn new(text: &str, vector: Vec<f64>) -> Self {
        let text_hash = Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
        Self { vector, text_hash }
    }

    pub fn cosine(&self, other: &TextEmbedding) -> f64 {
        self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum()
    }
}

/// Reference text encoder: token embedding, transformer blocks, final norm,
/// mean pooling and a two-layer projector.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub cfg: TextConfig,
    pub vocab: TextVocab,
    pub embedding: Embedding,
    pub blocks: Vec<Block>,
    pub ln_final: LayerNorm,
    pub projector: Mlp,
}

impl TextEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore<f64>,
        cfg: &TextConfig,
        vocab: TextVocab,
        shared_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let embedding = Embedding::new(store, "text.embedding", vocab.len(), w, rng)?;
        let blocks = (0..cfg.num_layers)
            .map(|i| Block::new(store, &format!("text.block{i}"), w, cfg.num_heads, cfg.mlp_ratio, rng))
            .collect::<Result<_, _>>()?;
        let ln_final = LayerNorm::new(store, "text.ln_final", w)?;
        let projector = Mlp::new(store, "text.projector", w, shared_dim, shared_dim, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            vocab,
            embedding,
            blocks,
            ln_final,
            projector,
        })
    }

    /// `[1 x d_shared]` unit-norm embedding of `text`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bindings, text: &str) -> Result<Var> {
        let ids = self.vocab.encode(text);
        let mut x = self.embedding.lookup(g, p, &ids)?;
        for block in &self.blocks {
            x = block.forward(g, p, x)?;
        }
        let x = self.ln_final.forward(g, p, x)?;
        let pooled = g.mean_pool(x, 0)?;
        let proj = self.projector.forward(g, p, pooled)?;
        Ok(normalize_rows(g, proj)?)
    }

    /// Stack the embeddings of `texts` into `[n x d_shared]`.
    pub fn forward_many<T: Scalar>(&self, g: &mut Graph<T>, p: &Bindings, texts: &[String]) -> Result<Var> {
        if texts.is_empty() {
            return Err(Error::Invalid("no texts to embed".into()));
        }
        let rows = texts
            .iter()
            .map(|t| self.forward(g, p, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(if rows.len() == 1 { rows[0] } else { g.concat(&rows, 0)? })
    }

    /// Inference-only embedding with the given parameters.
    pub fn embed_text<T: Scalar>(&self, store: &ParamStore<T>, text: &str) -> Result<TextEmbedding> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let v = self.forward(&mut g, &p, text)?;
        Ok(TextEmbedding::new(text, g.value(v).to_f64_vec()))
    }
}
