//! The full model (ECG encoder, text encoder, cardiac query network) and its
//! trained state.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::data::EcgRecord;
use crate::encoder::{EcgEncoder, EncoderConfig, TokenGrid};
use crate::error::{Error, Result};
use crate::numerics::{load_checkpoint, save_checkpoint, CheckpointHeader, Graph, ParamStore, Tensor};
use crate::query::{CardiacQueryNetwork, QueryConfig};
use crate::text::{TextConfig, TextEncoder, TextVocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub shared_dim: usize,
    pub init_seed: u64,
    pub encoder: EncoderConfig,
    pub text: TextConfig,
    pub query: QueryConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            shared_dim: 64,
            init_seed: 0,
            encoder: EncoderConfig::default(),
            text: TextConfig::default(),
            query: QueryConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.shared_dim == 0 {
            return Err(Error::Config("shared_dim must be positive".into()));
        }
        self.encoder.validate()?;
        self.text.validate()
    }
}

/// Parameter layout of the whole model.
#[derive(Debug, Clone, PartialEq)]
pub struct KmerlModel {
    pub cfg: ModelConfig,
    pub encoder: EcgEncoder,
    pub text: TextEncoder,
    pub query: CardiacQueryNetwork,
}

impl KmerlModel {
    /// Fresh parameters drawn from `cfg.init_seed`.
    pub fn build(cfg: &ModelConfig, text_vocab: TextVocab) -> Result<(Self, ParamStore<f64>)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut store = ParamStore::new();
        let encoder = EcgEncoder::new(&mut store, &cfg.encoder, cfg.shared_dim, &mut rng)?;
        let text = TextEncoder::new(&mut store, &cfg.text, text_vocab, cfg.shared_dim, &mut rng)?;
        let query = CardiacQueryNetwork::new(&mut store, &cfg.query, cfg.shared_dim, cfg.encoder.embed_dim, &mut rng)?;
        Ok((
            Self {
                cfg: cfg.clone(),
                encoder,
                text,
                query,
            },
            store,
        ))
    }
}

/// Token features, probe features and pooled embedding of one record.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedValues {
    pub tokens: Tensor<f32>,
    pub features: Vec<f64>,
    pub pooled: Vec<f64>,
}

/// Model layout plus `f32` parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub model: KmerlModel,
    pub params: ParamStore<f32>,
}

impl ModelState {
    pub fn init(cfg: &ModelConfig, text_vocab: TextVocab) -> Result<Self> {
        let (model, store) = KmerlModel::build(cfg, text_vocab)?;
        Ok(Self {
            model,
            params: store.cast(),
        })
    }

    pub fn save(&self, path: &Path, config_hash: &str, extra: serde_json::Value) -> Result<()> {
        let header = json!({
            "model": self.model.cfg,
            "text_vocab": self.model.text.vocab.tokens(),
            "extra": extra,
        });
        save_checkpoint(path, &self.params, config_hash, header)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointHeader)> {
        let (header, stored) = load_checkpoint::<f32>(path)?;
        let cfg: ModelConfig = serde_json::from_value(header.config["model"].clone())?;
        let tokens: Vec<String> = serde_json::from_value(header.config["text_vocab"].clone())?;
        let vocab = TextVocab::from_tokens(tokens).map_err(Error::Invalid)?;
        let mut state = Self::init(&cfg, vocab)?;
        let ours: Vec<(String, Vec<usize>)> =
            state.params.iter().map(|(_, n, t)| (n.to_string(), t.shape().to_vec())).collect();
        let theirs: Vec<(String, Vec<usize>)> =
            stored.iter().map(|(_, n, t)| (n.to_string(), t.shape().to_vec())).collect();
        if ours != theirs {
            return Err(Error::Invalid(format!(
                "{}: parameter layout does not match its model config",
                path.display()
            )));
        }
        state.params = stored;
        Ok((state, header))
    }

    /// SHA-256 over the parameters whose names start with `prefix`.
    pub fn param_hash(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (_, name, t) in self.params.iter().filter(|(_, n, _)| n.starts_with(prefix)) {
            h.update(name.as_bytes());
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Encode all present leads of `rec` without masking.
    pub fn encode_record(&self, rec: &EcgRecord) -> Result<EncodedValues> {
        let grid = TokenGrid::from_record(rec, &self.model.cfg.encoder)?;
        self.encode_grid(&grid)
    }

    pub fn encode_grid(&self, grid: &TokenGrid) -> Result<EncodedValues> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let out = self.model.encoder.encode(&mut g, &p, grid)?;
        Ok(EncodedValues {
            tokens: g.value(out.tokens).clone(),
            features: g.value(out.features).to_f64_vec(),
            pooled: g.value(out.pooled).to_f64_vec(),
        })
    }

    /// `[n x d_shared]` text embeddings.
    pub fn embed_texts(&self, texts: &[String]) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let v = self.model.text.forward_many(&mut g, &p, texts)?;
        Ok(g.value(v).clone())
    }

    /// Query logits of `queries [Q x d_shared]` against token features.
    pub fn query_logits(&self, queries: &Tensor<f32>, tokens: &Tensor<f32>) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let q = g.constant(queries.clone());
        let t = g.constant(tokens.clone());
        let logits = self.model.query.forward(&mut g, &p, q, t)?;
        Ok(g.value(logits).to_f64_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            shared_dim: 8,
            init_seed: 3,
            encoder: EncoderConfig {
                token_length: 10,
                signal_length: 50,
                embed_dim: 8,
                num_layers: 1,
                num_heads: 2,
                mlp_ratio: 2,
            },
            text: TextConfig { width: 8, num_layers: 1, num_heads: 2, mlp_ratio: 2 },
            query: QueryConfig { num_layers: 1, num_heads: 2, mlp_ratio: 2 },
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let state = ModelState::init(&tiny(), TextVocab::build(["a b c"])).unwrap();
        state.save(&path, "abc", json!({"note": 1})).unwrap();
        let (back, header) = ModelState::load(&path).unwrap();
        assert_eq!(back, state);
        assert_eq!(header.config_hash, "abc");
        assert_eq!(back.param_hash("ecg."), state.param_hash("ecg."));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = ModelState::init(&tiny(), TextVocab::build(["a"])).unwrap();
        let b = ModelState::init(&tiny(), TextVocab::build(["a"])).unwrap();
        assert_eq!(a.params, b.params);
        let c = ModelState::init(&ModelConfig { init_seed: 4, ..tiny() }, TextVocab::build(["a"])).unwrap();
        assert_ne!(a.params, c.params);
    }
}
