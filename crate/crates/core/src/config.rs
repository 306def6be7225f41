//! Run configuration: one JSON document covering every stage, dotted-path
//! overrides and a stable content hash.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::eval::{ProbeConfig, DEFAULT_OVERLAP_THRESHOLD};
use crate::knowledge::{LlmClientConfig, MiningOptions};
use crate::model::ModelConfig;
use crate::text::ExternalEmbedderConfig;
use crate::training::PretrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientKind {
    Rule,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningConfig {
    pub client: ClientKind,
    /// Rule tables for the rule client; defaults to the synthetic corpus'
    /// `rules.json`.
    pub rules: Option<PathBuf>,
    pub llm: LlmClientConfig,
    pub options: MiningOptions,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            client: ClientKind::Rule,
            rules: None,
            llm: LlmClientConfig::default(),
            options: MiningOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Reference,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Downstream class names; empty means the sorted labels of the manifest.
    pub class_names: Vec<String>,
    pub overlap_threshold: f64,
    pub embedder: EmbedderKind,
    pub external: ExternalEmbedderConfig,
    pub probe: ProbeConfig,
    /// Evaluate zero-shot and probe runs on the first `k` leads only.
    pub leads: Option<usize>,
    /// With `leads`, zero the other leads instead of dropping them.
    pub zero_pad: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            class_names: Vec::new(),
            overlap_threshold: DEFAULT_OVERLAP_THRESHOLD,
            embedder: EmbedderKind::Reference,
            external: ExternalEmbedderConfig::default(),
            probe: ProbeConfig::default(),
            leads: None,
            zero_pad: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Dataset manifest; defaults to the synthetic corpus in the run
    /// directory.
    pub manifest: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
    pub mining: MiningConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Apply `key.path=value` overrides. Values parse as JSON when they can
    /// and are taken as strings otherwise. A key without dots may name any
    /// field whose name is unique in the document, e.g. `mask_ratio`.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let path = resolve_key(&doc, key.trim())?;
            set_path(&mut doc, &path, value)?;
        }
        serde_json::from_value(doc).map_err(|e| Error::Config(format!("overrides: {e}")))
    }

    /// Full dotted path of `key`, resolving short names.
    pub fn resolve_key(&self, key: &str) -> Result<String> {
        resolve_key(&serde_json::to_value(self)?, key)
    }

    /// SHA-256 of the canonical JSON form (keys sorted).
    pub fn hash(&self) -> String {
        let doc = serde_json::to_value(self).expect("config serializes");
        let bytes = serde_json::to_vec(&doc).expect("value serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval.leads.is_some_and(|k| !(1..=crate::data::NUM_LEADS).contains(&k)) {
            return Err(Error::Config(format!("eval.leads must lie in 1..={}", crate::data::NUM_LEADS)));
        }
        self.model.validate()?;
        self.pretrain.validate()
    }
}

fn leaf_paths(v: &Value, prefix: &str, out: &mut Vec<String>) {
    if let Value::Object(map) = v {
        for (k, child) in map {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            leaf_paths(child, &path, out);
            out.push(path);
        }
    }
}

fn resolve_key(doc: &Value, key: &str) -> Result<String> {
    if key.contains('.') || doc.get(key).is_some() {
        return Ok(key.to_string());
    }
    let mut all = Vec::new();
    leaf_paths(doc, "", &mut all);
    let hits: Vec<String> = all.into_iter().filter(|p| p.rsplit('.').next() == Some(key)).collect();
    match hits.as_slice() {
        [one] => Ok(one.clone()),
        [] => Err(Error::Config(format!("unknown config key {key}"))),
        many => Err(Error::Config(format!("config key {key} is ambiguous: {}", many.join(", ")))),
    }
}

/// One axis of a grid: `key=v1,v2,...`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<String>,
}

impl GridAxis {
    pub fn parse(spec: &str) -> Result<Self> {
        let (key, vals) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid axis {spec:?} is not key=v1,v2,...")))?;
        let values: Vec<String> = vals.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if key.trim().is_empty() || values.is_empty() {
            return Err(Error::Config(format!("grid axis {spec:?} needs a key and at least one value")));
        }
        Ok(Self { key: key.trim().to_string(), values })
    }
}

/// Cartesian product of `axes` as override lists, first axis slowest.
pub fn expand_grid(axes: &[GridAxis]) -> Vec<Vec<String>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(format!("{}={v}", axis.key));
                    p
                })
            })
            .collect()
    })
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {part} is not inside an object")))?;
        if i + 1 == parts.len() {
            if !obj.contains_key(*part) {
                return Err(Error::Config(format!("unknown config key {key}")));
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key {key}")))?;
    }
    Err(Error::Config("empty override key".into()))
}
