use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::KnowledgeError;

/// Canonical entity spelling: lowercase, single spaces, no surrounding quotes
/// or trailing punctuation.
pub fn normalize_entity(raw: &str) -> String {
    let lowered = raw.to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_matches(|c: char| c == '"' || c == '\'' || c == '`')
        .trim_end_matches(|c: char| c.is_ascii_punctuation())
        .trim()
        .to_string()
}

/// Mined entity list with synonym merges and superclass links.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityVocabulary {
    pub entities: Vec<String>,
    pub merge_map: BTreeMap<String, String>,
    pub superclasses: BTreeMap<String, Vec<String>>,
    pub hash: String,
}

impl EntityVocabulary {
    /// Final vocabulary: canonical entities plus superclass names, sorted.
    pub fn build(
        canonical: impl IntoIterator<Item = String>,
        merge_map: BTreeMap<String, String>,
        superclasses: BTreeMap<String, Vec<String>>,
    ) -> Result<Self, KnowledgeError> {
        let mut set: BTreeSet<String> = canonical.into_iter().collect();
        set.extend(superclasses.keys().cloned());
        let mut vocab = Self {
            entities: set.into_iter().collect(),
            merge_map,
            superclasses,
            hash: String::new(),
        };
        vocab.hash = vocab.content_hash();
        vocab.validate()?;
        Ok(vocab)
    }

    pub fn empty() -> Self {
        Self::build(Vec::new(), BTreeMap::new(), BTreeMap::new()).expect("empty vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn index_of(&self, entity: &str) -> Option<usize> {
        self.entities.binary_search_by(|e| e.as_str().cmp(entity)).ok()
    }

    /// Resolve a raw mention to its vocabulary entry.
    pub fn canonical<'a>(&'a self, raw: &str) -> Option<&'a str> {
        let n = normalize_entity(raw);
        if let Some(c) = self.merge_map.get(&n) {
            return self.index_of(c).map(|i| self.entities[i].as_str());
        }
        self.index_of(&n).map(|i| self.entities[i].as_str())
    }

    fn content_hash(&self) -> String {
        let body = serde_json::to_vec(&(&self.entities, &self.merge_map, &self.superclasses))
            .expect("vocabulary serializes");
        let digest = Sha256::digest(&body);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), KnowledgeError> {
        let invalid = |m: String| Err(KnowledgeError::InvalidVocabulary(m));
        if self.entities.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("entities must be sorted and unique".into());
        }
        for (raw, c) in &self.merge_map {
            if self.index_of(c).is_none() {
                return invalid(format!("merge target {c:?} (from {raw:?}) is not an entity"));
            }
        }
        for (sup, members) in &self.superclasses {
            if self.index_of(sup).is_none() {
                return invalid(format!("superclass {sup:?} is not an entity"));
            }
            for m in members {
                if m == sup || self.index_of(m).is_none() {
                    return invalid(format!("bad member {m:?} of {sup:?}"));
                }
            }
        }
        if self.hash != self.content_hash() {
            return invalid("hash does not match content".into());
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), KnowledgeError> {
        let json = serde_json::to_string_pretty(self).map_err(|e| KnowledgeError::Format(e.to_string()))?;
        fs::write(path, json + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, KnowledgeError> {
        let text = fs::read_to_string(path)?;
        let v: Self = serde_json::from_str(&text).map_err(|e| KnowledgeError::Format(e.to_string()))?;
        v.validate()?;
        Ok(v)
    }
}
