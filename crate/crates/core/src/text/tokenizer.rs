use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub const UNK: &str = "[UNK]";

/// Lowercase, split on whitespace, and emit each punctuation mark as its own
/// token.
pub fn tokenize_text(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.to_lowercase().chars() {
        if c.is_alphanumeric() {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Frozen word vocabulary. Index 0 is the unknown token; the rest is sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextVocab {
    tokens: Vec<String>,
}

impl TextVocab {
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<String> = corpus.into_iter().flat_map(tokenize_text).collect();
        let mut tokens = vec![UNK.to_string()];
        tokens.extend(set.into_iter().filter(|t| t != UNK));
        Self { tokens }
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, String> {
        if tokens.first().map(String::as_str) != Some(UNK) {
            return Err(format!("text vocabulary must start with {UNK}"));
        }
        if tokens[1..].windows(2).any(|w| w[0] >= w[1]) {
            return Err("text vocabulary must be sorted and unique".into());
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.tokens[1..]
            .binary_search_by(|t| t.as_str().cmp(token))
            .map(|i| i + 1)
            .unwrap_or(0)
    }

    /// Token ids of `text`; an empty text becomes a single unknown token.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let ids: Vec<usize> = tokenize_text(text).iter().map(|t| self.id(t)).collect();
        if ids.is_empty() {
            vec![0]
        } else {
            ids
        }
    }
}
