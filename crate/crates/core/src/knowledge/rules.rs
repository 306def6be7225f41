//! Deterministic offline stand-in for the LLM: dictionary extraction plus
//! table-driven merge and hierarchy answers, behind the same prompt protocol.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::prompts::{self, PromptKind};
use super::{normalize_entity, ChatClient, KnowledgeError};

/// Tables behind the rule-based client.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleTables {
    /// Terms recognised in reports (canonical names, synonyms, superclasses).
    pub dictionary: Vec<String>,
    /// Raw spelling to canonical name.
    pub synonyms: BTreeMap<String, String>,
    /// Superclass to member entities.
    pub hierarchy: BTreeMap<String, Vec<String>>,
}

impl RuleTables {
    pub fn load(path: &Path) -> Result<Self, KnowledgeError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| KnowledgeError::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), KnowledgeError> {
        let json = serde_json::to_string_pretty(self).map_err(|e| KnowledgeError::Format(e.to_string()))?;
        fs::write(path, json + "\n")?;
        Ok(())
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// Longest dictionary match at each word start, left to right, over the
/// lowercased text. Matches never split a word.
pub fn longest_match_terms(text: &str, dictionary: &[String]) -> Vec<String> {
    let text = text.to_lowercase();
    let mut terms: Vec<String> = dictionary.iter().map(|t| normalize_entity(t)).filter(|t| !t.is_empty()).collect();
    terms.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
    terms.dedup();

    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut found = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (pos, c) = chars[i];
        let at_word_start = is_word_char(c) && (i == 0 || !is_word_char(chars[i - 1].1));
        if !at_word_start {
            i += 1;
            continue;
        }
        let rest = &text[pos..];
        let hit = terms.iter().find(|t| {
            rest.starts_with(t.as_str()) && !rest[t.len()..].chars().next().is_some_and(is_word_char)
        });
        match hit {
            Some(t) => {
                if !found.contains(t) {
                    found.push(t.clone());
                }
                let end = pos + t.len();
                while i < chars.len() && chars[i].0 < end {
                    i += 1;
                }
            }
            None => i += 1,
        }
    }
    found
}

/// Chat client answering the mining prompts from [`RuleTables`].
#[derive(Debug, Clone)]
pub struct RuleBasedClient {
    tables: RuleTables,
}

impl RuleBasedClient {
    pub fn new(tables: RuleTables) -> Self {
        Self { tables }
    }

    pub fn tables(&self) -> &RuleTables {
        &self.tables
    }

    fn canonical(&self, e: &str) -> String {
        let n = normalize_entity(e);
        self.tables
            .synonyms
            .get(&n)
            .map(|c| normalize_entity(c))
            .unwrap_or(n)
    }
}

impl ChatClient for RuleBasedClient {
    fn complete(&self, prompt: &str) -> Result<String, KnowledgeError> {
        match prompts::classify(prompt) {
            Some(PromptKind::Extract { report }) => {
                let found = longest_match_terms(&report, &self.tables.dictionary);
                Ok(format!("[{}]", found.join(", ")))
            }
            Some(PromptKind::Verify { report, entity }) => {
                let present = report.to_lowercase().contains(&entity.to_lowercase());
                Ok(if present { "YES" } else { "NO" }.to_string())
            }
            Some(PromptKind::Merge { entities }) => {
                let map: BTreeMap<String, String> =
                    entities.iter().map(|e| (normalize_entity(e), self.canonical(e))).collect();
                serde_json::to_string(&map).map_err(|e| KnowledgeError::Format(e.to_string()))
            }
            Some(PromptKind::Superclass { entities }) => {
                let present: BTreeSet<String> = entities.iter().map(|e| normalize_entity(e)).collect();
                let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
                for (sup, members) in &self.tables.hierarchy {
                    let sup = normalize_entity(sup);
                    let hits: Vec<String> = members
                        .iter()
                        .map(|m| normalize_entity(m))
                        .filter(|m| present.contains(m) && *m != sup)
                        .collect();
                    if !hits.is_empty() {
                        out.insert(sup, hits);
                    }
                }
                serde_json::to_string(&out).map_err(|e| KnowledgeError::Format(e.to_string()))
            }
            None => Err(KnowledgeError::Client(format!(
                "rule-based client does not understand prompt {:?}",
                prompt.chars().take(60).collect::<String>()
            ))),
        }
    }

    fn model_name(&self) -> &str {
        "rule-based"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dict(terms: &[&str]) -> Vec<String> {
        terms.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn longest_match_prefers_longer_terms_and_respects_word_boundaries() {
        let d = dict(&["sinus brady", "sinus bradycardia", "brady", "mi"]);
        assert_eq!(longest_match_terms("Marked Sinus Bradycardia.", &d), vec!["sinus bradycardia"]);
        assert_eq!(longest_match_terms("sinus brady noted", &d), vec!["sinus brady"]);
        // "mi" must not fire inside "minimal"
        assert!(longest_match_terms("minimal change", &d).is_empty());
    }

    #[test]
    fn repeated_terms_reported_once_in_first_seen_order() {
        let d = dict(&["a fib", "lvh"]);
        assert_eq!(longest_match_terms("lvh. a fib. lvh", &d), vec!["lvh", "a fib"]);
    }
}
