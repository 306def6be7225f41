//! Report mining: entity extraction with verification, synonym merging,
//! superclass aggregation, and per-report label vectors.

mod client;
mod labels;
mod pipeline;
pub mod prompts;
mod rules;
mod vocab;

use thiserror::Error;

pub use client::{CachedClient, ChatClient, LlmClient, LlmClientConfig};
pub use labels::{label_report, read_labels, write_labels, LabelRecord, LabelVector};
pub use pipeline::{
    aggregate_superclasses, extract_entities, merge_entities, mine_reports, MiningOptions, MiningOutput,
};
pub use rules::{longest_match_terms, RuleBasedClient, RuleTables};
pub use vocab::{normalize_entity, EntityVocabulary};

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("chat client: {0}")]
    Client(String),
    #[error("unparseable reply: {0}")]
    Unparseable(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
