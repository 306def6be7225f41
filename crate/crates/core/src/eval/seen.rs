use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::text::TextEmbedding;

pub const DEFAULT_OVERLAP_THRESHOLD: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassOverlap {
    pub class_name: String,
    /// Highest cosine similarity to any vocabulary entity, `None` for an
    /// empty vocabulary.
    pub max_similarity: Option<f64>,
    pub nearest_entity: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeenUnseen {
    pub threshold: f64,
    pub seen: Vec<ClassOverlap>,
    pub unseen: Vec<ClassOverlap>,
}

/// A class is seen when its name embedding has cosine similarity above
/// `threshold` with some vocabulary entity. `embed` returns unit vectors.
pub fn seen_unseen_split(
    vocabulary: &[String],
    class_names: &[String],
    threshold: f64,
    embed: impl Fn(&[String]) -> Result<Vec<TextEmbedding>>,
) -> Result<SeenUnseen> {
    let classes = embed(class_names)?;
    let entities = if vocabulary.is_empty() { Vec::new() } else { embed(vocabulary)? };
    let mut out = SeenUnseen {
        threshold,
        seen: Vec::new(),
        unseen: Vec::new(),
    };
    for (name, c) in class_names.iter().zip(&classes) {
        let nearest = entities
            .iter()
            .zip(vocabulary)
            .map(|(e, n)| (c.cosine(e), n))
            .max_by(|a, b| a.0.total_cmp(&b.0));
        let overlap = ClassOverlap {
            class_name: name.clone(),
            max_similarity: nearest.map(|(s, _)| s),
            nearest_entity: nearest.map(|(_, n)| n.clone()),
        };
        if overlap.max_similarity.is_some_and(|s| s > threshold) {
            out.seen.push(overlap);
        } else {
            out.unseen.push(overlap);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(texts: &[String]) -> Result<Vec<TextEmbedding>> {
        Ok(texts
            .iter()
            .map(|t| {
                let v = match t.as_str() {
                    "atrial fibrillation" => vec![1.0, 0.0],
                    "afib" => vec![0.96f64.sqrt(), 0.2],
                    _ => vec![0.0, 1.0],
                };
                TextEmbedding::new(t, v)
            })
            .collect())
    }

    fn s(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn identical_name_is_seen() {
        let r = seen_unseen_split(&s(&["atrial fibrillation"]), &s(&["atrial fibrillation", "lvh"]), 0.95, toy).unwrap();
        assert_eq!(r.seen.len(), 1);
        assert!((r.seen[0].max_similarity.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(r.unseen[0].class_name, "lvh");
    }

    #[test]
    fn threshold_is_strict_and_empty_vocab_is_unseen() {
        // cos = sqrt(0.96) ~ 0.9798
        let r = seen_unseen_split(&s(&["atrial fibrillation"]), &s(&["afib"]), 0.98, toy).unwrap();
        assert!(r.seen.is_empty());
        let r = seen_unseen_split(&[], &s(&["afib"]), 0.95, toy).unwrap();
        assert_eq!(r.unseen[0].max_similarity, None);
    }
}
