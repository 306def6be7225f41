use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;

use serde_json::Value;

use super::labels::{label_report, LabelVector};
use super::prompts;
use super::{normalize_entity, ChatClient, EntityVocabulary, KnowledgeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct MiningOptions {
    /// Reports processed concurrently during extraction.
    pub concurrency: usize,
    /// Re-asks after an unparseable reply.
    pub parse_retries: u32,
}

impl Default for MiningOptions {
    fn default() -> Self {
        Self {
            concurrency: 4,
            parse_retries: 2,
        }
    }
}

/// Send `prompt` and parse the reply, re-asking on parse failure.
fn ask<T>(
    client: &dyn ChatClient,
    prompt: &str,
    retries: u32,
    parse: impl Fn(&str) -> Result<T, KnowledgeError>,
) -> Result<T, KnowledgeError> {
    let mut reply = client.complete(prompt)?;
    let mut attempt = 0;
    loop {
        match parse(&reply) {
            Ok(v) => return Ok(v),
            Err(e) if attempt >= retries => return Err(e),
            Err(e) => {
                log::warn!("retrying after unparseable reply: {e}");
                attempt += 1;
                reply = client.retry(prompt)?;
            }
        }
    }
}

/// Verified positive entities of one report, normalized and deduplicated in
/// first-seen order. Every kept entity occurs in the lowercased report.
pub fn extract_entities(report: &str, client: &dyn ChatClient, opts: &MiningOptions) -> Result<Vec<String>, KnowledgeError> {
    if report.trim().is_empty() {
        return Err(KnowledgeError::Format("empty report".into()));
    }
    let candidates = ask(client, &prompts::extraction_prompt(report), opts.parse_retries, prompts::parse_bracket_list)?;
    let lowered = report.to_lowercase();
    let mut kept: Vec<String> = Vec::new();
    for raw in candidates {
        let e = normalize_entity(&raw);
        if e.is_empty() || kept.contains(&e) {
            continue;
        }
        let verified = ask(
            client,
            &prompts::verification_prompt(report, &e),
            opts.parse_retries,
            prompts::parse_yes_no,
        )?;
        if !verified {
            continue;
        }
        if !lowered.contains(&e) {
            log::warn!("dropping {e:?}: not found in report");
            continue;
        }
        kept.push(e);
    }
    Ok(kept)
}

fn parse_merge(reply: &str, entities: &[String]) -> Result<BTreeMap<String, String>, KnowledgeError> {
    let obj = prompts::parse_json_object(reply)?;
    let known: BTreeSet<&str> = entities.iter().map(String::as_str).collect();
    let mut map = BTreeMap::new();
    for (k, v) in obj {
        let key = normalize_entity(&k);
        let target = match v {
            Value::String(s) => normalize_entity(&s),
            other => return Err(KnowledgeError::Unparseable(format!("merge target for {k:?} is {other}"))),
        };
        if target.is_empty() {
            return Err(KnowledgeError::Unparseable(format!("empty merge target for {k:?}")));
        }
        if known.contains(key.as_str()) {
            map.insert(key, target);
        } else {
            log::warn!("merge reply mentions unknown entity {k:?}; ignored");
        }
    }
    Ok(map)
}

/// Total map from every input entity to its merged name.
pub fn merge_entities(entities: &[String], client: &dyn ChatClient, opts: &MiningOptions) -> Result<BTreeMap<String, String>, KnowledgeError> {
    let list: Vec<String> = entities
        .iter()
        .map(|e| normalize_entity(e))
        .filter(|e| !e.is_empty())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if list.is_empty() {
        return Err(KnowledgeError::Format("merge needs a nonempty entity list".into()));
    }
    let mut map = ask(client, &prompts::merge_prompt(&list), opts.parse_retries, |r| parse_merge(r, &list))?;
    for e in &list {
        map.entry(e.clone()).or_insert_with(|| e.clone());
    }
    Ok(map)
}

fn parse_superclasses(reply: &str, entities: &[String]) -> Result<BTreeMap<String, Vec<String>>, KnowledgeError> {
    let obj = prompts::parse_json_object(reply)?;
    let known: BTreeSet<&str> = entities.iter().map(String::as_str).collect();
    let mut out = BTreeMap::new();
    for (k, v) in obj {
        let sup = normalize_entity(&k);
        let raw: Vec<String> = match v {
            Value::Array(items) => items
                .into_iter()
                .map(|i| match i {
                    Value::String(s) => Ok(s),
                    other => Err(KnowledgeError::Unparseable(format!("member of {k:?} is {other}"))),
                })
                .collect::<Result<_, _>>()?,
            Value::String(s) => vec![s],
            other => return Err(KnowledgeError::Unparseable(format!("members of {k:?} are {other}"))),
        };
        if sup.is_empty() {
            continue;
        }
        let mut members: Vec<String> = Vec::new();
        for m in raw {
            let m = normalize_entity(&m);
            if m == sup || !known.contains(m.as_str()) {
                log::warn!("dropping member {m:?} of superclass {sup:?}");
            } else if !members.contains(&m) {
                members.push(m);
            }
        }
        if !members.is_empty() {
            members.sort();
            out.insert(sup, members);
        }
    }
    Ok(out)
}

/// Superclass name to member entities, restricted to `entities`.
pub fn aggregate_superclasses(
    entities: &[String],
    client: &dyn ChatClient,
    opts: &MiningOptions,
) -> Result<BTreeMap<String, Vec<String>>, KnowledgeError> {
    if entities.is_empty() {
        return Ok(BTreeMap::new());
    }
    ask(client, &prompts::superclass_prompt(entities), opts.parse_retries, |r| {
        parse_superclasses(r, entities)
    })
}

#[derive(Debug, Clone)]
pub struct MiningOutput {
    /// Verified entities per report, in input order.
    pub extracted: Vec<Vec<String>>,
    pub vocabulary: EntityVocabulary,
    pub labels: Vec<LabelVector>,
}

/// Run the full pipeline over a corpus: parallel extraction, then one merge
/// call and one superclass call, then labeling.
pub fn mine_reports(reports: &[String], client: &dyn ChatClient, opts: &MiningOptions) -> Result<MiningOutput, KnowledgeError> {
    let extracted = extract_all(reports, client, opts)?;
    let raw: BTreeSet<String> = extracted.iter().flatten().cloned().collect();
    let vocabulary = if raw.is_empty() {
        EntityVocabulary::empty()
    } else {
        let raw: Vec<String> = raw.into_iter().collect();
        let merge_map = merge_entities(&raw, client, opts)?;
        let canonical: Vec<String> = merge_map.values().cloned().collect::<BTreeSet<_>>().into_iter().collect();
        let superclasses = aggregate_superclasses(&canonical, client, opts)?;
        EntityVocabulary::build(canonical, merge_map, superclasses)?
    };
    let labels = extracted.iter().map(|e| label_report(e, &vocabulary)).collect();
    Ok(MiningOutput {
        extracted,
        vocabulary,
        labels,
    })
}

fn extract_all(reports: &[String], client: &dyn ChatClient, opts: &MiningOptions) -> Result<Vec<Vec<String>>, KnowledgeError> {
    let next = AtomicUsize::new(0);
    let workers = opts.concurrency.clamp(1, reports.len().max(1));
    let mut results: Vec<(usize, Result<Vec<String>, KnowledgeError>)> = thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        if i >= reports.len() {
                            break;
                        }
                        local.push((i, extract_entities(&reports[i], client, opts)));
                    }
                    local
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("extraction worker panicked")).collect()
    });
    results.sort_by_key(|(i, _)| *i);
    results.into_iter().map(|(_, r)| r).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::{RuleBasedClient, RuleTables};

    fn client() -> RuleBasedClient {
        RuleBasedClient::new(RuleTables {
            dictionary: ["sinus bradycardia", "anterior myocardial infarction", "inferior myocardial infarction", "afib", "atrial fibrillation", "normal"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            synonyms: BTreeMap::from([("afib".to_string(), "atrial fibrillation".to_string())]),
            hierarchy: BTreeMap::from([(
                "myocardial infarction".to_string(),
                vec!["anterior myocardial infarction".to_string(), "inferior myocardial infarction".to_string()],
            )]),
        })
    }

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    /// Replies with a fixed list and always confirms.
    struct Inventing;
    impl ChatClient for Inventing {
        fn complete(&self, prompt: &str) -> Result<String, KnowledgeError> {
            Ok(match prompts::classify(prompt) {
                Some(prompts::PromptKind::Extract { .. }) => "[sinus rhythm, ventricular tachycardia]".into(),
                _ => "YES".into(),
            })
        }
        fn model_name(&self) -> &str {
            "inventing"
        }
    }

    #[test]
    fn extracts_in_report_order() {
        let opts = MiningOptions::default();
        let got = extract_entities("sinus bradycardia. anterior myocardial infarction.", &client(), &opts).unwrap();
        assert_eq!(got, strings(&["sinus bradycardia", "anterior myocardial infarction"]));
        assert_eq!(extract_entities("normal ecg", &client(), &opts).unwrap(), strings(&["normal"]));
    }

    #[test]
    fn substring_guard_drops_invented_terms() {
        let got = extract_entities("Sinus rhythm.", &Inventing, &MiningOptions::default()).unwrap();
        assert_eq!(got, strings(&["sinus rhythm"]));
    }

    #[test]
    fn merge_fills_identity_and_maps_synonyms() {
        let opts = MiningOptions::default();
        let m = merge_entities(&strings(&["afib", "atrial fibrillation"]), &client(), &opts).unwrap();
        assert_eq!(m["afib"], "atrial fibrillation");
        assert_eq!(m["atrial fibrillation"], "atrial fibrillation");
        let single = merge_entities(&strings(&["x"]), &client(), &opts).unwrap();
        assert_eq!(single, BTreeMap::from([("x".to_string(), "x".to_string())]));
    }

    #[test]
    fn superclass_groups_subtypes() {
        let opts = MiningOptions::default();
        let ents = strings(&["anterior myocardial infarction", "inferior myocardial infarction"]);
        let s = aggregate_superclasses(&ents, &client(), &opts).unwrap();
        assert_eq!(s, BTreeMap::from([("myocardial infarction".to_string(), ents.clone())]));
        assert!(aggregate_superclasses(&strings(&["sinus bradycardia"]), &client(), &opts).unwrap().is_empty());
    }

    #[test]
    fn unparseable_reply_is_retried_then_fails() {
        struct Garbage(AtomicUsize);
        impl ChatClient for Garbage {
            fn complete(&self, _: &str) -> Result<String, KnowledgeError> {
                self.0.fetch_add(1, Ordering::SeqCst);
                Ok("no idea".into())
            }
            fn model_name(&self) -> &str {
                "garbage"
            }
        }
        let g = Garbage(AtomicUsize::new(0));
        let opts = MiningOptions { concurrency: 1, parse_retries: 2 };
        assert!(matches!(extract_entities("x", &g, &opts), Err(KnowledgeError::Unparseable(_))));
        assert_eq!(g.0.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn corpus_vocabulary_adds_superclasses() {
        let reports = strings(&["anterior myocardial infarction.", "afib", "inferior myocardial infarction. afib"]);
        let out = mine_reports(&reports, &client(), &MiningOptions::default()).unwrap();
        assert_eq!(
            out.vocabulary.entities,
            strings(&[
                "anterior myocardial infarction",
                "atrial fibrillation",
                "inferior myocardial infarction",
                "myocardial infarction"
            ])
        );
        assert_eq!(out.labels[0].indices(), vec![0, 3]);
        assert_eq!(out.labels[1].indices(), vec![1]);
        assert_eq!(out.labels[2].indices(), vec![1, 2, 3]);
    }
}
