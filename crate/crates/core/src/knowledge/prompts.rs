//! Prompt texts for the three mining stages and parsers for the replies.

use serde_json::{Map, Value};

use super::KnowledgeError;

pub const EXTRACT_INSTRUCTION: &str = "Please extract all positive Cardiac-related Entities from the given ECG report. Output format is [Entity1, Entity2, ...]";

pub const VERIFY_INSTRUCTION: &str = "Please verify the extracted cardiac-related entities as existing and positive in the given report. Output format is YES or NO";

const MERGE_HEAD: &str =
    "Please merge the cardiac-related entities that have the same semantics but different expressions. Here are ";
const MERGE_TAIL: &str =
    ". Output format is JSON, where the key is the original name and the value is the merged name.";

const SUPERCLASS_HEAD: &str = "Please detect all the superclasses present in ";
const SUPERCLASS_TAIL: &str = ". Output format is JSON, where the key is the superclass name and the values are the cardiac-related entities that belong to this superclass.";

const REPORT_TAG: &str = "\nReport: ";
const ENTITY_TAG: &str = "\nEntity: ";

fn entity_list(entities: &[String]) -> String {
    serde_json::to_string(entities).expect("string list serializes")
}

pub fn extraction_prompt(report: &str) -> String {
    format!("{EXTRACT_INSTRUCTION}{REPORT_TAG}{report}")
}

pub fn verification_prompt(report: &str, entity: &str) -> String {
    format!("{VERIFY_INSTRUCTION}{REPORT_TAG}{report}{ENTITY_TAG}{entity}")
}

pub fn merge_prompt(entities: &[String]) -> String {
    format!("{MERGE_HEAD}{}{MERGE_TAIL}", entity_list(entities))
}

pub fn superclass_prompt(entities: &[String]) -> String {
    format!("{SUPERCLASS_HEAD}{}{SUPERCLASS_TAIL}", entity_list(entities))
}

/// A mining prompt recovered from its text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PromptKind {
    Extract { report: String },
    Verify { report: String, entity: String },
    Merge { entities: Vec<String> },
    Superclass { entities: Vec<String> },
}

/// Inverse of the prompt builders above; `None` for foreign prompts.
pub fn classify(prompt: &str) -> Option<PromptKind> {
    if let Some(rest) = prompt.strip_prefix(EXTRACT_INSTRUCTION) {
        let report = rest.strip_prefix(REPORT_TAG)?;
        return Some(PromptKind::Extract { report: report.to_string() });
    }
    if let Some(rest) = prompt.strip_prefix(VERIFY_INSTRUCTION) {
        let rest = rest.strip_prefix(REPORT_TAG)?;
        let split = rest.rfind(ENTITY_TAG)?;
        return Some(PromptKind::Verify {
            report: rest[..split].to_string(),
            entity: rest[split + ENTITY_TAG.len()..].to_string(),
        });
    }
    if let Some(rest) = prompt.strip_prefix(MERGE_HEAD) {
        let list = rest.strip_suffix(MERGE_TAIL)?;
        return serde_json::from_str(list).ok().map(|entities| PromptKind::Merge { entities });
    }
    if let Some(rest) = prompt.strip_prefix(SUPERCLASS_HEAD) {
        let list = rest.strip_suffix(SUPERCLASS_TAIL)?;
        return serde_json::from_str(list)
            .ok()
            .map(|entities| PromptKind::Superclass { entities });
    }
    None
}

fn strip_quotes(s: &str) -> &str {
    s.trim().trim_matches(|c: char| c == '"' || c == '\'' || c == '`').trim()
}

/// Parse `[a, b, ...]`, quoted or not, from anywhere in the reply.
pub fn parse_bracket_list(reply: &str) -> Result<Vec<String>, KnowledgeError> {
    let start = reply
        .find('[')
        .ok_or_else(|| KnowledgeError::Unparseable(format!("no list in {reply:?}")))?;
    let end = reply[start..]
        .find(']')
        .map(|e| start + e)
        .ok_or_else(|| KnowledgeError::Unparseable(format!("unterminated list in {reply:?}")))?;
    let inner = &reply[start..=end];
    if let Ok(items) = serde_json::from_str::<Vec<String>>(inner) {
        return Ok(items.into_iter().filter(|s| !s.trim().is_empty()).collect());
    }
    Ok(inner[1..inner.len() - 1]
        .split(',')
        .map(strip_quotes)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect())
}

pub fn parse_yes_no(reply: &str) -> Result<bool, KnowledgeError> {
    let head = reply
        .trim()
        .trim_start_matches(|c: char| !c.is_alphabetic())
        .to_ascii_uppercase();
    if head.starts_with("YES") {
        Ok(true)
    } else if head.starts_with("NO") {
        Ok(false)
    } else {
        Err(KnowledgeError::Unparseable(format!("expected YES or NO, got {reply:?}")))
    }
}

/// First `{...}` JSON object in the reply (tolerates code fences and prose).
pub fn parse_json_object(reply: &str) -> Result<Map<String, Value>, KnowledgeError> {
    let start = reply.find('{');
    let end = reply.rfind('}');
    match (start, end) {
        (Some(s), Some(e)) if e > s => match serde_json::from_str::<Value>(&reply[s..=e]) {
            Ok(Value::Object(map)) => Ok(map),
            _ => Err(KnowledgeError::Unparseable(format!("invalid JSON object in {reply:?}"))),
        },
        _ => Err(KnowledgeError::Unparseable(format!("no JSON object in {reply:?}"))),
    }
}
