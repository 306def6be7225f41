use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use base64::Engine;
use base64::engine::general_purpose::STANDARD;
use serde::{Deserialize, Serialize};

use super::{EntityVocabulary, KnowledgeError};

/// Binary label vector aligned with a vocabulary's entity order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelVector {
    pub bits: Vec<bool>,
}

impl LabelVector {
    pub fn zeros(len: usize) -> Self {
        Self { bits: vec![false; len] }
    }

    pub fn from_indices(len: usize, indices: &[usize]) -> Result<Self, KnowledgeError> {
        let mut v = Self::zeros(len);
        for &i in indices {
            *v.bits
                .get_mut(i)
                .ok_or_else(|| KnowledgeError::Format(format!("label index {i} out of range {len}")))? = true;
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Little-endian bitset: bit `i` lives in byte `i / 8` at position `i % 8`.
    pub fn to_base64(&self) -> String {
        let mut bytes = vec![0u8; self.bits.len().div_ceil(8)];
        for i in self.indices() {
            bytes[i / 8] |= 1 << (i % 8);
        }
        STANDARD.encode(bytes)
    }

    pub fn from_base64(len: usize, text: &str) -> Result<Self, KnowledgeError> {
        let bytes = STANDARD
            .decode(text)
            .map_err(|e| KnowledgeError::Format(format!("bad base64 bitset: {e}")))?;
        if bytes.len() != len.div_ceil(8) {
            return Err(KnowledgeError::Format(format!(
                "bitset has {} bytes, expected {} for {len} labels",
                bytes.len(),
                len.div_ceil(8)
            )));
        }
        let bits: Vec<bool> = (0..bytes.len() * 8).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
        if bits[len..].iter().any(|&b| b) {
            return Err(KnowledgeError::Format("bitset has bits past the vocabulary".into()));
        }
        Ok(Self { bits: bits[..len].to_vec() })
    }
}

/// Map mined mentions to a label vector, then set every superclass that has a
/// set member, transitively.
pub fn label_report(entities: &[String], vocab: &EntityVocabulary) -> LabelVector {
    let mut v = LabelVector::zeros(vocab.len());
    for raw in entities {
        match vocab.canonical(raw).and_then(|c| vocab.index_of(c)) {
            Some(i) => v.bits[i] = true,
            None => log::warn!("entity {raw:?} is not in the vocabulary; ignored"),
        }
    }
    // Superclasses may nest, so repeat until nothing changes.
    loop {
        let mut changed = false;
        for (sup, members) in &vocab.superclasses {
            let Some(i) = vocab.index_of(sup) else { continue };
            if !v.bits[i] && members.iter().any(|m| vocab.index_of(m).is_some_and(|j| v.bits[j])) {
                v.bits[i] = true;
                changed = true;
            }
        }
        if !changed {
            return v;
        }
    }
}

/// One line of a labels file. Either `indices` or `bits` (base64) is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub record_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indices: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bits: Option<String>,
}

pub fn write_labels(path: &Path, labels: &[(String, LabelVector)]) -> Result<(), KnowledgeError> {
    let mut out = Vec::new();
    for (id, v) in labels {
        let line = LabelRecord {
            record_id: id.clone(),
            indices: Some(v.indices()),
            bits: None,
        };
        serde_json::to_writer(&mut out, &line).map_err(|e| KnowledgeError::Format(e.to_string()))?;
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Read a labels file against a vocabulary of `len` entities, in file order.
pub fn read_labels(path: &Path, len: usize) -> Result<Vec<(String, LabelVector)>, KnowledgeError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabelRecord = serde_json::from_str(&line)
            .map_err(|e| KnowledgeError::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let v = match (&rec.indices, &rec.bits) {
            (Some(idx), None) => LabelVector::from_indices(len, idx)?,
            (None, Some(b)) => LabelVector::from_base64(len, b)?,
            _ => {
                return Err(KnowledgeError::Format(format!(
                    "{}:{}: need exactly one of indices or bits",
                    path.display(),
                    n + 1
                )))
            }
        };
        out.push((rec.record_id, v));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn mi_vocab() -> EntityVocabulary {
        let sup = BTreeMap::from([(
            "myocardial infarction".to_string(),
            vec!["anterior myocardial infarction".to_string(), "inferior myocardial infarction".to_string()],
        )]);
        let merge = BTreeMap::from([("anterior mi".to_string(), "anterior myocardial infarction".to_string())]);
        EntityVocabulary::build(
            vec![
                "anterior myocardial infarction".into(),
                "inferior myocardial infarction".into(),
                "sinus rhythm".into(),
            ],
            merge,
            sup,
        )
        .unwrap()
    }

    #[test]
    fn member_implies_superclass() {
        let v = mi_vocab();
        // entities: anterior mi, inferior mi, myocardial infarction, sinus rhythm
        let l = label_report(&["Anterior MI".to_string()], &v);
        assert_eq!(l.bits, vec![true, false, true, false]);
        assert_eq!(label_report(&[], &v).bits, vec![false; 4]);
        assert_eq!(label_report(&["unknown".into()], &v).bits, vec![false; 4]);
    }

    #[test]
    fn jsonl_round_trip_and_base64_input() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.jsonl");
        let a = LabelVector::from_indices(10, &[0, 9]).unwrap();
        write_labels(&path, &[("r1".into(), a.clone())]).unwrap();
        assert_eq!(read_labels(&path, 10).unwrap(), vec![("r1".to_string(), a.clone())]);

        fs::write(&path, format!("{{\"record_id\":\"r2\",\"bits\":\"{}\"}}\n", a.to_base64())).unwrap();
        assert_eq!(read_labels(&path, 10).unwrap()[0].1, a);
        assert!(read_labels(&path, 20).is_err());
    }

    proptest! {
        #[test]
        fn base64_round_trip(bits in proptest::collection::vec(any::<bool>(), 0..40)) {
            let v = LabelVector { bits };
            prop_assert_eq!(LabelVector::from_base64(v.len(), &v.to_base64()).unwrap(), v);
        }
    }
}
