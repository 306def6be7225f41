//! Parameter checkpoints.
//!
//! Layout: 8-byte magic `KMERLCK1`, little-endian `u64` header length, a JSON
//! header (tensor names, shapes, element offsets, config hash, free-form
//! config), then every tensor as little-endian `f32` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamStore, Scalar, Tensor};

const MAGIC: &[u8; 8] = b"KMERLCK1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements from the start of the data section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config_hash: String,
    #[serde(default)]
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint<T: Scalar>(
    params: &ParamStore<T>,
    config_hash: &str,
    config: serde_json::Value,
) -> Result<Vec<u8>, NumericsError> {
    let mut offset = 0;
    let tensors = params
        .iter()
        .map(|(_, name, t)| {
            let e = TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.len();
            e
        })
        .collect();
    let header = CheckpointHeader {
        config_hash: config_hash.to_string(),
        config,
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| NumericsError::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + offset * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(CheckpointHeader, ParamStore<T>), NumericsError> {
    let bad = |m: &str| NumericsError::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("bad magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize.checked_add(hlen).ok_or_else(|| bad("header length overflow"))?;
    if bytes.len() < data_start {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..data_start]).map_err(|e| NumericsError::Checkpoint(e.to_string()))?;
    let data = &bytes[data_start..];
    let mut store = ParamStore::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let (lo, hi) = (e.offset * 4, (e.offset + n) * 4);
        if hi > data.len() {
            return Err(bad(&format!("tensor {} exceeds payload", e.name)));
        }
        let values = data[lo..hi]
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        store.insert(e.name.clone(), Tensor::new(e.shape.clone(), values)?)?;
    }
    Ok((header, store))
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    params: &ParamStore<T>,
    config_hash: &str,
    config: serde_json::Value,
) -> Result<(), NumericsError> {
    let bytes = encode_checkpoint(params, config_hash, config)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(CheckpointHeader, ParamStore<T>), NumericsError> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_f32_values() {
        let mut p = ParamStore::<f32>::new();
        p.insert("a.w", Tensor::matrix(2, 3, vec![1.0, -2.5, 3.25, 0.0, 1e-7, -1e7]).unwrap())
            .unwrap();
        p.insert("b", Tensor::vector(vec![0.5])).unwrap();
        let bytes = encode_checkpoint(&p, "abc", serde_json::json!({"d": 8})).unwrap();
        let (h, q) = decode_checkpoint::<f32>(&bytes).unwrap();
        assert_eq!(h.config_hash, "abc");
        assert_eq!(h.config["d"], 8);
        assert_eq!(q, p);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_checkpoint::<f32>(b"not a checkpoint").is_err());
        let p = ParamStore::<f32>::new();
        let mut bytes = encode_checkpoint(&p, "", serde_json::Value::Null).unwrap();
        bytes.truncate(12);
        assert!(decode_checkpoint::<f32>(&bytes).is_err());
    }
}
