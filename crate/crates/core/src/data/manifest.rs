//! JSON dataset manifests over raw little-endian `f32` signal payloads.

use std::collections::HashSet;
use std::fs;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, EcgRecord, Lead};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Payload file, relative to the manifest's directory unless absolute.
    pub path: String,
    /// Byte offset of this record inside the payload file.
    pub offset: u64,
    pub leads: Vec<Lead>,
    pub sample_rate: u32,
    pub length: usize,
    pub report: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    pub split: Split,
}

impl ManifestEntry {
    pub fn payload_bytes(&self) -> u64 {
        (self.leads.len() * self.length * 4) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub records: Vec<ManifestEntry>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            records,
            base_dir: base_dir.into(),
        }
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn payload_path(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.records.iter().filter(move |e| e.split == split)
    }

    /// Subset manifest holding only `split` entries.
    pub fn split(&self, split: Split) -> DatasetManifest {
        DatasetManifest {
            version: self.version,
            records: self.entries(split).cloned().collect(),
            base_dir: self.base_dir.clone(),
        }
    }

    /// Structural checks that do not touch the filesystem.
    pub fn validate_entries(&self) -> Result<(), DataError> {
        if self.version != MANIFEST_VERSION {
            return Err(DataError::Manifest(format!("unsupported version {}", self.version)));
        }
        let mut ids = HashSet::new();
        for e in &self.records {
            if !ids.insert(e.id.as_str()) {
                return Err(DataError::DuplicateId(e.id.clone()));
            }
            if e.leads.is_empty() || e.length == 0 || e.sample_rate == 0 {
                return Err(DataError::Manifest(format!("{}: empty leads, length or sample rate", e.id)));
            }
            let mut seen = HashSet::new();
            if !e.leads.iter().all(|l| seen.insert(*l)) {
                return Err(DataError::Manifest(format!("{}: repeated lead", e.id)));
            }
        }
        Ok(())
    }

    /// Read and validate one record's signal.
    pub fn read_record(&self, entry: &ManifestEntry) -> Result<EcgRecord, DataError> {
        let path = self.payload_path(entry);
        let mut f = fs::File::open(&path).map_err(|_| DataError::MissingPayload(path.clone()))?;
        f.seek(SeekFrom::Start(entry.offset))?;
        let mut buf = vec![0u8; entry.payload_bytes() as usize];
        f.read_exact(&mut buf).map_err(|_| DataError::ShapeMismatch {
            id: entry.id.clone(),
            detail: format!("payload shorter than {} leads x {} samples", entry.leads.len(), entry.length),
        })?;
        let signal = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        EcgRecord::new(entry.id.clone(), entry.leads.clone(), signal, entry.sample_rate, entry.report.clone())
    }

    pub fn read_all(&self) -> Result<Vec<EcgRecord>, DataError> {
        self.records.iter().map(|e| self.read_record(e)).collect()
    }
}

/// Parse and fully validate a manifest: unique ids, payload files present and
/// large enough for every declared `[leads x length]` block.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::Manifest(format!("{}: {e}", path.display())))?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| DataError::Manifest(format!("{}: {e}", path.display())))?;
    manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate_entries()?;
    for e in &manifest.records {
        let p = manifest.payload_path(e);
        let meta = fs::metadata(&p).map_err(|_| DataError::MissingPayload(p.clone()))?;
        if meta.len() < e.offset + e.payload_bytes() {
            return Err(DataError::ShapeMismatch {
                id: e.id.clone(),
                detail: format!(
                    "{} holds {} bytes, record needs bytes {}..{}",
                    p.display(),
                    meta.len(),
                    e.offset,
                    e.offset + e.payload_bytes()
                ),
            });
        }
    }
    Ok(manifest)
}

pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<(), DataError> {
    let json = serde_json::to_string_pretty(manifest).map_err(|e| DataError::Manifest(e.to_string()))?;
    fs::write(path, json + "\n")?;
    Ok(())
}

/// Appends records to a single payload file and builds the matching entries.
pub struct PayloadWriter {
    file: fs::File,
    rel_path: String,
    offset: u64,
    entries: Vec<ManifestEntry>,
}

impl PayloadWriter {
    /// `dir/rel_path` is created (truncated if present).
    pub fn create(dir: &Path, rel_path: &str) -> Result<Self, DataError> {
        let full = dir.join(rel_path);
        if let Some(parent) = full.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(Self {
            file: fs::File::create(full)?,
            rel_path: rel_path.to_string(),
            offset: 0,
            entries: Vec::new(),
        })
    }

    pub fn append(&mut self, rec: &EcgRecord, labels: Option<Vec<String>>, split: Split) -> Result<(), DataError> {
        let mut bytes = Vec::with_capacity(rec.signal().len() * 4);
        for &v in rec.signal() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        self.file.write_all(&bytes)?;
        self.entries.push(ManifestEntry {
            id: rec.id().to_string(),
            path: self.rel_path.clone(),
            offset: self.offset,
            leads: rec.leads().to_vec(),
            sample_rate: rec.sample_rate_hz(),
            length: rec.len(),
            report: rec.report().to_string(),
            labels,
            split,
        });
        self.offset += bytes.len() as u64;
        Ok(())
    }

    pub fn finish(mut self, base_dir: &Path) -> Result<DatasetManifest, DataError> {
        self.file.flush()?;
        Ok(DatasetManifest::new(self.entries, base_dir))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, n_leads: usize, len: usize) -> EcgRecord {
        let signal = (0..n_leads * len).map(|i| i as f64 * 0.25).collect();
        EcgRecord::new(id, Lead::first(n_leads), signal, 500, format!("report {id}")).unwrap()
    }

    #[test]
    fn write_then_load_two_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = PayloadWriter::create(dir.path(), "signals.f32").unwrap();
        w.append(&rec("a", 12, 10), None, Split::Train).unwrap();
        w.append(&rec("b", 12, 10), Some(vec!["x".into()]), Split::Test).unwrap();
        let m = w.finish(dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        save_manifest(&path, &m).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded, m);
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.read_record(&loaded.records[1]).unwrap(), rec("b", 12, 10));
        assert_eq!(loaded.split(Split::Test).len(), 1);
    }

    #[test]
    fn missing_payload_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = PayloadWriter::create(dir.path(), "signals.f32").unwrap();
        w.append(&rec("a", 1, 4), None, Split::Train).unwrap();
        let m = w.finish(dir.path()).unwrap();
        let path = dir.path().join("m.json");
        save_manifest(&path, &m).unwrap();
        fs::remove_file(dir.path().join("signals.f32")).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("missing payload"), "{err}");
    }

    #[test]
    fn shape_mismatch_and_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = PayloadWriter::create(dir.path(), "s.f32").unwrap();
        w.append(&rec("a", 2, 4), None, Split::Train).unwrap();
        let mut m = w.finish(dir.path()).unwrap();
        m.records[0].length = 5;
        let path = dir.path().join("m.json");
        save_manifest(&path, &m).unwrap();
        assert!(matches!(load_manifest(&path), Err(DataError::ShapeMismatch { .. })));

        m.records[0].length = 4;
        let dup = m.records[0].clone();
        m.records.push(dup);
        save_manifest(&path, &m).unwrap();
        assert!(matches!(load_manifest(&path), Err(DataError::DuplicateId(_))));
    }

    #[test]
    fn parses_hand_written_manifest() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("p.f32"), vec![0u8; 2 * 12 * 3 * 4]).unwrap();
        let json = r#"{"version":1,"records":[
            {"id":"r1","path":"p.f32","offset":0,"leads":[1,2,3,4,5,6,7,8,9,10,11,12],"sample_rate":500,"length":3,"report":"sinus rhythm","split":"train"},
            {"id":"r2","path":"p.f32","offset":144,"leads":[1,2,3,4,5,6,7,8,9,10,11,12],"sample_rate":500,"length":3,"report":"afib","labels":["atrial fibrillation"],"split":"test"}]}"#;
        fs::write(dir.path().join("m.json"), json).unwrap();
        let m = load_manifest(&dir.path().join("m.json")).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.records[1].labels.as_deref(), Some(&["atrial fibrillation".to_string()][..]));
        assert_eq!(m.read_record(&m.records[1]).unwrap().leads().len(), 12);
    }

    #[test]
    fn rejects_invalid_lead_index() {
        let json = r#"{"version":1,"records":[{"id":"r","path":"p","offset":0,"leads":[13],"sample_rate":500,"length":3,"report":"","split":"train"}]}"#;
        assert!(serde_json::from_str::<DatasetManifest>(json).is_err());
    }
}
