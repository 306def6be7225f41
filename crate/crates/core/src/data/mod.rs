//! ECG records, dataset manifests, normalization and the synthetic corpus.

mod csv_import;
mod manifest;
mod normalize;
mod record;
pub mod synthetic;

use std::path::PathBuf;

use thiserror::Error;

pub use csv_import::import_csv;
pub use manifest::{load_manifest, save_manifest, DatasetManifest, ManifestEntry, PayloadWriter, Split, MANIFEST_VERSION};
pub use normalize::{normalize_record, FLAT_VARIANCE};
pub use record::{EcgRecord, Lead, LEAD_NAMES, NUM_LEADS};
pub use synthetic::{generate_synthetic, SyntheticConfig, SyntheticCorpus};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid lead {0:?}")]
    InvalidLead(String),
    #[error("invalid record: {0}")]
    Invalid(String),
    #[error("missing payload {0}")]
    MissingPayload(PathBuf),
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("shape mismatch for {id}: {detail}")]
    ShapeMismatch { id: String, detail: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error("synthetic generator: {0}")]
    Synthetic(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
