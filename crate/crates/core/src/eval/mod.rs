//! Downstream evaluation: zero-shot scoring through the query network,
//! linear probing on frozen features, lead sweeps and seen/unseen splits.

mod metrics;
mod probe;
mod seen;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;

use serde::{Deserialize, Serialize};

pub use metrics::{class_metrics, compute_auc, compute_f1, ClassMetrics};
pub use probe::{linear_probe, sample_fraction, ProbeConfig, ProbeOutcome};
pub use seen::{seen_unseen_split, ClassOverlap, SeenUnseen, DEFAULT_OVERLAP_THRESHOLD};

use crate::data::{normalize_record, DatasetManifest, EcgRecord, Lead, Split};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::numerics::logistic;

pub const F1_THRESHOLD: f64 = 0.5;

/// Normalized downstream records with multi-hot labels over `class_names`.
#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamSet {
    pub class_names: Vec<String>,
    pub records: Vec<EcgRecord>,
    pub labels: Vec<Vec<f64>>,
}

/// Sorted union of the label names carried by `manifest`.
pub fn manifest_classes(manifest: &DatasetManifest) -> Vec<String> {
    let set: BTreeSet<&String> = manifest.records.iter().flat_map(|e| e.labels.iter().flatten()).collect();
    set.into_iter().cloned().collect()
}

impl DownstreamSet {
    pub fn from_manifest(manifest: &DatasetManifest, split: Split, class_names: &[String]) -> Result<Self> {
        let mut records = Vec::new();
        let mut labels = Vec::new();
        for e in manifest.entries(split) {
            let names = e
                .labels
                .as_ref()
                .ok_or_else(|| Error::Invalid(format!("record {} carries no downstream labels", e.id)))?;
            labels.push(class_names.iter().map(|c| names.contains(c) as u8 as f64).collect());
            records.push(normalize_record(manifest.read_record(e)?));
        }
        Ok(Self {
            class_names: class_names.to_vec(),
            records,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Keep only `leads`, or zero every other lead when `zero_pad` is set.
    pub fn restrict(&self, leads: &[Lead], zero_pad: bool) -> Result<Self> {
        let records = self
            .records
            .iter()
            .map(|r| if zero_pad { r.zero_padded(leads) } else { r.restrict_to(leads) })
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self {
            class_names: self.class_names.clone(),
            records,
            labels: self.labels.clone(),
        })
    }

    fn lead_names(&self) -> Vec<String> {
        self.records
            .first()
            .map(|r| r.leads().iter().map(|l| l.name().to_string()).collect())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub class_names: Vec<String>,
    pub auc: Vec<Option<f64>>,
    pub f1: Vec<f64>,
    pub macro_auc: Option<f64>,
    pub macro_f1: Option<f64>,
    /// Classes whose AUC is undefined (single label value in the split).
    pub skipped_classes: Vec<String>,
    pub leads: Vec<String>,
    pub zero_padded: bool,
    pub fraction: Option<f64>,
    pub num_records: usize,
    pub config_hash: String,
}

impl EvalReport {
    pub fn from_scores(task: &str, set: &DownstreamSet, scores: &[Vec<f64>]) -> Self {
        let m = class_metrics(scores, &set.labels, F1_THRESHOLD);
        let skipped = set
            .class_names
            .iter()
            .zip(&m.auc)
            .filter(|(_, a)| a.is_none())
            .map(|(c, _)| c.clone())
            .collect();
        Self {
            task: task.to_string(),
            class_names: set.class_names.clone(),
            auc: m.auc,
            f1: m.f1,
            macro_auc: m.macro_auc,
            macro_f1: m.macro_f1,
            skipped_classes: skipped,
            leads: set.lead_names(),
            zero_padded: false,
            fraction: None,
            num_records: set.len(),
            config_hash: String::new(),
        }
    }

    pub fn with_config_hash(mut self, hash: &str) -> Self {
        self.config_hash = hash.to_string();
        self
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// One row per class: name, AUC (empty when undefined), F1.
    pub fn write_class_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Invalid(e.to_string()))?;
        let rows = self.class_names.iter().zip(&self.auc).zip(&self.f1);
        let write = || -> std::result::Result<(), csv::Error> {
            w.write_record(["class", "auc", "f1"])?;
            for ((c, a), f) in rows {
                w.write_record([c.clone(), a.map(|v| v.to_string()).unwrap_or_default(), f.to_string()])?;
            }
            w.flush()?;
            Ok(())
        };
        write().map_err(|e| Error::Invalid(e.to_string()))
    }
}

/// `k, macro_auc, macro_f1` rows of a lead sweep, for plotting.
pub fn write_sweep_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut out = String::from("k,macro_auc,macro_f1\n");
    for r in reports {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        out += &format!("{},{},{}\n", r.leads.len(), f(r.macro_auc), f(r.macro_f1));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Map `f` over `items` on all available cores, preserving order. Every item
/// is computed independently, so the result does not depend on scheduling.
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).clamp(1, items.len().max(1));
    let next = AtomicUsize::new(0);
    let mut out: Vec<(usize, Result<R>)> = thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut local = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        if i >= items.len() {
                            break;
                        }
                        local.push((i, f(&items[i])));
                    }
                    local
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    out.sort_by_key(|(i, _)| *i);
    out.into_iter().map(|(_, r)| r).collect()
}

/// Sigmoid probabilities `[record][class]` from class-name queries.
pub fn zero_shot_scores(state: &ModelState, set: &DownstreamSet) -> Result<Vec<Vec<f64>>> {
    if set.is_empty() {
        return Err(Error::Invalid("zero-shot evaluation needs a nonempty split".into()));
    }
    if set.class_names.is_empty() {
        return Err(Error::Invalid("zero-shot evaluation needs at least one class name".into()));
    }
    let queries = state.embed_texts(&set.class_names)?;
    par_map(&set.records, |rec| {
        let enc = state.encode_record(rec)?;
        let logits = state.query_logits(&queries, &enc.tokens)?;
        Ok(logits.into_iter().map(logistic).collect())
    })
}

/// Frozen-model zero-shot classification with the class names as queries.
pub fn zero_shot(state: &ModelState, set: &DownstreamSet) -> Result<EvalReport> {
    let scores = zero_shot_scores(state, set)?;
    Ok(EvalReport::from_scores("zero_shot", set, &scores))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    ZeroShot,
    Probe,
}

/// Data for a probe-mode sweep.
#[derive(Debug, Clone, Copy)]
pub struct ProbeSets<'a> {
    pub train: &'a DownstreamSet,
    pub valid: &'a DownstreamSet,
    pub config: &'a ProbeConfig,
}

/// Evaluate with the first `k` leads of the standard order for k = 1..=12.
/// `zero_pad` feeds twelve leads with the missing ones zeroed instead.
pub fn lead_sweep(
    state: &ModelState,
    test: &DownstreamSet,
    mode: SweepMode,
    probe: Option<ProbeSets<'_>>,
    zero_pad: bool,
) -> Result<Vec<EvalReport>> {
    if test.records.iter().any(|r| !r.has_all_leads()) {
        return Err(Error::Invalid("lead sweeps need 12-lead records".into()));
    }
    (1..=crate::data::NUM_LEADS)
        .map(|k| {
            let keep = Lead::first(k);
            let sub = test.restrict(&keep, zero_pad)?;
            let mut report = match mode {
                SweepMode::ZeroShot => zero_shot(state, &sub)?,
                SweepMode::Probe => {
                    let p = probe.ok_or_else(|| Error::Invalid("probe sweeps need train and valid sets".into()))?;
                    let train = p.train.restrict(&keep, zero_pad)?;
                    let valid = p.valid.restrict(&keep, zero_pad)?;
                    linear_probe(state, &train, &valid, &sub, p.config)?.report
                }
            };
            report.task = format!("lead_sweep_{}", if mode == SweepMode::ZeroShot { "zero_shot" } else { "probe" });
            report.leads = keep.iter().map(|l| l.name().to_string()).collect();
            report.zero_padded = zero_pad;
            Ok(report)
        })
        .collect()
}
