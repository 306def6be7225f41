use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{total_loss, BatchItem, LossConfig, PretrainConfig};
use crate::data::{normalize_record, DatasetManifest, EcgRecord, Split};
use crate::encoder::{dynamic_lead_mask, segment_mask, EncoderConfig, TokenGrid};
use crate::error::{Error, Result};
use crate::knowledge::LabelVector;
use crate::model::{ModelConfig, ModelState};
use crate::numerics::{cosine_schedule, AdamW, Graph};
use crate::text::TextVocab;

/// A normalized record with its entity label vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedRecord {
    pub record: EcgRecord,
    pub labels: Vec<f64>,
}

/// Read and normalize the `split` records of `manifest`, attaching labels.
/// Every record must have a label vector.
pub fn prepare_records(
    manifest: &DatasetManifest,
    split: Split,
    labels: &HashMap<String, LabelVector>,
) -> Result<Vec<PreparedRecord>> {
    manifest
        .entries(split)
        .map(|e| {
            let l = labels
                .get(&e.id)
                .ok_or_else(|| Error::Invalid(format!("record {} has no label vector", e.id)))?;
            Ok(PreparedRecord {
                record: normalize_record(manifest.read_record(e)?),
                labels: l.as_f64(),
            })
        })
        .collect()
}

/// Tokenize and apply the configured lead and segment masking.
pub fn sample_grid<R: Rng>(rec: &EcgRecord, enc: &EncoderConfig, cfg: &PretrainConfig, rng: &mut R) -> Result<TokenGrid> {
    let mut grid = TokenGrid::from_record(rec, enc)?;
    if cfg.lead_masking {
        grid = dynamic_lead_mask(&grid, cfg.min_masked_leads, cfg.max_masked_leads, rng)?;
    }
    if cfg.segment_masking {
        grid = segment_mask(&grid, cfg.mask_ratio, rng)?;
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_contrast: Option<f64>,
    pub loss_cq: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainPaths {
    pub metrics: PathBuf,
    pub validation: PathBuf,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
}

impl PretrainPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            metrics: dir.join("metrics.jsonl"),
            validation: dir.join("validation.jsonl"),
            best_checkpoint: dir.join("best.ckpt"),
            final_checkpoint: dir.join("final.ckpt"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub state: ModelState,
    pub history: Vec<MetricsLine>,
    pub best_valid_loss: Option<f64>,
    pub paths: PretrainPaths,
}

impl PretrainOutcome {
    /// Relative drop of the mean loss over the last `window` steps against
    /// the step-0 loss.
    pub fn loss_reduction(&self, window: usize) -> f64 {
        let first = self.history[0].loss_total;
        let tail = &self.history[self.history.len().saturating_sub(window.max(1))..];
        let mean = tail.iter().map(|m| m.loss_total).sum::<f64>() / tail.len() as f64;
        1.0 - mean / first
    }
}

struct Losses {
    total: f64,
    contrast: Option<f64>,
    cq: Option<f64>,
}

fn batch_items<'a, R: Rng>(
    records: &[&'a PreparedRecord],
    enc: &EncoderConfig,
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<Vec<BatchItem<'a>>> {
    records
        .iter()
        .map(|r| {
            Ok(BatchItem {
                grid: sample_grid(&r.record, enc, cfg, rng)?,
                report: r.record.report(),
                labels: &r.labels,
            })
        })
        .collect()
}

fn validation_loss(state: &ModelState, valid: &[PreparedRecord], entities: &[String], cfg: &PretrainConfig) -> Result<Option<f64>> {
    let min_batch = if cfg.use_contrastive { 2 } else { 1 };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    let refs: Vec<&PreparedRecord> = valid.iter().collect();
    let mut sum = 0.0;
    let mut n = 0usize;
    for chunk in refs.chunks(cfg.batch_size) {
        if chunk.len() < min_batch {
            continue;
        }
        let items = batch_items(chunk, &state.model.cfg.encoder, cfg, &mut rng)?;
        let mut g = Graph::new();
        let p = state.params.bind(&mut g, false);
        let parts = total_loss(&mut g, &p, &state.model, &items, entities, &LossConfig::from(cfg))?;
        sum += g.value(parts.total).data()[0] as f64 * chunk.len() as f64;
        n += chunk.len();
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Train from scratch on `train`, validating on `valid` after every epoch.
/// Writes per-step metrics, per-epoch validation losses, the best-validation
/// checkpoint and the final checkpoint into `out_dir`.
pub fn pretrain(
    train: &[PreparedRecord],
    valid: &[PreparedRecord],
    entities: &[String],
    model_cfg: &ModelConfig,
    cfg: &PretrainConfig,
    out_dir: &Path,
    config_hash: &str,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let min_batch = if cfg.use_contrastive { 2 } else { 1 };
    if train.len() < min_batch {
        return Err(Error::Invalid(format!("need at least {min_batch} training records")));
    }
    for r in train.iter().chain(valid) {
        if r.labels.len() != entities.len() {
            return Err(Error::Invalid(format!(
                "{}: {} labels for {} entities",
                r.record.id(),
                r.labels.len(),
                entities.len()
            )));
        }
    }
    fs::create_dir_all(out_dir)?;
    let paths = PretrainPaths::in_dir(out_dir);

    let corpus = train.iter().map(|r| r.record.report()).chain(entities.iter().map(String::as_str));
    let mut state = ModelState::init(model_cfg, TextVocab::build(corpus))?;
    let mut opt = AdamW::new(cfg.optimizer, &state.params);
    let loss_cfg = LossConfig::from(cfg);

    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.max_steps.unwrap_or(cfg.epochs * batches_per_epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut metrics = fs::File::create(&paths.metrics)?;
    let mut validation = fs::File::create(&paths.validation)?;
    let mut history = Vec::with_capacity(total_steps);
    let mut best: Option<f64> = None;
    let ckpt_meta = |step: usize| json!({ "step": step, "pretrain": cfg });

    let mut step = 0;
    let mut epoch = 0;
    while step < total_steps {
        let mut order: Vec<&PreparedRecord> = train.iter().collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total_steps {
                break;
            }
            if chunk.len() < min_batch {
                continue;
            }
            let items = batch_items(chunk, &model_cfg.encoder, cfg, &mut rng)?;
            let lr = cosine_schedule(step, total_steps, cfg.optimizer.lr, cfg.warmup_steps);

            let mut g = Graph::new();
            let p = state.params.bind(&mut g, true);
            let parts = total_loss(&mut g, &p, &state.model, &items, entities, &loss_cfg)?;
            let read = |v| g.value(v).data()[0] as f64;
            let losses = Losses {
                total: read(parts.total),
                contrast: parts.contrast.map(read),
                cq: parts.cq.map(read),
            };
            if !losses.total.is_finite() {
                let ids: Vec<&str> = chunk.iter().map(|r| r.record.id()).collect();
                let dump = out_dir.join(format!("nonfinite_step{step}.json"));
                let detail = json!({
                    "step": step, "lr": lr, "records": ids,
                    "loss_total": format!("{}", losses.total),
                    "loss_contrast": losses.contrast.map(|v| format!("{v}")),
                    "loss_cq": losses.cq.map(|v| format!("{v}")),
                });
                fs::write(&dump, serde_json::to_string_pretty(&detail)?)?;
                return Err(Error::NonFinite {
                    step,
                    detail: format!("diagnostics written to {}", dump.display()),
                });
            }
            let grads = g.backward(parts.total)?;
            let grads = p.collect_grads(&state.params, &grads);
            opt.step(&mut state.params, &grads, lr, None)?;

            let line = MetricsLine {
                step,
                lr,
                loss_total: losses.total,
                loss_contrast: losses.contrast,
                loss_cq: losses.cq,
            };
            serde_json::to_writer(&mut metrics, &line)?;
            metrics.write_all(b"\n")?;
            log::debug!("step {step} lr {lr:.3e} loss {:.5}", losses.total);
            history.push(line);
            step += 1;
        }
        epoch += 1;
        if let Some(v) = validation_loss(&state, valid, entities, cfg)? {
            serde_json::to_writer(&mut validation, &json!({ "epoch": epoch, "step": step, "loss_valid": v }))?;
            validation.write_all(b"\n")?;
            if best.is_none_or(|b| v < b) {
                best = Some(v);
                state.save(&paths.best_checkpoint, config_hash, ckpt_meta(step))?;
            }
        }
    }
    state.save(&paths.final_checkpoint, config_hash, ckpt_meta(step))?;
    if best.is_none() {
        fs::copy(&paths.final_checkpoint, &paths.best_checkpoint)?;
    }
    Ok(PretrainOutcome {
        state,
        history,
        best_valid_loss: best,
        paths,
    })
}
