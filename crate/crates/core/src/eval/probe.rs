use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{class_metrics, par_map, DownstreamSet, EvalReport, F1_THRESHOLD};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::nn::Linear;
use crate::numerics::{cosine_schedule, logistic, AdamW, AdamWConfig, Graph, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub fraction: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            fraction: 1.0,
            lr: 1e-3,
            weight_decay: 1e-5,
            batch_size: 16,
            epochs: 100,
            warmup_steps: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub report: EvalReport,
    /// Indices of the training records the head saw.
    pub train_indices: Vec<usize>,
    pub best_epoch: usize,
    pub encoder_hash_before: String,
    pub encoder_hash_after: String,
}

/// Seeded, class-stratified subset of `fraction` of the records. Records are
/// grouped by their first positive class (unlabeled records form one more
/// group) and each group contributes `round(fraction * size)` records.
/// Errors when some class positive in `labels` has no positive in the subset.
pub fn sample_fraction(labels: &[Vec<f64>], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} must lie in (0, 1]")));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, y) in labels.iter().enumerate() {
        let key = y.iter().position(|&v| v > 0.5).unwrap_or(usize::MAX);
        groups.entry(key).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = Vec::new();
    for members in groups.values_mut() {
        members.shuffle(&mut rng);
        let take = (fraction * members.len() as f64).round() as usize;
        picked.extend_from_slice(&members[..take.min(members.len())]);
    }
    picked.sort_unstable();
    let classes = labels.first().map_or(0, Vec::len);
    for c in 0..classes {
        let anywhere = labels.iter().any(|y| y[c] > 0.5);
        if anywhere && !picked.iter().any(|&i| labels[i][c] > 0.5) {
            return Err(Error::Invalid(format!(
                "fraction {fraction} leaves class {c} without a training record"
            )));
        }
    }
    if picked.is_empty() {
        return Err(Error::Invalid(format!("fraction {fraction} selects no records")));
    }
    Ok(picked)
}

struct Head {
    linear: Linear,
    params: ParamStore<f32>,
}

impl Head {
    fn logits(&self, x: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = self.linear.forward(&mut g, &p, xv)?;
        let out = g.value(y);
        Ok((0..out.rows()).map(|r| out.row(r).iter().map(|&v| v as f64).collect()).collect())
    }
}

fn features(state: &ModelState, set: &DownstreamSet) -> Result<Vec<Vec<f32>>> {
    par_map(&set.records, |r| {
        Ok(state.encode_record(r)?.features.into_iter().map(|v| v as f32).collect())
    })
}

fn stack(rows: &[Vec<f32>], idx: impl Iterator<Item = usize>) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    let mut n = 0;
    for i in idx {
        data.extend_from_slice(&rows[i]);
        n += 1;
    }
    let d = rows.first().map_or(0, Vec::len);
    Ok(Tensor::new(vec![n, d], data)?)
}

fn probs(logits: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    logits.into_iter().map(|r| r.into_iter().map(logistic).collect()).collect()
}

/// Train a linear head on frozen encoder features (mean-pooled tokens before
/// the projector), pick the epoch with the best validation macro AUC and
/// report on `test`.
pub fn linear_probe(
    state: &ModelState,
    train: &DownstreamSet,
    valid: &DownstreamSet,
    test: &DownstreamSet,
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome> {
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("probe batch_size and epochs must be positive".into()));
    }
    if test.is_empty() || valid.is_empty() {
        return Err(Error::Invalid("linear probing needs nonempty valid and test splits".into()));
    }
    let hash_before = state.param_hash("ecg.");
    let chosen = sample_fraction(&train.labels, cfg.fraction, cfg.seed)?;
    let classes = train.class_names.len();

    let train_x = features(state, train)?;
    let valid_x = stack(&features(state, valid)?, 0..valid.len())?;
    let test_x = stack(&features(state, test)?, 0..test.len())?;
    let dim = train_x[0].len();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut init = ParamStore::new();
    let linear = Linear::new(&mut init, "probe", dim, classes, true, &mut rng)?;
    let mut head = Head { linear, params: init.cast() };
    let opt_cfg = AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(opt_cfg, &head.params);
    let total_steps = cfg.epochs * chosen.len().div_ceil(cfg.batch_size);

    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    let mut order = chosen.clone();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let x = stack(&train_x, batch.iter().copied())?;
            let y: Vec<f32> = batch.iter().flat_map(|&i| train.labels[i].iter().map(|&v| v as f32)).collect();
            let mut g = Graph::new();
            let p = head.params.bind(&mut g, true);
            let xv = g.constant(x);
            let logits = head.linear.forward(&mut g, &p, xv)?;
            let loss = g.bce_with_logits(logits, &y)?;
            let grads = g.backward(loss)?;
            let grads = p.collect_grads(&head.params, &grads);
            let lr = cosine_schedule(step, total_steps, cfg.lr, cfg.warmup_steps);
            opt.step(&mut head.params, &grads, lr, None)?;
            step += 1;
        }
        let v = class_metrics(&probs(head.logits(&valid_x)?), &valid.labels, F1_THRESHOLD);
        let score = v.macro_auc.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, head.params.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    head.params = params;
    let scores = probs(head.logits(&test_x)?);
    let mut report = EvalReport::from_scores("linear_probe", test, &scores);
    report.fraction = Some(cfg.fraction);
    Ok(ProbeOutcome {
        report,
        train_indices: chosen,
        best_epoch,
        encoder_hash_before: hash_before,
        encoder_hash_after: state.param_hash("ecg."),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> Vec<Vec<f64>> {
        (0..40).map(|i| (0..4).map(|c| (i % 4 == c) as u8 as f64).collect()).collect()
    }

    #[test]
    fn sampling_is_stratified_and_seeded() {
        let y = labels();
        let a = sample_fraction(&y, 0.5, 3).unwrap();
        assert_eq!(a, sample_fraction(&y, 0.5, 3).unwrap());
        assert_ne!(a, sample_fraction(&y, 0.5, 4).unwrap());
        for c in 0..4 {
            assert_eq!(a.iter().filter(|&&i| y[i][c] > 0.5).count(), 5);
        }
        assert_eq!(sample_fraction(&y, 1.0, 0).unwrap(), (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn too_small_fraction_is_an_error() {
        assert!(sample_fraction(&labels(), 0.01, 0).is_err());
        assert!(sample_fraction(&labels(), 0.0, 0).is_err());
    }
}
