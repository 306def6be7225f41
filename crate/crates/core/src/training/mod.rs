//! Pretraining objective (ECG-report contrastive alignment plus cardiac-query
//! supervision) and the training loop.

mod pretrain;

use serde::{Deserialize, Serialize};

pub use pretrain::{
    prepare_records, pretrain, sample_grid, MetricsLine, PreparedRecord, PretrainOutcome, PretrainPaths,
};

use crate::encoder::TokenGrid;
use crate::error::{Error, Result};
use crate::model::KmerlModel;
use crate::numerics::{AdamWConfig, Bindings, Graph, Scalar, Var};
use crate::query::cq_loss;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps (also the schedule length).
    pub max_steps: Option<usize>,
    pub temperature: f64,
    pub symmetric: bool,
    pub optimizer: AdamWConfig,
    pub warmup_steps: usize,
    pub lead_masking: bool,
    pub min_masked_leads: usize,
    pub max_masked_leads: usize,
    pub segment_masking: bool,
    pub mask_ratio: f64,
    pub use_contrastive: bool,
    pub use_cq: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 50,
            max_steps: None,
            temperature: 0.07,
            symmetric: false,
            optimizer: AdamWConfig::default(),
            warmup_steps: 5,
            lead_masking: true,
            min_masked_leads: 9,
            max_masked_leads: 11,
            segment_masking: true,
            mask_ratio: 0.25,
            use_contrastive: true,
            use_cq: true,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !self.use_contrastive && !self.use_cq {
            return Err(Error::Config("at least one loss term must be enabled".into()));
        }
        if self.use_contrastive && self.batch_size < 2 {
            return Err(Error::Config("the contrastive loss needs batch_size >= 2".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio {} must lie in [0, 1)", self.mask_ratio)));
        }
        if self.min_masked_leads > self.max_masked_leads || self.max_masked_leads > 11 {
            return Err(Error::Config("masked leads need min <= max <= 11".into()));
        }
        Ok(())
    }
}

/// Which loss terms to build and how.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    pub symmetric: bool,
    pub use_contrastive: bool,
    pub use_cq: bool,
}

impl From<&PretrainConfig> for LossConfig {
    fn from(c: &PretrainConfig) -> Self {
        Self {
            temperature: c.temperature,
            symmetric: c.symmetric,
            use_contrastive: c.use_contrastive,
            use_cq: c.use_cq,
        }
    }
}

/// InfoNCE from ECG rows to text rows: the positive of row `i` is column `i`
/// and the denominator runs over every column, the positive included.
/// `symmetric` averages in the text-to-ECG direction.
pub fn contrastive_loss<T: Scalar>(
    g: &mut Graph<T>,
    ecg: Var,
    text: Var,
    temperature: f64,
    symmetric: bool,
) -> Result<Var> {
    let l = g.value(ecg).rows();
    if l < 2 || g.value(text).rows() != l {
        return Err(Error::Invalid(format!(
            "contrastive loss needs matching batches of at least 2, got {l} and {}",
            g.value(text).rows()
        )));
    }
    let targets: Vec<usize> = (0..l).collect();
    let sim = g.matmul_nt(ecg, text)?;
    let logits = g.scale(sim, 1.0 / temperature);
    let e2t = g.cross_entropy_rows(logits, &targets)?;
    if !symmetric {
        return Ok(e2t);
    }
    let t = g.transpose(logits)?;
    let t2e = g.cross_entropy_rows(t, &targets)?;
    let both = g.add(e2t, t2e)?;
    Ok(g.scale(both, 0.5))
}

/// One record of a training batch, already masked.
#[derive(Debug, Clone)]
pub struct BatchItem<'a> {
    pub grid: TokenGrid,
    pub report: &'a str,
    pub labels: &'a [f64],
}

/// Loss nodes of one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub contrast: Option<Var>,
    pub cq: Option<Var>,
}

/// `L_contrast + L_CQ` over a batch. Entity queries are embedded once and
/// shared by every record; the CQ term is averaged over queries, then over
/// records.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bindings,
    model: &KmerlModel,
    batch: &[BatchItem<'_>],
    entities: &[String],
    cfg: &LossConfig,
) -> Result<LossParts> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    if !cfg.use_contrastive && !cfg.use_cq {
        return Err(Error::Config("at least one loss term must be enabled".into()));
    }
    let encoded = batch
        .iter()
        .map(|item| model.encoder.encode(g, p, &item.grid))
        .collect::<Result<Vec<_>>>()?;

    let contrast = if cfg.use_contrastive {
        let pooled: Vec<Var> = encoded.iter().map(|e| e.pooled).collect();
        let ecg = g.concat(&pooled, 0)?;
        let reports: Vec<String> = batch.iter().map(|b| b.report.to_string()).collect();
        let text = model.text.forward_many(g, p, &reports)?;
        Some(contrastive_loss(g, ecg, text, cfg.temperature, cfg.symmetric)?)
    } else {
        None
    };

    let cq = if cfg.use_cq {
        if entities.is_empty() {
            return Err(Error::Invalid("cardiac-query loss needs a nonempty entity vocabulary".into()));
        }
        let queries = model.text.forward_many(g, p, entities)?;
        let mut terms = Vec::with_capacity(batch.len());
        for (item, enc) in batch.iter().zip(&encoded) {
            if item.labels.len() != entities.len() {
                return Err(Error::Invalid(format!(
                    "label vector has {} entries for {} entities",
                    item.labels.len(),
                    entities.len()
                )));
            }
            let logits = model.query.forward(g, p, queries, enc.tokens)?;
            terms.push(cq_loss(g, logits, item.labels)?);
        }
        let stacked = if terms.len() == 1 { terms[0] } else { g.concat(&terms, 0)? };
        Some(g.mean(stacked)?)
    } else {
        None
    };

    let total = match (contrast, cq) {
        (Some(a), Some(b)) => g.add(a, b)?,
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => unreachable!("checked above"),
    };
    Ok(LossParts { total, contrast, cq })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use proptest::prelude::*;

    fn loss(e: &[f64], t: &[f64], l: usize, d: usize, eta: f64) -> f64 {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(Tensor::from_f64(&[l, d], e).unwrap());
        let b = g.constant(Tensor::from_f64(&[l, d], t).unwrap());
        let v = contrastive_loss(&mut g, a, b, eta, false).unwrap();
        g.value(v).data()[0]
    }

    #[test]
    fn equal_similarities_give_ln_l() {
        for l in [2usize, 4] {
            let e = vec![1.0; l];
            assert!((loss(&e, &e, l, 1, 0.07) - (l as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn aligned_pairs_give_near_zero_loss() {
        // s_ii = 1, s_ij = -1: loss = ln(1 + exp(-2 / 0.07))
        let e = [1.0, -1.0];
        let v = loss(&e, &e, 2, 1, 0.07);
        let expect = (1.0 + (-2.0f64 / 0.07).exp()).ln();
        assert!(v < 1e-6 && (v - expect).abs() < 1e-15);
    }

    #[test]
    fn needs_two_rows() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap());
        assert!(contrastive_loss(&mut g, a, a, 0.07, false).is_err());
    }

    fn unit_rows(raw: &[f64], l: usize, d: usize) -> Vec<f64> {
        let mut out = raw.to_vec();
        for r in 0..l {
            let row = &mut out[r * d..(r + 1) * d];
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            row.iter_mut().for_each(|x| *x /= n);
        }
        out
    }

    proptest! {
        #[test]
        fn invariant_to_joint_row_permutation(
            raw_e in proptest::collection::vec(-1.0f64..1.0, 12),
            raw_t in proptest::collection::vec(-1.0f64..1.0, 12),
            shift in 1usize..4,
        ) {
            let (l, d) = (4, 3);
            let e = unit_rows(&raw_e, l, d);
            let t = unit_rows(&raw_t, l, d);
            let perm = |x: &[f64]| -> Vec<f64> {
                (0..l).flat_map(|r| x[((r + shift) % l) * d..((r + shift) % l + 1) * d].to_vec()).collect()
            };
            let a = loss(&e, &t, l, d, 0.07);
            let b = loss(&perm(&e), &perm(&t), l, d, 0.07);
            prop_assert!(a >= 0.0);
            prop_assert!((a - b).abs() < 1e-9 * a.max(1.0));
        }
    }
}
