//! Rank-statistic AUC, thresholded F1 and macro averaging.

/// Area under the ROC curve via the Mann-Whitney statistic, ties counted as
/// one half. `None` when the labels hold a single class.
pub fn compute_auc(scores: &[f64], labels: &[f64]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let n_pos = labels.iter().filter(|&&y| y > 0.5).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Average 1-based ranks over runs of equal scores.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg * order[i..=j].iter().filter(|&&k| labels[k] > 0.5).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// F1 of the predictions `score >= threshold`. Zero when there are no
/// positives and no predicted positives.
pub fn compute_f1(scores: &[f64], labels: &[f64], threshold: f64) -> f64 {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y > 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Per-class metrics of a score matrix. `scores[i][c]` and `labels[i][c]`
/// index record `i`, class `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub auc: Vec<Option<f64>>,
    pub f1: Vec<f64>,
    pub macro_auc: Option<f64>,
    /// Mean F1 over the classes whose AUC is defined.
    pub macro_f1: Option<f64>,
}

pub fn class_metrics(scores: &[Vec<f64>], labels: &[Vec<f64>], threshold: f64) -> ClassMetrics {
    let classes = labels.first().map_or(0, Vec::len);
    let column = |m: &[Vec<f64>], c: usize| -> Vec<f64> { m.iter().map(|r| r[c]).collect() };
    let mut auc = Vec::with_capacity(classes);
    let mut f1 = Vec::with_capacity(classes);
    for c in 0..classes {
        let (s, y) = (column(scores, c), column(labels, c));
        auc.push(compute_auc(&s, &y));
        f1.push(compute_f1(&s, &y, threshold));
    }
    let defined: Vec<usize> = (0..classes).filter(|&c| auc[c].is_some()).collect();
    let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    ClassMetrics {
        macro_auc: mean(defined.iter().filter_map(|&c| auc[c]).collect()),
        macro_f1: mean(defined.iter().map(|&c| f1[c]).collect()),
        auc,
        f1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairwise(scores: &[f64], labels: &[f64]) -> Option<f64> {
        let mut total = 0.0;
        let mut pairs = 0usize;
        for (i, &yi) in labels.iter().enumerate() {
            for (j, &yj) in labels.iter().enumerate() {
                if yi > 0.5 && yj < 0.5 {
                    pairs += 1;
                    total += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        (pairs > 0).then(|| total / pairs as f64)
    }

    #[test]
    fn reference_cases() {
        assert_eq!(compute_auc(&[0.1, 0.4, 0.35, 0.8], &[0.0, 0.0, 1.0, 1.0]), Some(0.75));
        assert_eq!(compute_auc(&[0.1, 0.2, 0.8, 0.9], &[0.0, 0.0, 1.0, 1.0]), Some(1.0));
        assert_eq!(compute_auc(&[0.3; 5], &[0.0, 1.0, 0.0, 1.0, 1.0]), Some(0.5));
        assert_eq!(compute_auc(&[0.3, 0.9], &[1.0, 1.0]), None);
    }

    #[test]
    fn f1_counts() {
        // tp 1, fp 1, fn 1
        let f = compute_f1(&[0.9, 0.6, 0.2, 0.1], &[1.0, 0.0, 1.0, 0.0], 0.5);
        assert!((f - 0.5).abs() < 1e-15);
        assert_eq!(compute_f1(&[0.1], &[0.0], 0.5), 0.0);
    }

    #[test]
    fn undefined_classes_leave_the_macro() {
        let scores = vec![vec![0.9, 0.2], vec![0.1, 0.7], vec![0.8, 0.4]];
        let labels = vec![vec![1.0, 1.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let m = class_metrics(&scores, &labels, 0.5);
        assert_eq!(m.auc, vec![Some(1.0), None]);
        assert_eq!(m.macro_auc, Some(1.0));
        assert_eq!(m.macro_f1, Some(1.0));
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..=50).prop_flat_map(|n| {
            (
                proptest::collection::vec((0u8..8).prop_map(|k| k as f64 / 8.0), n),
                proptest::collection::vec(proptest::bool::ANY.prop_map(|b| b as u8 as f64), n),
            )
        })
    }

    proptest! {
        #[test]
        fn matches_pairwise_oracle((s, y) in instance()) {
            match (compute_auc(&s, &y), pairwise(&s, &y)) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
        }

        #[test]
        fn invariant_to_monotone_maps((s, y) in instance(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
            let mapped: Vec<f64> = s.iter().map(|x| (a * x + b).exp()).collect();
            prop_assert_eq!(compute_auc(&s, &y), compute_auc(&mapped, &y));
        }
    }
}
