//! AUC (Mann-Whitney form) and perturbation-distance metrics, plus the
//! serializable evaluation report.

use serde::{Deserialize, Serialize};

use crate::attacks::AttackSpec;
use crate::defenses::DefenseSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probability that a uniformly drawn positive outranks a uniformly drawn
/// negative, ties counted 0.5. Exact, via average ranks; O(N log N).
///
/// Returns `None` when one class is absent (AUC undefined).
pub fn auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // Average ranks within tie groups (1-indexed).
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let p = n_pos as f64;
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Some(u / (p * n_neg as f64))
}

/// Per-label AUC of sigmoid(logits) and the mean over labels where AUC is
/// defined. Single-class labels are excluded from the mean.
pub fn mean_auc(logits: &Tensor, labels: &Tensor) -> Result<(f64, Vec<Option<f64>>)> {
    if logits.shape() != labels.shape() || logits.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "mean_auc",
            lhs: logits.shape().to_vec(),
            rhs: labels.shape().to_vec(),
        });
    }
    let (n, l) = (logits.shape()[0], logits.shape()[1]);
    let mut per_label = Vec::with_capacity(l);
    for j in 0..l {
        let scores: Vec<f64> = (0..n)
            .map(|i| {
                let x = logits.data()[i * l + j];
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let lab: Vec<u8> = (0..n).map(|i| labels.data()[i * l + j] as u8).collect();
        per_label.push(auc(&scores, &lab));
    }
    let defined: Vec<f64> = per_label.iter().filter_map(|a| *a).collect();
    if defined.is_empty() {
        return Err(Error::invalid(
            "mean_auc: every label is single-class, mean AUC undefined",
        ));
    }
    Ok((defined.iter().sum::<f64>() / defined.len() as f64, per_label))
}

/// Mean over examples of the per-example Euclidean norm of (adv - clean).
/// Leading axis is the example axis.
pub fn l2_distance(clean: &Tensor, adv: &Tensor) -> Result<f64> {
    if clean.shape() != adv.shape() || clean.rank() == 0 {
        return Err(Error::ShapeMismatch {
            op: "l2_distance",
            lhs: clean.shape().to_vec(),
            rhs: adv.shape().to_vec(),
        });
    }
    let n = clean.shape()[0];
    let per = clean.len() / n;
    let mut total = 0.0;
    for i in 0..n {
        let mut sq = 0.0;
        for k in 0..per {
            let d = adv.data()[i * per + k] - clean.data()[i * per + k];
            sq += d * d;
        }
        total += sq.sqrt();
    }
    Ok(total / n as f64)
}

/// Structured result of one evaluation cell. Serializes to JSON with the
/// struct's field order; wall-clock is kept out of the serialized form so
/// reruns are byte-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_label_auc: Vec<Option<f64>>,
    pub mean_auc: f64,
    pub mean_l2: f64,
    pub n_examples: usize,
    pub num_labels: usize,
    pub attack: Option<AttackSpec>,
    pub defense: Option<DefenseSpec>,
    pub seed: u64,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent oracle: enumerate all positive-negative pairs.
    fn auc_bruteforce(scores: &[f64], labels: &[u8]) -> Option<f64> {
        let pos: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == 1)
            .map(|(&s, _)| s)
            .collect();
        let neg: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == 0)
            .map(|(&s, _)| s)
            .collect();
        if pos.is_empty() || neg.is_empty() {
            return None;
        }
        let mut total = 0.0;
        for &p in &pos {
            for &n in &neg {
                total += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        Some(total / (pos.len() * neg.len()) as f64)
    }

    #[test]
    fn perfect_ranking() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]), Some(1.0));
    }

    #[test]
    fn all_ties_give_half() {
        assert_eq!(auc(&[0.3, 0.3, 0.3, 0.3], &[1, 0, 1, 0]), Some(0.5));
    }

    #[test]
    fn mixed_pairs_example() {
        // pairs: 0.8>0.6 correct, 0.4<0.6 incorrect -> 0.5
        let got = auc(&[0.8, 0.6, 0.4], &[1, 0, 1]).unwrap();
        assert_eq!(got, auc_bruteforce(&[0.8, 0.6, 0.4], &[1, 0, 1]).unwrap());
        assert_eq!(got, 0.5);
    }

    #[test]
    fn single_class_is_undefined() {
        assert_eq!(auc(&[0.1, 0.2], &[1, 1]), None);
        assert_eq!(auc(&[0.1, 0.2], &[0, 0]), None);
    }

    #[test]
    fn mean_auc_examples() {
        // label 0 perfectly ranked, label 1 anti-ranked -> mean 0.5
        let logits = Tensor::new(vec![2, 2], vec![2.0, -1.0, -2.0, 1.0]).unwrap();
        let labels = Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let (mean, per) = mean_auc(&logits, &labels).unwrap();
        assert_eq!(per, vec![Some(1.0), Some(0.0)]);
        assert_eq!(mean, 0.5);
    }

    #[test]
    fn mean_auc_rank_invariance_under_doubling() {
        let logits = Tensor::new(vec![4, 2], vec![0.3, -0.2, 1.1, 0.4, -0.9, 0.0, 0.2, 0.7])
            .unwrap();
        let labels = Tensor::new(vec![4, 2], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0])
            .unwrap();
        let doubled = logits.map(|v| 2.0 * v);
        assert_eq!(
            mean_auc(&logits, &labels).unwrap(),
            mean_auc(&doubled, &labels).unwrap()
        );
    }

    #[test]
    fn l2_distance_examples() {
        let a = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let b = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
        assert_eq!(l2_distance(&a, &b).unwrap(), 5.0);
        assert_eq!(l2_distance(&a, &a).unwrap(), 0.0);

        // per-example norms 5 and 3 -> mean 4
        let a = Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.0, 3.0]).unwrap();
        assert_eq!(l2_distance(&a, &b).unwrap(), 4.0);
    }

    proptest! {
        #[test]
        fn auc_matches_bruteforce(
            scores in proptest::collection::vec(-5.0f64..5.0, 2..12),
            seed in any::<u64>(),
        ) {
            // Deterministic pseudo-labels so ties in scores still occur.
            let labels: Vec<u8> = scores
                .iter()
                .enumerate()
                .map(|(i, _)| ((seed >> (i % 60)) & 1) as u8)
                .collect();
            prop_assert_eq!(auc(&scores, &labels), auc_bruteforce(&scores, &labels));
        }

        #[test]
        fn auc_complement_for_tie_free_scores(n in 2usize..10, seed in any::<u64>()) {
            // strictly distinct scores
            let scores: Vec<f64> = (0..n).map(|i| i as f64 + 0.25).collect();
            let mut labels: Vec<u8> = (0..n).map(|i| ((seed >> (i % 60)) & 1) as u8).collect();
            labels[0] = 0;
            labels[n - 1] = 1;
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let a = auc(&scores, &labels).unwrap();
            let b = auc(&neg, &labels).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }

        #[test]
        fn l2_is_symmetric_nonnegative(
            v in proptest::collection::vec(-2.0f64..2.0, 4),
            w in proptest::collection::vec(-2.0f64..2.0, 4),
        ) {
            let a = Tensor::new(vec![2, 2], v).unwrap();
            let b = Tensor::new(vec![2, 2], w).unwrap();
            let ab = l2_distance(&a, &b).unwrap();
            let ba = l2_distance(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert_eq!(ab == 0.0, a == b);
        }
    }
}
