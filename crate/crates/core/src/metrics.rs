//! ROC curves, AUC, and per-fold aggregation.
//!
//! AUC is computed as the trapezoidal area under the tie-collapsed ROC
//! curve, accumulated in integer pair counts. That makes it equal to the
//! Mann-Whitney statistic (ties credited one half) exactly, not merely to
//! rounding: both routes divide the same integer by `2 * n_pos * n_neg`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-fold evaluation: ROC vertices, AUC, class counts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub roc: Vec<(f64, f64)>,
}

fn sorted_desc_indices(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores").then(a.cmp(&b)));
    idx
}

fn class_counts(labels: &[u8]) -> Result<(usize, usize)> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateMetric);
    }
    Ok((n_pos, n_neg))
}

/// ROC vertices from `(0,0)` to `(1,1)`, one vertex per distinct score
/// (tied scores collapse to a single vertex).
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            op: "roc_curve",
            detail: format!("{} scores vs {} labels", scores.len(), labels.len()),
        });
    }
    let (n_pos, n_neg) = class_counts(labels)?;
    let order = sorted_desc_indices(scores);
    let mut curve = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let score = scores[order[i]];
        while i < order.len() && scores[order[i]] == score {
            match labels[order[i]] {
                1 => tp += 1,
                _ => fp += 1,
            }
            i += 1;
        }
        curve.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    Ok(curve)
}

/// Trapezoidal area under the ROC curve. Ties receive half credit, making
/// this exactly the Mann-Whitney statistic.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension {
            op: "auc",
            detail: format!("{} scores vs {} labels", scores.len(), labels.len()),
        });
    }
    let (n_pos, n_neg) = class_counts(labels)?;
    let order = sorted_desc_indices(scores);
    // double trapezoid area in pair-count units:
    // sum over threshold groups of delta_fp * (tp_before + tp_after)
    let mut tp_before = 0u64;
    let mut twice_area = 0u64;
    let mut i = 0;
    while i < order.len() {
        let score = scores[order[i]];
        let (mut dp, mut dn) = (0u64, 0u64);
        while i < order.len() && scores[order[i]] == score {
            match labels[order[i]] {
                1 => dp += 1,
                _ => dn += 1,
            }
            i += 1;
        }
        twice_area += dn * (2 * tp_before + dp);
        tp_before += dp;
    }
    Ok(twice_area as f64 / (2 * (n_pos as u64) * (n_neg as u64)) as f64)
}

/// Mean and sample standard deviation (n-1 denominator) of fold AUCs.
/// A single report yields a standard deviation of 0 by convention.
pub fn aggregate(reports: &[FoldReport]) -> Result<(f64, f64)> {
    if reports.is_empty() {
        return Err(Error::Parameter {
            op: "aggregate",
            detail: "need at least one fold report".into(),
        });
    }
    let n = reports.len() as f64;
    let mean = reports.iter().map(|r| r.auc).sum::<f64>() / n;
    let std = if reports.len() == 1 {
        0.0
    } else {
        (reports.iter().map(|r| (r.auc - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok((mean, std))
}

/// Build a [`FoldReport`] from scores and labels.
pub fn fold_report(fold: usize, scores: &[f64], labels: &[u8]) -> Result<FoldReport> {
    let (n_pos, n_neg) = class_counts(labels)?;
    Ok(FoldReport {
        fold,
        auc: auc(scores, labels)?,
        n_pos,
        n_neg,
        roc: roc_curve(scores, labels)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// O(n^2) pairwise oracle: P(score_pos > score_neg) with half credit
    /// for ties, accumulated in integers.
    pub fn mann_whitney_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let mut twice_wins = 0u64;
        let mut pairs = 0u64;
        for (i, &li) in labels.iter().enumerate() {
            if li != 1 {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj != 0 {
                    continue;
                }
                pairs += 1;
                if scores[i] > scores[j] {
                    twice_wins += 2;
                } else if scores[i] == scores[j] {
                    twice_wins += 1;
                }
            }
        }
        twice_wins as f64 / (2 * pairs) as f64
    }

    #[test]
    fn perfect_separation() {
        let scores = [0.9, 0.1];
        let labels = [1, 0];
        assert_eq!(auc(&scores, &labels).unwrap(), 1.0);
        assert_eq!(
            roc_curve(&scores, &labels).unwrap(),
            vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]
        );
    }

    #[test]
    fn all_tied_scores_give_half() {
        let scores = [0.5; 6];
        let labels = [1, 0, 1, 0, 0, 1];
        assert_eq!(auc(&scores, &labels).unwrap(), 0.5);
        assert_eq!(roc_curve(&scores, &labels).unwrap(), vec![(0.0, 0.0), (1.0, 1.0)]);
    }

    #[test]
    fn six_score_hand_enumeration() {
        // scores sorted desc: 0.9(1) 0.8(0) 0.7(1) 0.7(1) 0.4(0) 0.2(0)
        let scores = [0.9, 0.8, 0.7, 0.7, 0.4, 0.2];
        let labels = [1, 0, 1, 1, 0, 0];
        let curve = roc_curve(&scores, &labels).unwrap();
        // vertices: start, after 0.9, after 0.8, after tie group 0.7, after 0.4, after 0.2
        let want = vec![
            (0.0, 0.0),
            (0.0, 1.0 / 3.0),
            (1.0 / 3.0, 1.0 / 3.0),
            (1.0 / 3.0, 1.0),
            (2.0 / 3.0, 1.0),
            (1.0, 1.0),
        ];
        assert_eq!(curve, want);
        // pairs: 9 total; wins: 0.9 beats all 3 negs; 0.7s beat 0.4,0.2 (4 wins); = 7/9...
        // oracle confirms
        assert_eq!(auc(&scores, &labels).unwrap(), mann_whitney_oracle(&scores, &labels));
    }

    #[test]
    fn degenerate_labels_rejected() {
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::DegenerateMetric)));
        assert!(matches!(roc_curve(&[0.1, 0.2], &[0, 0]), Err(Error::DegenerateMetric)));
    }

    #[test]
    fn matches_oracle_exactly_with_ties() {
        let mut r = crate::rng::stream(23, "test.auc");
        for case in 0..300 {
            let n = r.gen_range(2..=50);
            let mut labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..=1) as u8).collect();
            // keep both classes present
            labels[0] = 1;
            if labels.iter().all(|&l| l == 1) {
                labels[1 % n] = 0;
            }
            // quantized scores to inject ties
            let scores: Vec<f64> = (0..n).map(|_| f64::from(r.gen_range(0..8u32)) / 7.0).collect();
            let fast = auc(&scores, &labels).unwrap();
            let slow = mann_whitney_oracle(&scores, &labels);
            assert_eq!(fast.to_bits(), slow.to_bits(), "case {case}: {fast} vs {slow}");
        }
    }

    #[test]
    fn invariant_under_monotone_transform() {
        let mut r = crate::rng::stream(29, "test.monotone");
        for _ in 0..50 {
            let n = r.gen_range(4..=40);
            let mut labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..=1) as u8).collect();
            labels[0] = 1;
            labels[1] = 0;
            let scores: Vec<f64> = (0..n).map(|_| r.gen_range(-2.0..2.0)).collect();
            let cubed: Vec<f64> = scores.iter().map(|s| s.powi(3)).collect();
            assert_eq!(
                auc(&scores, &labels).unwrap().to_bits(),
                auc(&cubed, &labels).unwrap().to_bits()
            );
        }
    }

    #[test]
    fn complement_labels_sum_to_one() {
        let mut r = crate::rng::stream(31, "test.complement");
        for _ in 0..50 {
            let n = r.gen_range(4..=30);
            let mut labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..=1) as u8).collect();
            labels[0] = 1;
            labels[1] = 0;
            let flipped: Vec<u8> = labels.iter().map(|&l| 1 - l).collect();
            let scores: Vec<f64> = (0..n).map(|_| f64::from(r.gen_range(0..6u32)) / 5.0).collect();
            let a = auc(&scores, &labels).unwrap();
            let b = auc(&scores, &flipped).unwrap();
            assert_eq!(a + b, 1.0);
        }
    }

    #[test]
    fn permutation_invariance() {
        let scores = [0.8, 0.1, 0.6, 0.3, 0.6];
        let labels = [1, 0, 1, 0, 0];
        let perm = [4, 2, 0, 3, 1];
        let pscores: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let plabels: Vec<u8> = perm.iter().map(|&i| labels[i]).collect();
        assert_eq!(
            auc(&scores, &labels).unwrap().to_bits(),
            auc(&pscores, &plabels).unwrap().to_bits()
        );
    }

    #[test]
    fn roc_is_monotone_and_anchored() {
        let mut r = crate::rng::stream(37, "test.roc");
        for _ in 0..50 {
            let n = r.gen_range(3..=40);
            let mut labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..=1) as u8).collect();
            labels[0] = 1;
            labels[1] = 0;
            let scores: Vec<f64> = (0..n).map(|_| f64::from(r.gen_range(0..5u32)) / 4.0).collect();
            let curve = roc_curve(&scores, &labels).unwrap();
            assert_eq!(curve.first(), Some(&(0.0, 0.0)));
            assert_eq!(curve.last(), Some(&(1.0, 1.0)));
            for pair in curve.windows(2) {
                assert!(pair[1].0 >= pair[0].0);
                assert!(pair[1].1 >= pair[0].1);
            }
        }
    }

    #[test]
    fn float_trapezoid_agrees_with_integer_route() {
        let mut r = crate::rng::stream(41, "test.trap");
        for _ in 0..50 {
            let n = r.gen_range(3..=40);
            let mut labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..=1) as u8).collect();
            labels[0] = 1;
            labels[1] = 0;
            let scores: Vec<f64> = (0..n).map(|_| f64::from(r.gen_range(0..5u32)) / 4.0).collect();
            let curve = roc_curve(&scores, &labels).unwrap();
            let trap: f64 = curve
                .windows(2)
                .map(|p| (p[1].0 - p[0].0) * (p[0].1 + p[1].1) / 2.0)
                .sum();
            assert!((trap - auc(&scores, &labels).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_mean_and_sample_std() {
        let mk = |auc: f64| FoldReport { fold: 0, auc, n_pos: 1, n_neg: 1, roc: vec![] };
        let (m, s) = aggregate(&[mk(0.9), mk(0.9), mk(0.9)]).unwrap();
        assert_eq!((m, s), (0.9, 0.0));
        let (m, s) = aggregate(&[mk(0.92), mk(0.94)]).unwrap();
        assert!((m - 0.93).abs() < 1e-12);
        assert!((s - 0.01414213562373095).abs() < 1e-10);
        let (m, s) = aggregate(&[mk(0.7)]).unwrap();
        assert_eq!((m, s), (0.7, 0.0));
        assert!(aggregate(&[]).is_err());
    }
}
