//! Evaluation metrics and the bandwidth cost formula.

use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Predicted class per row: threshold 0.5 for single-output models, argmax
/// (lowest index on ties) otherwise.
pub fn predicted_labels(probs: &Matrix) -> Vec<usize> {
    (0..probs.rows())
        .map(|r| {
            let row = probs.row(r);
            if row.len() == 1 {
                (row[0] >= 0.5) as usize
            } else {
                let mut best = 0;
                for (j, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = j;
                    }
                }
                best
            }
        })
        .collect()
}

fn check_nonempty(n: usize, m: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::data("metrics need at least one prediction"));
    }
    if n != m {
        return Err(Error::Dimension { expected: n, got: m });
    }
    Ok(())
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    check_nonempty(predicted.len(), labels.len())?;
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean per-class recall over the classes present in `labels`; for two
/// classes this is `(TPR + TNR) / 2`.
pub fn balanced_accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    check_nonempty(predicted.len(), labels.len())?;
    let classes = labels.iter().max().unwrap() + 1;
    let mut total = vec![0usize; classes];
    let mut hit = vec![0usize; classes];
    for (&p, &l) in predicted.iter().zip(labels) {
        total[l] += 1;
        hit[l] += (p == l) as usize;
    }
    let present: Vec<f64> = total
        .iter()
        .zip(&hit)
        .filter(|(t, _)| **t > 0)
        .map(|(&t, &h)| h as f64 / t as f64)
        .collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Area under the ROC curve for binary labels, via the rank-sum statistic
/// with tied scores sharing their average rank.
pub fn auroc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    check_nonempty(scores.len(), labels.len())?;
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::data("AUROC needs binary labels"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::data("AUROC is undefined when only one class is present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tie block i..=j shares the mean rank
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum += mean_rank;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Binary AUROC on the positive-class column, or the macro one-vs-rest
/// average for more than two classes.
pub fn auroc_from_probs(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    let col = |j: usize| -> Vec<f64> { (0..probs.rows()).map(|r| probs.row(r)[j]).collect() };
    match probs.cols() {
        1 => auroc(&col(0), labels),
        2 => auroc(&col(1), labels),
        c => {
            let mut total = 0.0;
            let mut used = 0;
            for j in 0..c {
                let bin: Vec<usize> = labels.iter().map(|&l| (l == j) as usize).collect();
                if let Ok(a) = auroc(&col(j), &bin) {
                    total += a;
                    used += 1;
                }
            }
            if used == 0 {
                return Err(Error::data("AUROC is undefined when only one class is present"));
            }
            Ok(total / used as f64)
        }
    }
}

/// Cumulative traffic in kilobytes after `rounds` rounds:
/// `ratio * n * 32 * rounds * sampling` bits, with `ratio` replaced by 1
/// when the direction is not compressed.
pub fn bandwidth_cost(ratio: f64, n: usize, rounds: usize, sampling: f64, compressed: bool) -> f64 {
    let r = if compressed { ratio } else { 1.0 };
    r * n as f64 * 32.0 * rounds as f64 * sampling / 8000.0
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fraction of (positive, negative) pairs ranked correctly, ties 1/2.
    fn pairwise_auroc(scores: &[f64], labels: &[usize]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auroc_examples() {
        let s = [0.9, 0.8, 0.3, 0.1];
        assert_eq!(auroc(&s, &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auroc(&s, &[1, 0, 1, 0]).unwrap(), pairwise_auroc(&s, &[1, 0, 1, 0]));
        assert_eq!(auroc(&s, &[1, 0, 1, 0]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.4; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert!(auroc(&s, &[1, 1, 1, 1]).is_err());
        assert!(auroc(&[], &[]).is_err());
    }

    #[test]
    fn auroc_matches_pairwise_oracle_with_ties() {
        let s = [0.1, 0.5, 0.5, 0.7, 0.2, 0.5, 0.9, 0.1];
        let l = [0, 1, 0, 1, 0, 1, 1, 1];
        assert!((auroc(&s, &l).unwrap() - pairwise_auroc(&s, &l)).abs() < 1e-15);
    }

    #[test]
    fn balanced_accuracy_examples() {
        assert_eq!(balanced_accuracy(&[1, 0, 1, 0], &[1, 0, 1, 0]).unwrap(), 1.0);
        // 3 negatives all right, 1 positive missed: (0 + 1) / 2
        assert_eq!(balanced_accuracy(&[0, 0, 0, 0], &[1, 0, 0, 0]).unwrap(), 0.5);
        assert_eq!(accuracy(&[0, 0, 0, 0], &[1, 0, 0, 0]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn prediction_rules() {
        let m = Matrix::new(3, 1, vec![0.5, 0.49, 0.9]).unwrap();
        assert_eq!(predicted_labels(&m), vec![1, 0, 1]);
        let m = Matrix::new(2, 3, vec![0.2, 0.4, 0.4, 0.7, 0.2, 0.1]).unwrap();
        assert_eq!(predicted_labels(&m), vec![1, 0]);
    }

    #[test]
    fn bandwidth_examples() {
        let n = 1_663_370;
        let c = 1.0 / 60.0;
        assert!((bandwidth_cost(0.005, n, 200, c, true) - 110.89).abs() < 0.01);
        assert!((bandwidth_cost(1.0, n, 200, c, true) - 22178.27).abs() < 0.01);
        assert_eq!(bandwidth_cost(0.005, n, 0, c, true), 0.0);
        assert_eq!(
            bandwidth_cost(0.005, n, 200, c, false),
            bandwidth_cost(1.0, n, 200, c, true)
        );
    }
}
