//! Evaluation metrics. All functions reject empty or length-mismatched input.

use crate::error::{invalid, Result};

fn check_lengths(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(invalid(format!("{what}: {a} predictions for {b} labels")));
    }
    if a == 0 {
        return Err(invalid(format!("{what}: empty input")));
    }
    Ok(())
}

/// 1-based ranks with ties given their average rank.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), labels.len(), "auroc")?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid("auroc: NaN score"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(invalid("auroc needs both classes present"));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Unweighted mean of one-vs-rest AUROC over classes; `probs[i][k]` is the
/// score of sample `i` for class `k`. Equals [`auroc`] on class 1 when
/// `K = 2`.
pub fn macro_auroc(probs: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<f64> {
    check_lengths(probs.len(), labels.len(), "macro_auroc")?;
    if num_classes == 2 {
        let s: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let y: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return auroc(&s, &y);
    }
    let mut total = 0.0;
    for k in 0..num_classes {
        let s: Vec<f64> = probs.iter().map(|p| p[k]).collect();
        let y: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        total += auroc(&s, &y)?;
    }
    Ok(total / num_classes as f64)
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(pred.len(), labels.len(), "accuracy")?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean per-class F1. A class with no true positives (including one that
/// never occurs) contributes 0.
pub fn macro_f1(pred: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    check_lengths(pred.len(), labels.len(), "macro_f1")?;
    if num_classes < 2 {
        return Err(invalid("macro_f1 needs at least 2 classes"));
    }
    if let Some(&c) = pred.iter().chain(labels).find(|&&c| c >= num_classes) {
        return Err(invalid(format!("class {c} outside 0..{num_classes}")));
    }
    let mut total = 0.0;
    for k in 0..num_classes {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fneg = 0usize;
        for (&p, &l) in pred.iter().zip(labels) {
            match (p == k, l == k) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        if tp > 0 {
            total += 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64;
        }
    }
    Ok(total / num_classes as f64)
}

pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_lengths(pred.len(), target.len(), "rmse")?;
    let mse = pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64;
    Ok(mse.sqrt())
}

pub fn mean_absolute_error(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_lengths(pred.len(), target.len(), "mean_absolute_error")?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Mean negative log-likelihood of the true class; probabilities are
/// clamped below at `1e-15`.
pub fn cross_entropy(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_lengths(probs.len(), labels.len(), "cross_entropy")?;
    let mut total = 0.0;
    for (p, &l) in probs.iter().zip(labels) {
        let q = p
            .get(l)
            .ok_or_else(|| invalid(format!("class {l} outside the score width")))?;
        total -= q.max(1e-15).ln();
    }
    Ok(total / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_examples() {
        let y = [true, true, false, false];
        assert_eq!(auroc(&[0.9, 0.8, 0.3, 0.2], &y).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.3, 0.6, 0.2], &y).unwrap(), 0.75);
        assert_eq!(auroc(&[0.5; 4], &y).unwrap(), 0.5);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(auroc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn confusion_matrix_example() {
        let (p, l) = ([0, 1, 1, 0], [0, 1, 0, 0]);
        assert_eq!(accuracy(&p, &l).unwrap(), 0.75);
        let f1 = macro_f1(&p, &l, 2).unwrap();
        assert!((f1 - (0.8 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        // Class 1 is never predicted and never correct.
        assert_eq!(macro_f1(&[0, 0, 0], &[0, 1, 0], 2).unwrap(), 0.4);
    }

    #[test]
    fn regression_metrics() {
        let x = [1.0, -2.0, 3.5];
        assert_eq!(rmse(&x, &x).unwrap(), 0.0);
        assert_eq!(rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 12.5f64.sqrt());
        assert_eq!(mean_absolute_error(&[0.0, 0.0], &[3.0, -4.0]).unwrap(), 3.5);
        assert!(rmse(&x, &x[..2]).is_err());
    }

    #[test]
    fn multiclass_auroc_reduces_to_binary() {
        let probs = vec![vec![0.2, 0.8], vec![0.6, 0.4], vec![0.3, 0.7]];
        let labels = [1, 0, 0];
        assert_eq!(
            macro_auroc(&probs, &labels, 2).unwrap(),
            auroc(&[0.8, 0.4, 0.7], &[true, false, false]).unwrap()
        );
        let probs3 = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.8, 0.1], vec![0.2, 0.2, 0.6]];
        assert_eq!(macro_auroc(&probs3, &[0, 1, 2], 3).unwrap(), 1.0);
    }

    #[test]
    fn cross_entropy_of_certain_predictions() {
        assert_eq!(cross_entropy(&[vec![0.0, 1.0]], &[1]).unwrap(), 0.0);
        let ce = cross_entropy(&[vec![0.5, 0.5]], &[0]).unwrap();
        assert!((ce - 2f64.ln()).abs() < 1e-15);
    }
}
