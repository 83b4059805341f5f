//! Ranking metrics: ROC AUC (Mann–Whitney) and PR AUC (average precision).

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    /// AUC is undefined without both classes (or, for PR AUC, any positive).
    #[error("AUC undefined: {positives} positives and {negatives} negatives")]
    Undefined { positives: usize, negatives: usize },
    #[error("{scores} scores for {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("label {0} is not 0 or 1")]
    BadLabel(f64),
    #[error("non-finite score at index {0}")]
    NonFiniteScore(usize),
}

fn check(scores: &[f64], labels: &[f64]) -> Result<(usize, usize), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricError::NonFiniteScore(i));
    }
    let mut pos = 0;
    for &y in labels {
        if y == 1.0 {
            pos += 1;
        } else if y != 0.0 {
            return Err(MetricError::BadLabel(y));
        }
    }
    Ok((pos, labels.len() - pos))
}

/// Probability that a random positive outranks a random negative, ties
/// counted ½.
pub fn roc_auc(scores: &[f64], labels: &[f64]) -> Result<f64, MetricError> {
    let (positives, negatives) = check(scores, labels)?;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::Undefined { positives, negatives });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Walk tie groups in ascending order; each positive beats every negative
    // below its group and half of the negatives inside it.
    let mut wins = 0.0f64;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0usize, 0usize);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1.0 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        wins += p as f64 * (neg_below as f64 + 0.5 * n as f64);
        neg_below += n;
        i = j;
    }
    Ok(wins / (positives as f64 * negatives as f64))
}

/// Average precision: the mean, over positives, of the precision at each
/// positive's rank. Rows are ranked by descending score; ties keep their
/// input order.
pub fn pr_auc(scores: &[f64], labels: &[f64]) -> Result<f64, MetricError> {
    let (positives, negatives) = check(scores, labels)?;
    if positives == 0 {
        return Err(MetricError::Undefined { positives, negatives });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1.0 {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / positives as f64)
}

/// Fraction of rows where `score ≥ 0.5` agrees with the label.
pub fn accuracy(scores: &[f64], labels: &[f64]) -> Result<f64, MetricError> {
    check(scores, labels)?;
    if scores.is_empty() {
        return Err(MetricError::Undefined { positives: 0, negatives: 0 });
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|&(&s, &y)| (s >= 0.5) == (y == 1.0))
        .count();
    Ok(hits as f64 / scores.len() as f64)
}
