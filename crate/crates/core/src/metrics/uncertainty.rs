//! Epistemic-uncertainty measures and rank correlation.

use crate::data::{mean_probs, DataError, ScoreRecord};

use super::AuditError;

/// Largest class probability of the record's mean probability vector.
pub fn max_softmax_prob(record: &ScoreRecord) -> Result<f64, DataError> {
    Ok(mean_probs(record)?.into_iter().fold(0.0, f64::max))
}

fn plogp_sum(mean: &[f64]) -> f64 {
    mean.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum()
}

/// Entropy of the mean Monte-Carlo probability vector, scaled by `1/K`:
/// `-(1/K) * sum_k pbar_k ln pbar_k`.
///
/// Without Monte-Carlo samples the point probabilities act as a single
/// sample; check [`has_mc_samples`] to flag that case.
pub fn predictive_entropy(record: &ScoreRecord) -> Result<f64, DataError> {
    let mean = mean_probs(record)?;
    Ok(-plogp_sum(&mean) / mean.len() as f64)
}

/// Shannon entropy of the mean probability vector, without the `1/K` factor.
pub fn shannon_entropy(record: &ScoreRecord) -> Result<f64, DataError> {
    Ok(-plogp_sum(&mean_probs(record)?))
}

pub fn has_mc_samples(record: &ScoreRecord) -> bool {
    record.mc_samples.as_ref().is_some_and(|s| !s.is_empty())
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spearman {
    pub rho: f64,
    /// Either input was constant; `rho` is reported as 0.
    pub degenerate: bool,
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Spearman, AuditError> {
    if x.len() != y.len() {
        return Err(AuditError::LengthMismatch { left: x.len(), right: y.len() });
    }
    if x.len() < 3 {
        return Err(AuditError::TooFewPoints(x.len()));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(AuditError::Numeric("NaN in rank correlation input".into()));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        let (da, db) = (a - mean, b - mean);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Spearman { rho: 0.0, degenerate: true });
    }
    Ok(Spearman {
        rho: (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0),
        degenerate: false,
    })
}
