//! Evaluation of prediction sets: coverage, set size, subgroup disparity,
//! rule-in/rule-out accuracy and correlation of set size with uncertainty.

pub mod plot;
pub mod report;
pub mod uncertainty;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::Method;
use crate::data::{DataError, ScoreTable};
use crate::prediction::PredictionSet;

pub use report::{AuditReport, CSV_COLUMNS};
pub use uncertainty::{
    average_ranks, has_mc_samples, max_softmax_prob, predictive_entropy, shannon_entropy, spearman, Spearman,
};

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("cannot evaluate an empty collection")]
    Empty,

    #[error("disparity needs at least 2 groups, got {0}")]
    TooFewGroups(usize),

    #[error("rank correlation needs at least 3 points, got {0}")]
    TooFewPoints(usize),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error(transparent)]
    Data(#[from] DataError),
}

/// Fraction of records whose set contains the true label.
pub fn marginal_coverage(sets: &[PredictionSet], labels: &[usize]) -> Result<f64, AuditError> {
    if sets.len() != labels.len() {
        return Err(AuditError::LengthMismatch { left: sets.len(), right: labels.len() });
    }
    if sets.is_empty() {
        return Err(AuditError::Empty);
    }
    let covered = sets.iter().zip(labels).filter(|(s, &y)| s.contains(y)).count();
    Ok(covered as f64 / sets.len() as f64)
}

pub fn average_set_size(sets: &[PredictionSet]) -> Result<f64, AuditError> {
    if sets.is_empty() {
        return Err(AuditError::Empty);
    }
    Ok(sets.iter().map(|s| s.size as f64).sum::<f64>() / sets.len() as f64)
}

/// Normalization of the summed pairwise differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisparityNorm {
    /// Divide by the number of groups `|A|`.
    #[default]
    PerGroup,
    /// Divide by the number of unordered pairs.
    PerPair,
}

/// Sum of `|v_a - v_b|` over unordered group pairs, normalized per `norm`.
pub fn pairwise_disparity(values: &BTreeMap<String, f64>, norm: DisparityNorm) -> Result<f64, AuditError> {
    let n = values.len();
    if n < 2 {
        return Err(AuditError::TooFewGroups(n));
    }
    let v: Vec<f64> = values.values().copied().collect();
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += (v[i] - v[j]).abs();
        }
    }
    let denom = match norm {
        DisparityNorm::PerGroup => n as f64,
        DisparityNorm::PerPair => (n * (n - 1) / 2) as f64,
    };
    Ok(total / denom)
}

pub fn coverage_disparity(group_coverage: &BTreeMap<String, f64>, norm: DisparityNorm) -> Result<f64, AuditError> {
    pairwise_disparity(group_coverage, norm)
}

pub fn set_size_disparity(group_sizes: &BTreeMap<String, f64>, norm: DisparityNorm) -> Result<f64, AuditError> {
    pairwise_disparity(group_sizes, norm)
}

/// Counts behind the rule-in and rule-out accuracies of one group.
///
/// Records with a critical label enter rule-in, all others rule-out, so the
/// two totals add up to the group size.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleCounts {
    pub rule_in_correct: usize,
    pub rule_in_total: usize,
    pub rule_out_correct: usize,
    pub rule_out_total: usize,
}

impl RuleCounts {
    /// `None` when the group has no critical-label records.
    pub fn rule_in(&self) -> Option<f64> {
        (self.rule_in_total > 0).then(|| self.rule_in_correct as f64 / self.rule_in_total as f64)
    }

    /// `None` when the group has no non-critical records.
    pub fn rule_out(&self) -> Option<f64> {
        (self.rule_out_total > 0).then(|| self.rule_out_correct as f64 / self.rule_out_total as f64)
    }

    fn add(&mut self, other: &RuleCounts) {
        self.rule_in_correct += other.rule_in_correct;
        self.rule_in_total += other.rule_in_total;
        self.rule_out_correct += other.rule_out_correct;
        self.rule_out_total += other.rule_out_total;
    }
}

/// Per-group rule-in/rule-out counts against the `critical` classes.
pub fn rule_counts<S: AsRef<str>>(
    sets: &[PredictionSet],
    labels: &[usize],
    groups: &[S],
    critical: &BTreeSet<usize>,
) -> Result<BTreeMap<String, RuleCounts>, AuditError> {
    if sets.len() != labels.len() {
        return Err(AuditError::LengthMismatch { left: sets.len(), right: labels.len() });
    }
    if sets.len() != groups.len() {
        return Err(AuditError::LengthMismatch { left: sets.len(), right: groups.len() });
    }
    let mut out: BTreeMap<String, RuleCounts> = BTreeMap::new();
    for ((set, &y), g) in sets.iter().zip(labels).zip(groups) {
        let c = out.entry(g.as_ref().to_string()).or_default();
        if critical.contains(&y) {
            c.rule_in_total += 1;
            c.rule_in_correct += usize::from(set.contains(y));
        } else {
            c.rule_out_total += 1;
            c.rule_out_correct += usize::from(!set.classes.iter().any(|k| critical.contains(k)));
        }
    }
    Ok(out)
}

pub fn rule_in_accuracy<S: AsRef<str>>(
    sets: &[PredictionSet],
    labels: &[usize],
    groups: &[S],
    critical: &BTreeSet<usize>,
) -> Result<BTreeMap<String, Option<f64>>, AuditError> {
    Ok(rule_counts(sets, labels, groups, critical)?
        .into_iter()
        .map(|(g, c)| (g, c.rule_in()))
        .collect())
}

pub fn rule_out_accuracy<S: AsRef<str>>(
    sets: &[PredictionSet],
    labels: &[usize],
    groups: &[S],
    critical: &BTreeSet<usize>,
) -> Result<BTreeMap<String, Option<f64>>, AuditError> {
    Ok(rule_counts(sets, labels, groups, critical)?
        .into_iter()
        .map(|(g, c)| (g, c.rule_out()))
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditOptions {
    /// Classes counted as critical for rule-in/rule-out; empty disables both.
    pub critical: BTreeSet<usize>,
    pub normalization: DisparityNorm,
}

/// Metrics over one slice of the test records (one group, or all of them).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceAudit {
    pub count: usize,
    pub coverage: f64,
    pub set_size: f64,
    pub rule_in: Option<f64>,
    pub rule_out: Option<f64>,
    pub rule_in_count: usize,
    pub rule_out_count: usize,
    /// Rank correlation of set size with `1 - max softmax probability`.
    pub spearman_softmax: Option<f64>,
    /// Rank correlation of set size with predictive entropy.
    pub spearman_entropy: Option<f64>,
}

/// All metrics for one method at one miscoverage level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodAudit {
    pub method: Method,
    pub alpha: f64,
    pub overall: SliceAudit,
    pub groups: BTreeMap<String, SliceAudit>,
    /// `None` with fewer than two groups; see `notes`.
    pub coverage_disparity: Option<f64>,
    pub set_size_disparity: Option<f64>,
    #[serde(default)]
    pub notes: Vec<String>,
}

struct Uncertainty {
    softmax: Vec<f64>,
    entropy: Vec<f64>,
}

fn slice_audit(
    idx: &[usize],
    sets: &[PredictionSet],
    labels: &[usize],
    unc: &Uncertainty,
    rules: Option<RuleCounts>,
    degenerate: &mut bool,
) -> Result<SliceAudit, AuditError> {
    let s: Vec<PredictionSet> = idx.iter().map(|&i| sets[i].clone()).collect();
    let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
    let sizes: Vec<f64> = s.iter().map(|p| p.size as f64).collect();
    let mut corr = |u: &[f64]| -> Result<Option<f64>, AuditError> {
        if idx.len() < 3 {
            return Ok(None);
        }
        let u: Vec<f64> = idx.iter().map(|&i| u[i]).collect();
        let r = spearman(&sizes, &u)?;
        *degenerate |= r.degenerate;
        Ok(Some(r.rho))
    };
    let spearman_softmax = corr(&unc.softmax)?;
    let spearman_entropy = corr(&unc.entropy)?;
    let rules = rules.unwrap_or_default();
    Ok(SliceAudit {
        count: idx.len(),
        coverage: marginal_coverage(&s, &y)?,
        set_size: average_set_size(&s)?,
        rule_in: rules.rule_in(),
        rule_out: rules.rule_out(),
        rule_in_count: rules.rule_in_total,
        rule_out_count: rules.rule_out_total,
        spearman_softmax,
        spearman_entropy,
    })
}

/// Audits the sets built for `table` (probability scale, same record order).
pub fn audit_sets(
    method: Method,
    alpha: f64,
    table: &ScoreTable,
    sets: &[PredictionSet],
    options: &AuditOptions,
) -> Result<MethodAudit, AuditError> {
    if sets.len() != table.len() {
        return Err(AuditError::LengthMismatch { left: sets.len(), right: table.len() });
    }
    if sets.is_empty() {
        return Err(AuditError::Empty);
    }
    let records = table.records();
    let labels = table.labels();
    let groups: Vec<&str> = records.iter().map(|r| r.group.as_str()).collect();
    let unc = Uncertainty {
        softmax: records
            .iter()
            .map(|r| max_softmax_prob(r).map(|m| 1.0 - m))
            .collect::<Result<_, _>>()?,
        entropy: records.iter().map(predictive_entropy).collect::<Result<_, _>>()?,
    };
    let rules = if options.critical.is_empty() {
        None
    } else {
        Some(rule_counts(sets, &labels, &groups, &options.critical)?)
    };

    let mut notes = Vec::new();
    let mut degenerate = false;
    let mut per_group = BTreeMap::new();
    for g in table.groups() {
        let idx: Vec<usize> = (0..records.len()).filter(|&i| groups[i] == g).collect();
        let r = rules.as_ref().map(|m| m[g]);
        per_group.insert(g.clone(), slice_audit(&idx, sets, &labels, &unc, r, &mut degenerate)?);
    }
    let all: Vec<usize> = (0..records.len()).collect();
    let total_rules = rules.as_ref().map(|m| {
        let mut t = RuleCounts::default();
        m.values().for_each(|c| t.add(c));
        t
    });
    let overall = slice_audit(&all, sets, &labels, &unc, total_rules, &mut degenerate)?;

    let coverage: BTreeMap<String, f64> = per_group.iter().map(|(g, a)| (g.clone(), a.coverage)).collect();
    let size: BTreeMap<String, f64> = per_group.iter().map(|(g, a)| (g.clone(), a.set_size)).collect();
    let (coverage_disparity, set_size_disparity) = if per_group.len() < 2 {
        notes.push(format!(
            "disparity undefined: {} group(s) in the test split, at least 2 needed",
            per_group.len()
        ));
        (None, None)
    } else {
        (
            Some(coverage_disparity(&coverage, options.normalization)?),
            Some(set_size_disparity(&size, options.normalization)?),
        )
    };
    if rules.is_none() {
        notes.push("rule-in/rule-out undefined: no critical classes configured".into());
    }
    if degenerate {
        notes.push("constant set size or uncertainty in some slice; its rank correlation is reported as 0".into());
    }
    if records.iter().any(|r| !has_mc_samples(r)) {
        notes.push("some records lack Monte-Carlo samples; their entropy uses the point probabilities".into());
    }
    Ok(MethodAudit {
        method,
        alpha,
        overall,
        groups: per_group,
        coverage_disparity,
        set_size_disparity,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ScoreRecord, ScoreScale};
    use proptest::prelude::*;

    fn set(classes: Vec<usize>) -> PredictionSet {
        PredictionSet {
            size: classes.len(),
            classes,
            method: Method::Aps,
            group_used: None,
        }
    }

    fn map(values: &[(&str, f64)]) -> BTreeMap<String, f64> {
        values.iter().map(|(g, v)| (g.to_string(), *v)).collect()
    }

    #[test]
    fn coverage_and_size_examples() {
        let sets: Vec<PredictionSet> = (0..10).map(|i| set(vec![i % 3])).collect();
        let mut labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
        assert_eq!(marginal_coverage(&sets, &labels).unwrap(), 1.0);
        labels[4] = 2;
        assert!((marginal_coverage(&sets, &labels).unwrap() - 0.9).abs() < 1e-15);
        let full: Vec<PredictionSet> = (0..4).map(|_| set(vec![0, 1, 2])).collect();
        assert_eq!(marginal_coverage(&full, &[0, 1, 2, 1]).unwrap(), 1.0);
        assert_eq!(average_set_size(&[set(vec![0]), set(vec![0, 1, 2])]).unwrap(), 2.0);
        assert!(matches!(marginal_coverage(&sets, &[0]), Err(AuditError::LengthMismatch { .. })));
        assert!(matches!(average_set_size(&[]), Err(AuditError::Empty)));
    }

    #[test]
    fn set_size_matches_mean_oracle() {
        let sizes: Vec<usize> = (0..1000).map(|i| 1 + (i * 7919) % 10).collect();
        let sets: Vec<PredictionSet> = sizes.iter().map(|&s| set((0..s).collect())).collect();
        let expected = sizes.iter().sum::<usize>() as f64 / 1000.0;
        assert!((average_set_size(&sets).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn disparity_examples() {
        let n = DisparityNorm::PerGroup;
        assert_eq!(coverage_disparity(&map(&[("a", 0.9), ("b", 0.9)]), n).unwrap(), 0.0);
        assert!((coverage_disparity(&map(&[("a", 0.9), ("b", 0.8)]), n).unwrap() - 0.05).abs() < 1e-12);
        let three = map(&[("a", 0.9), ("b", 0.9), ("c", 0.8)]);
        assert!((coverage_disparity(&three, n).unwrap() - 0.2 / 3.0).abs() < 1e-12);
        assert!((coverage_disparity(&three, DisparityNorm::PerPair).unwrap() - 0.2 / 3.0).abs() < 1e-12);
        assert!((set_size_disparity(&map(&[("a", 3.0), ("b", 2.0)]), n).unwrap() - 0.5).abs() < 1e-15);
        assert!((set_size_disparity(&map(&[("b", 3.0), ("a", 2.0)]), n).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(coverage_disparity(&map(&[("a", 0.9)]), n), Err(AuditError::TooFewGroups(1))));
    }

    #[test]
    fn rule_examples() {
        let critical: BTreeSet<usize> = [5].into();
        // group "1": 3 of 4 critical records covered
        let sets = vec![set(vec![5]), set(vec![5, 0]), set(vec![0, 5]), set(vec![0])];
        let labels = vec![5, 5, 5, 5];
        let groups = vec!["1"; 4];
        assert_eq!(rule_in_accuracy(&sets, &labels, &groups, &critical).unwrap()["1"], Some(0.75));
        assert_eq!(rule_out_accuracy(&sets, &labels, &groups, &critical).unwrap()["1"], None);

        let sets = vec![set(vec![0]), set(vec![0, 5]), set(vec![1])];
        let labels = vec![0, 0, 1];
        let out = rule_out_accuracy(&sets, &labels, &["2"; 3], &critical).unwrap();
        assert!((out["2"].unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(rule_in_accuracy(&sets, &labels, &["2"; 3], &critical).unwrap()["2"], None);

        let full: Vec<PredictionSet> = (0..3).map(|_| set((0..6).collect())).collect();
        assert_eq!(rule_out_accuracy(&full, &labels, &["2"; 3], &critical).unwrap()["2"], Some(0.0));
    }

    fn table(groups: &[&str]) -> ScoreTable {
        let records = groups
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let top = 0.4 + 0.05 * (i % 10) as f64;
                ScoreRecord::new(format!("r{i}"), *g, i % 3, vec![top, (1.0 - top) * 0.6, (1.0 - top) * 0.4])
            })
            .collect();
        ScoreTable::new(records, 3, ScoreScale::Probability).unwrap()
    }

    #[test]
    fn single_group_audit_has_null_disparity() {
        let t = table(&["only"; 12]);
        let sets: Vec<PredictionSet> = (0..12).map(|i| set((0..=(i % 3)).collect())).collect();
        let a = audit_sets(Method::Aps, 0.1, &t, &sets, &AuditOptions::default()).unwrap();
        assert!(a.coverage_disparity.is_none() && a.set_size_disparity.is_none());
        assert!(a.notes.iter().any(|n| n.contains("disparity undefined")));
        assert!(a.overall.rule_in.is_none());
        assert_eq!(a.overall.count, 12);
    }

    #[test]
    fn audit_matches_direct_computation() {
        let groups: Vec<&str> = (0..30).map(|i| if i % 3 == 0 { "a" } else { "b" }).collect();
        let t = table(&groups);
        let sets: Vec<PredictionSet> = (0..30).map(|i| set((0..=(i % 2)).collect())).collect();
        let options = AuditOptions {
            critical: [2].into(),
            normalization: DisparityNorm::PerGroup,
        };
        let a = audit_sets(Method::Gaps, 0.2, &t, &sets, &options).unwrap();
        let labels = t.labels();
        assert_eq!(a.overall.coverage, marginal_coverage(&sets, &labels).unwrap());
        let ca = a.groups["a"].coverage;
        let cb = a.groups["b"].coverage;
        assert!((a.coverage_disparity.unwrap() - (ca - cb).abs() / 2.0).abs() < 1e-15);
        assert_eq!(a.overall.rule_in_count + a.overall.rule_out_count, 30);
        assert_eq!(a.groups["a"].count, 10);
    }

    proptest! {
        #[test]
        fn rule_denominators_partition(
            rows in prop::collection::vec((0usize..6, 0usize..6, 1usize..6, 0usize..3), 1..80),
            critical in prop::collection::btree_set(0usize..6, 1..4),
        ) {
            let sets: Vec<PredictionSet> = rows.iter().map(|&(_, start, len, _)| set((0..len).map(|j| (start + j) % 6).collect())).collect();
            let labels: Vec<usize> = rows.iter().map(|r| r.0).collect();
            let groups: Vec<String> = rows.iter().map(|r| r.3.to_string()).collect();
            let counts = rule_counts(&sets, &labels, &groups, &critical).unwrap();
            for (g, c) in &counts {
                let n = groups.iter().filter(|x| *x == g).count();
                prop_assert_eq!(c.rule_in_total + c.rule_out_total, n);
            }
            let total: usize = counts.values().map(|c| c.rule_in_total + c.rule_out_total).sum();
            prop_assert_eq!(total, rows.len());
        }

        #[test]
        fn disparity_invariant_under_relabeling(values in prop::collection::vec(0.0f64..1.0, 2..8)) {
            let a: BTreeMap<String, f64> = values.iter().enumerate().map(|(i, v)| (format!("g{i}"), *v)).collect();
            let b: BTreeMap<String, f64> = values.iter().rev().enumerate().map(|(i, v)| (format!("h{i}"), *v)).collect();
            let da = coverage_disparity(&a, DisparityNorm::PerGroup).unwrap();
            let db = coverage_disparity(&b, DisparityNorm::PerGroup).unwrap();
            prop_assert!((da - db).abs() < 1e-12);
            prop_assert!(da >= 0.0);
            let equal = values.iter().all(|v| *v == values[0]);
            prop_assert_eq!(da == 0.0, equal);
        }
    }
}
