//! Classifier score tables.
//!
//! A [`ScoreTable`] is an immutable, validated collection of [`ScoreRecord`]s
//! sharing one class count `K`. Rows are either probability vectors, raw
//! logits, or unnormalized non-negative weights (see [`ScoreScale`]); only
//! probability-scale tables are accepted by calibration and prediction.

pub mod io;

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{parse_score_table, write_score_table, ColumnSchema, TableFormat};

/// Allowed deviation of a probability row sum from 1 on ingestion.
pub const INGEST_SIMPLEX_TOL: f64 = 1e-6;

/// Rows whose sum deviates from 1 by more than this are renormalized.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Group token used for records with no group attribute.
pub const MISSING_GROUP: &str = "missing";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read or write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("validation error: rows off the probability simplex: {}", format_rows(.rows))]
    Simplex { rows: Vec<(usize, String)> },

    #[error("validation error: {0}")]
    Invalid(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("split error: group {group:?} has {count} record(s), stratified splitting needs at least 2")]
    SplitTooSmall { group: String, count: usize },

    #[error("record {id:?} has neither probabilities nor Monte-Carlo samples")]
    MissingScores { id: String },
}

fn format_rows(rows: &[(usize, String)]) -> String {
    rows.iter()
        .map(|(row, id)| format!("row {row} (id {id:?})"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// What the numbers in a record's `probs` (and `mc_samples`) rows mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScoreScale {
    /// Rows lie on the probability simplex.
    #[default]
    Probability,
    /// Rows are raw real-valued logits.
    Logit,
    /// Rows are non-negative weights that still need renormalizing.
    Unnormalized,
}

/// One classified example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub group: String,
    pub label: usize,
    pub probs: Vec<f64>,
    /// One score vector per Monte-Carlo pass (`T x K`).
    #[serde(rename = "mc", default, skip_serializing_if = "Option::is_none")]
    pub mc_samples: Option<Vec<Vec<f64>>>,
}

impl ScoreRecord {
    pub fn new(id: impl Into<String>, group: impl Into<String>, label: usize, probs: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            group: group.into(),
            label,
            probs,
            mc_samples: None,
        }
    }

    #[must_use]
    pub fn with_mc_samples(mut self, samples: Vec<Vec<f64>>) -> Self {
        self.mc_samples = Some(samples);
        self
    }
}

/// A validated, immutable collection of score records.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    records: Vec<ScoreRecord>,
    k: usize,
    groups: BTreeSet<String>,
    class_names: Option<Vec<String>>,
    critical_classes: BTreeSet<usize>,
    scale: ScoreScale,
}

impl ScoreTable {
    /// Validates `records` against class count `k` and the given scale.
    ///
    /// Probability rows within [`INGEST_SIMPLEX_TOL`] of the simplex are
    /// accepted and renormalized when they are more than [`SIMPLEX_TOL`] off.
    pub fn new(mut records: Vec<ScoreRecord>, k: usize, scale: ScoreScale) -> Result<Self, DataError> {
        if k == 0 {
            return Err(DataError::Schema("class count K must be at least 1".into()));
        }
        let mut seen = HashSet::with_capacity(records.len());
        let mut off_simplex = Vec::new();
        for (i, record) in records.iter_mut().enumerate() {
            let row = i + 1;
            if !seen.insert(record.id.clone()) {
                return Err(DataError::Invalid(format!("duplicate id {:?} at row {row}", record.id)));
            }
            if record.label >= k {
                return Err(DataError::Invalid(format!(
                    "row {row} (id {:?}): label {} is outside [0, {k})",
                    record.id, record.label
                )));
            }
            if record.probs.len() != k {
                return Err(DataError::Schema(format!(
                    "row {row} (id {:?}) has {} scores, expected K = {k}",
                    record.id,
                    record.probs.len()
                )));
            }
            let mut ok = check_row(&mut record.probs, scale);
            if let Some(samples) = record.mc_samples.as_mut() {
                for sample in samples.iter_mut() {
                    if sample.len() != k {
                        return Err(DataError::Schema(format!(
                            "row {row} (id {:?}) has a Monte-Carlo sample with {} scores, expected K = {k}",
                            record.id,
                            sample.len()
                        )));
                    }
                    ok &= check_row(sample, scale);
                }
            }
            if !ok {
                off_simplex.push((row, record.id.clone()));
            }
        }
        if !off_simplex.is_empty() {
            return match scale {
                ScoreScale::Probability => Err(DataError::Simplex { rows: off_simplex }),
                _ => Err(DataError::Numeric(format!(
                    "non-finite or negative scores in {}",
                    format_rows(&off_simplex)
                ))),
            };
        }
        let groups = records.iter().map(|r| r.group.clone()).collect();
        Ok(Self {
            records,
            k,
            groups,
            class_names: None,
            critical_classes: BTreeSet::new(),
            scale,
        })
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self, DataError> {
        if names.len() != self.k {
            return Err(DataError::Schema(format!(
                "{} class names given for K = {}",
                names.len(),
                self.k
            )));
        }
        self.class_names = Some(names);
        Ok(self)
    }

    pub fn with_critical_classes(mut self, critical: impl IntoIterator<Item = usize>) -> Result<Self, DataError> {
        let critical: BTreeSet<usize> = critical.into_iter().collect();
        if let Some(bad) = critical.iter().find(|&&c| c >= self.k) {
            return Err(DataError::Invalid(format!(
                "critical class {bad} is outside [0, {})",
                self.k
            )));
        }
        self.critical_classes = critical;
        Ok(self)
    }

    pub fn records(&self) -> &[ScoreRecord] {
        &self.records
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn groups(&self) -> &BTreeSet<String> {
        &self.groups
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn critical_classes(&self) -> &BTreeSet<usize> {
        &self.critical_classes
    }

    pub fn scale(&self) -> ScoreScale {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    /// Records belonging to `group`, in table order.
    pub fn group_records<'a>(&'a self, group: &'a str) -> impl Iterator<Item = &'a ScoreRecord> + 'a {
        self.records.iter().filter(move |r| r.group == group)
    }

    /// Builds a sibling table with new rows, keeping vocabularies and critical set.
    pub(crate) fn derive(&self, records: Vec<ScoreRecord>, scale: ScoreScale) -> Result<Self, DataError> {
        let mut table = Self::new(records, self.k, scale)?;
        table.class_names = self.class_names.clone();
        table.critical_classes = self.critical_classes.clone();
        Ok(table)
    }

    fn subset(&self, indices: &[usize]) -> Self {
        let records: Vec<ScoreRecord> = indices.iter().map(|&i| self.records[i].clone()).collect();
        let groups = records.iter().map(|r| r.group.clone()).collect();
        Self {
            records,
            k: self.k,
            groups,
            class_names: self.class_names.clone(),
            critical_classes: self.critical_classes.clone(),
            scale: self.scale,
        }
    }
}

/// Checks one row for its scale; renormalizes probability rows in place.
fn check_row(row: &mut [f64], scale: ScoreScale) -> bool {
    if row.iter().any(|v| !v.is_finite()) {
        return false;
    }
    match scale {
        ScoreScale::Logit => true,
        ScoreScale::Unnormalized => row.iter().all(|&v| v >= 0.0) && row.iter().sum::<f64>() > 0.0,
        ScoreScale::Probability => {
            if row
                .iter()
                .any(|v| !(-INGEST_SIMPLEX_TOL..=1.0 + INGEST_SIMPLEX_TOL).contains(v))
            {
                return false;
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > INGEST_SIMPLEX_TOL {
                return false;
            }
            let needs_clamp = row.iter().any(|&v| v < 0.0);
            if needs_clamp {
                row.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            let sum: f64 = row.iter().sum();
            if needs_clamp || (sum - 1.0).abs() > SIMPLEX_TOL {
                row.iter_mut().for_each(|v| *v /= sum);
            }
            true
        }
    }
}

/// Numerically stable exponential normalization of one row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Uniform rescaling of a non-negative row onto the simplex.
pub fn renormalize(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| w / total).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeMode {
    SoftmaxFromLogits,
    Renormalize,
}

/// Maps every row (and Monte-Carlo sample) of `table` onto the simplex.
pub fn normalize_rows(table: &ScoreTable, mode: NormalizeMode) -> Result<ScoreTable, DataError> {
    let transform: fn(&[f64]) -> Vec<f64> = match (mode, table.scale()) {
        (NormalizeMode::SoftmaxFromLogits, ScoreScale::Logit) => softmax,
        (NormalizeMode::SoftmaxFromLogits, other) => {
            return Err(DataError::Invalid(format!(
                "softmax normalization needs logit rows, table holds {other:?} rows"
            )))
        }
        (NormalizeMode::Renormalize, ScoreScale::Logit) => {
            return Err(DataError::Invalid("cannot renormalize logit rows; use softmax".into()))
        }
        (NormalizeMode::Renormalize, _) => renormalize,
    };
    let mut records = Vec::with_capacity(table.len());
    for record in table.records() {
        let bad = record.probs.iter().any(|v| !v.is_finite())
            || record
                .mc_samples
                .iter()
                .flatten()
                .flatten()
                .any(|v| !v.is_finite());
        if bad {
            return Err(DataError::Numeric(format!("non-finite score in record {:?}", record.id)));
        }
        let mut out = record.clone();
        out.probs = transform(&record.probs);
        if let Some(samples) = &record.mc_samples {
            out.mc_samples = Some(samples.iter().map(|s| transform(s)).collect());
        }
        records.push(out);
    }
    table.derive(records, ScoreScale::Probability)
}

/// How to divide a table into calibration and test parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub calibration_fraction: f64,
    pub seed: u64,
    pub stratify_by_group: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            calibration_fraction: 0.5,
            seed: 0,
            stratify_by_group: true,
        }
    }
}

fn calibration_count(fraction: f64, size: usize) -> usize {
    let n = (fraction * size as f64).round() as usize;
    n.clamp(1, size - 1)
}

/// Seeded random partition into `(calibration, test)`.
///
/// Indices are permuted by a Fisher-Yates shuffle driven by ChaCha8 seeded
/// with `spec.seed`; under stratification each group (in sorted group order)
/// is shuffled in turn from the same generator. The first
/// `round(fraction * n)` shuffled indices, clamped to `[1, n - 1]`, form the
/// calibration part. Both parts keep the original row order.
pub fn split_calibration_test(table: &ScoreTable, spec: &SplitSpec) -> Result<(ScoreTable, ScoreTable), DataError> {
    if !(spec.calibration_fraction > 0.0 && spec.calibration_fraction < 1.0) {
        return Err(DataError::Invalid(format!(
            "calibration fraction {} is outside (0, 1)",
            spec.calibration_fraction
        )));
    }
    if table.len() < 2 {
        return Err(DataError::Invalid(format!(
            "cannot split a table with {} record(s)",
            table.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut calibration = Vec::new();
    let strata: Vec<Vec<usize>> = if spec.stratify_by_group {
        table
            .groups()
            .iter()
            .map(|g| {
                (0..table.len())
                    .filter(|&i| &table.records[i].group == g)
                    .collect()
            })
            .collect()
    } else {
        vec![(0..table.len()).collect()]
    };
    for mut stratum in strata {
        if stratum.len() < 2 {
            let group = table.records[stratum[0]].group.clone();
            return Err(DataError::SplitTooSmall {
                group,
                count: stratum.len(),
            });
        }
        stratum.shuffle(&mut rng);
        let n_cal = calibration_count(spec.calibration_fraction, stratum.len());
        calibration.extend_from_slice(&stratum[..n_cal]);
    }
    calibration.sort_unstable();
    let mut in_cal = vec![false; table.len()];
    for &i in &calibration {
        in_cal[i] = true;
    }
    let test: Vec<usize> = (0..table.len()).filter(|&i| !in_cal[i]).collect();
    Ok((table.subset(&calibration), table.subset(&test)))
}

/// Columnwise mean of the Monte-Carlo samples, or `probs` when there are none.
pub fn mean_probs(record: &ScoreRecord) -> Result<Vec<f64>, DataError> {
    match record.mc_samples.as_deref() {
        Some(samples) if !samples.is_empty() => {
            let k = samples[0].len();
            let t = samples.len() as f64;
            let mut mean = vec![0.0; k];
            for sample in samples {
                for (m, &p) in mean.iter_mut().zip(sample) {
                    *m += p;
                }
            }
            mean.iter_mut().for_each(|m| *m /= t);
            Ok(mean)
        }
        _ if !record.probs.is_empty() => Ok(record.probs.clone()),
        _ => Err(DataError::MissingScores { id: record.id.clone() }),
    }
}
