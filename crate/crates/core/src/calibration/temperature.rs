//! Temperature (Platt) scaling of classifier outputs.
//!
//! Scaled probabilities are `exp(z / beta) / sum_i exp(z_i / beta)`. The
//! temperature is fitted by minimizing mean negative log-likelihood with a
//! golden-section search over `ln(beta)` in `[-6, 6]`. The objective is convex
//! in `1 / beta`, hence unimodal in `ln(beta)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::CalibrationError;
use crate::data::{softmax, DataError, ScoreRecord, ScoreScale, ScoreTable};

pub const LOG_BETA_BOUNDS: (f64, f64) = (-6.0, 6.0);
pub const BETA_TOLERANCE: f64 = 1e-6;

/// Raw classifier output handed to [`apply_temperature`].
#[derive(Debug, Clone, Copy)]
pub enum ScoreInput<'a> {
    Logits(&'a [f64]),
    /// Probabilities are treated as logits `ln p` (equal up to a per-row constant).
    Probs(&'a [f64]),
}

pub fn apply_temperature(input: ScoreInput<'_>, beta: f64) -> Vec<f64> {
    assert!(beta > 0.0, "temperature must be positive, got {beta}");
    let scaled: Vec<f64> = match input {
        ScoreInput::Logits(z) => z.iter().map(|v| v / beta).collect(),
        ScoreInput::Probs(p) => p.iter().map(|v| v.ln() / beta).collect(),
    };
    softmax(&scaled)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub beta: f64,
    pub nll: f64,
    /// False when the optimum sits on a search boundary (e.g. separable data).
    pub interior: bool,
}

/// Fitted temperature applied to raw inputs before any scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scope")]
pub enum Temperature {
    Global { beta: f64 },
    PerGroup { betas: BTreeMap<String, f64>, fallback: f64 },
}

impl Temperature {
    pub fn beta_for(&self, group: &str) -> f64 {
        match self {
            Temperature::Global { beta } => *beta,
            Temperature::PerGroup { betas, fallback } => betas.get(group).copied().unwrap_or(*fallback),
        }
    }
}

fn input_of(scale: ScoreScale, row: &[f64]) -> ScoreInput<'_> {
    match scale {
        ScoreScale::Logit => ScoreInput::Logits(row),
        _ => ScoreInput::Probs(row),
    }
}

fn record_nll(record: &ScoreRecord, scale: ScoreScale, beta: f64) -> f64 {
    let scaled: Vec<f64> = match input_of(scale, &record.probs) {
        ScoreInput::Logits(z) => z.iter().map(|v| v / beta).collect(),
        ScoreInput::Probs(p) => p.iter().map(|v| v.ln() / beta).collect(),
    };
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - scaled[record.label]
}

/// Mean negative log-likelihood of the temperature-scaled rows.
pub fn average_nll<'a>(
    records: impl IntoIterator<Item = &'a ScoreRecord>,
    scale: ScoreScale,
    beta: f64,
) -> Result<f64, CalibrationError> {
    let mut total = 0.0;
    let mut n = 0usize;
    for r in records {
        total += record_nll(r, scale, beta);
        n += 1;
    }
    if n == 0 {
        return Err(CalibrationError::EmptyScores);
    }
    let mean = total / n as f64;
    if mean.is_finite() {
        Ok(mean)
    } else {
        Err(CalibrationError::Numeric(format!(
            "negative log-likelihood is not finite at beta = {beta}"
        )))
    }
}

fn fit_records<'a>(
    records: impl IntoIterator<Item = &'a ScoreRecord> + Clone,
    scale: ScoreScale,
) -> Result<TemperatureFit, CalibrationError> {
    let f = |u: f64| average_nll(records.clone(), scale, u.exp());
    let (lo_bound, hi_bound) = LOG_BETA_BOUNDS;
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (lo_bound, hi_bound);
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1)?;
    let mut f2 = f(x2)?;
    while hi.exp() - lo.exp() > BETA_TOLERANCE {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1)?;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2)?;
        }
    }
    let mut best = ((lo + hi) / 2.0, f((lo + hi) / 2.0)?);
    for edge in [lo_bound, hi_bound] {
        let v = f(edge)?;
        if v < best.1 {
            best = (edge, v);
        }
    }
    let margin = 1e-3;
    let interior = best.0 > lo_bound + margin && best.0 < hi_bound - margin;
    Ok(TemperatureFit {
        beta: best.0.exp(),
        nll: best.1,
        interior,
    })
}

/// Fits one temperature over all records of a logit (or probability) table.
pub fn fit_temperature(table: &ScoreTable) -> Result<TemperatureFit, CalibrationError> {
    if table.scale() == ScoreScale::Unnormalized {
        return Err(CalibrationError::WrongScale(table.scale()));
    }
    if table.is_empty() {
        return Err(CalibrationError::EmptyScores);
    }
    fit_records(table.records(), table.scale())
}

/// Fits a separate temperature for each group.
pub fn fit_temperature_by_group(table: &ScoreTable) -> Result<BTreeMap<String, TemperatureFit>, CalibrationError> {
    if table.scale() == ScoreScale::Unnormalized {
        return Err(CalibrationError::WrongScale(table.scale()));
    }
    table
        .groups()
        .iter()
        .map(|g| {
            let records: Vec<&ScoreRecord> = table.group_records(g).collect();
            Ok((g.clone(), fit_records(records.iter().copied(), table.scale())?))
        })
        .collect()
}

/// Converts a raw table to probability rows, applying `temperature` when given.
///
/// Monte-Carlo samples receive the same transformation as the point scores.
pub fn prepare_table(table: &ScoreTable, temperature: Option<&Temperature>) -> Result<ScoreTable, DataError> {
    let scale = table.scale();
    if scale == ScoreScale::Probability && temperature.is_none() {
        return Ok(table.clone());
    }
    let transform = |row: &[f64], beta: f64| -> Vec<f64> {
        match scale {
            ScoreScale::Unnormalized => {
                let p = crate::data::renormalize(row);
                if beta == 1.0 {
                    p
                } else {
                    apply_temperature(ScoreInput::Probs(&p), beta)
                }
            }
            ScoreScale::Probability if beta == 1.0 => row.to_vec(),
            _ => apply_temperature(input_of(scale, row), beta),
        }
    };
    let records = table
        .records()
        .iter()
        .map(|r| {
            let beta = temperature.map_or(1.0, |t| t.beta_for(&r.group));
            let mut out = r.clone();
            out.probs = transform(&r.probs, beta);
            if let Some(samples) = &r.mc_samples {
                out.mc_samples = Some(samples.iter().map(|s| transform(s, beta)).collect());
            }
            out
        })
        .collect();
    table.derive(records, ScoreScale::Probability)
}
