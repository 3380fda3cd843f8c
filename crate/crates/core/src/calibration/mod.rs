//! Split-conformal calibration.
//!
//! Aggregate methods (APS, RAPS) fit one score quantile over the whole
//! calibration split. Group methods (GAPS, GRAPS) fit one quantile per group
//! attribute using only that group's records, which gives each group its own
//! finite-sample coverage guarantee.

pub mod temperature;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::data::{DataError, ScoreRecord, ScoreScale, ScoreTable};
use crate::scoring::{conformity_score, record_uniform, ScoreKind, ScoreMethod};

pub use temperature::{
    apply_temperature, average_nll, fit_temperature, fit_temperature_by_group, prepare_table, ScoreInput,
    Temperature, TemperatureFit,
};

/// Slack for floating-point error when taking `ceil((1 - alpha)(m + 1))`.
const RANK_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("cannot compute a conformal quantile from zero scores")]
    EmptyScores,

    #[error("miscoverage level {0} is outside (0, 1)")]
    InvalidAlpha(f64),

    #[error("invalid score method: {0}")]
    InvalidScoreMethod(String),

    #[error("calibration needs probability rows, table holds {0:?} rows")]
    WrongScale(ScoreScale),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error(transparent)]
    Data(#[from] DataError),
}

/// Prediction-set construction method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Naive,
    Aps,
    Raps,
    Gaps,
    Graps,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Naive, Method::Aps, Method::Raps, Method::Gaps, Method::Graps];

    pub fn is_group(self) -> bool {
        matches!(self, Method::Gaps | Method::Graps)
    }

    pub fn score_kind(self) -> Option<ScoreKind> {
        match self {
            Method::Naive => None,
            Method::Aps | Method::Gaps => Some(ScoreKind::Aps),
            Method::Raps | Method::Graps => Some(ScoreKind::Raps),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Aps => "aps",
            Method::Raps => "raps",
            Method::Gaps => "gaps",
            Method::Graps => "graps",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown method {s:?}; expected one of naive, aps, raps, gaps, graps"))
    }
}

/// A score threshold; `+inf` means every class is included.
///
/// Serialized as a JSON number, or the string `"inf"` when infinite.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Quantile(pub f64);

impl Quantile {
    pub const INFINITE: Quantile = Quantile(f64::INFINITY);

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_infinite(self) -> bool {
        self.0.is_infinite()
    }
}

impl Serialize for Quantile {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            serializer.serialize_str("inf")
        } else {
            serializer.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Quantile {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Num(v) => Ok(Quantile(v)),
            Repr::Str(s) if s == "inf" => Ok(Quantile::INFINITE),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("bad quantile {s:?}"))),
        }
    }
}

/// A fitted prediction-set method, ready to build sets for new records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedPredictor {
    pub method: Method,
    pub alpha: f64,
    pub k: usize,
    /// Aggregate methods only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantile: Option<Quantile>,
    /// Group methods only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_quantiles: Option<BTreeMap<String, Quantile>>,
    /// Group methods only: aggregate quantile used for groups unseen at calibration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback_quantile: Option<Quantile>,
    pub score_method: ScoreMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<Temperature>,
    /// Scale of the raw inputs the predictor expects before temperature is applied.
    #[serde(default)]
    pub input_scale: ScoreScale,
    pub calibration_counts: BTreeMap<String, usize>,
    pub n: usize,
    /// Which count enters the quantile level: total `n` for aggregate methods, `n_a` for group methods.
    pub quantile_sample_size: String,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl CalibratedPredictor {
    fn base(method: Method, alpha: f64, table: &ScoreTable, score_method: ScoreMethod) -> Self {
        let calibration_counts = table
            .groups()
            .iter()
            .map(|g| (g.clone(), table.group_records(g).count()))
            .collect();
        Self {
            method,
            alpha,
            k: table.k(),
            quantile: None,
            group_quantiles: None,
            fallback_quantile: None,
            score_method,
            temperature: None,
            input_scale: ScoreScale::Probability,
            calibration_counts,
            n: table.len(),
            quantile_sample_size: if method.is_group() {
                "per-group count n_a".into()
            } else {
                "total calibration count n".into()
            },
            warnings: Vec::new(),
        }
    }

    /// Records how raw inputs were transformed before fitting.
    #[must_use]
    pub fn with_input(mut self, scale: ScoreScale, temperature: Option<Temperature>) -> Self {
        self.input_scale = scale;
        self.temperature = temperature;
        self
    }

    /// Checks the structural invariants of a (possibly deserialized) predictor.
    pub fn validate(&self) -> Result<(), CalibrationError> {
        check_alpha(self.alpha)?;
        let positive = |q: &Quantile| q.0 > 0.0 || q.is_infinite();
        let ok = match self.method {
            Method::Naive => self.quantile.is_none() && self.group_quantiles.is_none(),
            Method::Aps | Method::Raps => {
                self.group_quantiles.is_none() && self.quantile.as_ref().is_some_and(positive)
            }
            Method::Gaps | Method::Graps => {
                self.quantile.is_none()
                    && self.group_quantiles.as_ref().is_some_and(|m| {
                        m.iter().all(|(g, q)| {
                            positive(q) && self.calibration_counts.get(g).copied().unwrap_or(0) >= 1
                        })
                    })
            }
        };
        if !ok {
            return Err(CalibrationError::Numeric(format!(
                "predictor for {} has inconsistent quantile fields",
                self.method
            )));
        }
        self.score_method
            .validate(self.k)
            .map_err(CalibrationError::InvalidScoreMethod)
    }
}

fn check_alpha(alpha: f64) -> Result<(), CalibrationError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(CalibrationError::InvalidAlpha(alpha))
    }
}

/// Order-statistic rank `ceil((1 - alpha)(m + 1))`.
pub fn conformal_rank(m: usize, alpha: f64) -> usize {
    let x = (1.0 - alpha) * (m as f64 + 1.0);
    (x - RANK_EPS).ceil().max(1.0) as usize
}

/// Conformal quantile of `scores` at miscoverage `alpha`.
///
/// Returns the `ceil((1 - alpha)(m + 1))`-th smallest score, or `+inf` when
/// that rank exceeds `m` (too few scores for the requested coverage).
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<f64, CalibrationError> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(CalibrationError::EmptyScores);
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(CalibrationError::Numeric("NaN conformity score".into()));
    }
    let rank = conformal_rank(scores.len(), alpha);
    if rank > scores.len() {
        return Ok(f64::INFINITY);
    }
    let mut buf = scores.to_vec();
    let (_, nth, _) = buf.select_nth_unstable_by(rank - 1, |a, b| a.total_cmp(b));
    Ok(*nth)
}

/// Conformity score of each record, in table order.
pub fn calibration_scores<'a>(
    records: impl IntoIterator<Item = &'a ScoreRecord>,
    method: &ScoreMethod,
) -> Vec<f64> {
    records
        .into_iter()
        .map(|r| {
            let u = method.randomization_seed.map(|seed| record_uniform(seed, &r.id));
            conformity_score(&r.probs, r.label, method, u)
        })
        .collect()
}

fn check_table(table: &ScoreTable, score_method: &ScoreMethod) -> Result<(), CalibrationError> {
    if table.scale() != ScoreScale::Probability {
        return Err(CalibrationError::WrongScale(table.scale()));
    }
    score_method
        .validate(table.k())
        .map_err(CalibrationError::InvalidScoreMethod)
}

/// Fits one quantile over all records (APS or RAPS per `score_method.kind`).
pub fn fit_aggregate(
    table: &ScoreTable,
    alpha: f64,
    score_method: ScoreMethod,
) -> Result<CalibratedPredictor, CalibrationError> {
    check_table(table, &score_method)?;
    let method = match score_method.kind {
        ScoreKind::Aps => Method::Aps,
        ScoreKind::Raps => Method::Raps,
    };
    let scores = calibration_scores(table.records(), &score_method);
    let q = conformal_quantile(&scores, alpha)?;
    let mut predictor = CalibratedPredictor::base(method, alpha, table, score_method);
    if q.is_infinite() {
        predictor.warnings.push(format!(
            "{} calibration records are too few for alpha = {alpha}; every set is the full class set",
            table.len()
        ));
    }
    predictor.quantile = Some(Quantile(q));
    Ok(predictor)
}

/// Fits one quantile per group, each at its own count `n_a`
/// (GAPS or GRAPS per `score_method.kind`).
pub fn fit_group(
    table: &ScoreTable,
    alpha: f64,
    score_method: ScoreMethod,
) -> Result<CalibratedPredictor, CalibrationError> {
    check_table(table, &score_method)?;
    let method = match score_method.kind {
        ScoreKind::Aps => Method::Gaps,
        ScoreKind::Raps => Method::Graps,
    };
    let mut predictor = CalibratedPredictor::base(method, alpha, table, score_method);
    let min_count = ((1.0 / alpha) - RANK_EPS).ceil() as usize - 1;
    let mut quantiles = BTreeMap::new();
    for group in table.groups() {
        let scores = calibration_scores(table.group_records(group), &score_method);
        let q = conformal_quantile(&scores, alpha)?;
        if q.is_infinite() {
            predictor.warnings.push(format!(
                "group {group:?} has {} calibration record(s), fewer than the {min_count} needed at alpha = {alpha}; \
                 its sets are the full class set",
                scores.len()
            ));
        }
        quantiles.insert(group.clone(), Quantile(q));
    }
    let all = calibration_scores(table.records(), &score_method);
    predictor.fallback_quantile = Some(Quantile(conformal_quantile(&all, alpha)?));
    predictor.group_quantiles = Some(quantiles);
    Ok(predictor)
}

/// The non-conformal baseline needs no scores; only counts are recorded.
pub fn fit_naive(table: &ScoreTable, alpha: f64) -> Result<CalibratedPredictor, CalibrationError> {
    check_alpha(alpha)?;
    if table.scale() != ScoreScale::Probability {
        return Err(CalibrationError::WrongScale(table.scale()));
    }
    Ok(CalibratedPredictor::base(Method::Naive, alpha, table, ScoreMethod::aps()))
}

/// Fits `method`; `raps` supplies lambda, k_reg and randomization for the score.
pub fn fit(
    table: &ScoreTable,
    method: Method,
    alpha: f64,
    raps: ScoreMethod,
) -> Result<CalibratedPredictor, CalibrationError> {
    let score_method = ScoreMethod {
        kind: method.score_kind().unwrap_or(ScoreKind::Aps),
        ..raps
    };
    let score_method = if score_method.kind == ScoreKind::Aps {
        ScoreMethod {
            lambda: 0.0,
            k_reg: 1,
            ..score_method
        }
    } else {
        score_method
    };
    match method {
        Method::Naive => fit_naive(table, alpha),
        Method::Aps | Method::Raps => fit_aggregate(table, alpha, score_method),
        Method::Gaps | Method::Graps => fit_group(table, alpha, score_method),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ScoreRecord;

    fn sorted_index_oracle(scores: &[f64], rank: usize) -> f64 {
        let mut s = scores.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        s[rank - 1]
    }

    #[test]
    fn quantile_examples() {
        // level = ceil(0.5 * 5) / 4 = 0.75 -> 3rd smallest
        let scores = [0.4, 0.1, 0.3, 0.2];
        assert_eq!(conformal_quantile(&scores, 0.5).unwrap(), sorted_index_oracle(&scores, 3));
        assert_eq!(conformal_quantile(&scores, 0.5).unwrap(), 0.3);
        // ceil(0.9 * 5) / 4 = 1.25 > 1
        assert_eq!(conformal_quantile(&scores, 0.1).unwrap(), f64::INFINITY);
        assert_eq!(conformal_quantile(&[0.7; 50], 0.2).unwrap(), 0.7);
    }

    #[test]
    fn quantile_errors() {
        assert!(matches!(conformal_quantile(&[], 0.1), Err(CalibrationError::EmptyScores)));
        assert!(matches!(conformal_quantile(&[0.1], 0.0), Err(CalibrationError::InvalidAlpha(_))));
        assert!(matches!(conformal_quantile(&[0.1], 1.0), Err(CalibrationError::InvalidAlpha(_))));
    }

    #[test]
    fn rank_survives_float_rounding() {
        // (1 - 0.7) * 10 evaluates to 3.0000000000000004
        assert_eq!(conformal_rank(9, 0.7), 3);
        assert_eq!(conformal_rank(9, 0.1), 9);
        assert_eq!(conformal_rank(4, 0.5), 3);
    }

    #[test]
    fn quantile_monotone_in_alpha() {
        let scores: Vec<f64> = (0..200).map(|i| ((i * 37) % 200) as f64 / 200.0).collect();
        let mut last = f64::INFINITY;
        for a in 1..100 {
            let q = conformal_quantile(&scores, a as f64 / 100.0).unwrap();
            assert!(q <= last);
            last = q;
        }
    }

    /// K = 10 rows `[s, (1 - s)/9, ...]` labelled with class 0 have APS score exactly `s`.
    fn two_group_table() -> ScoreTable {
        let mut records = Vec::new();
        for (g, scores) in [("a", [0.1, 0.2, 0.3, 0.4]), ("b", [0.6, 0.7, 0.8, 0.9])] {
            for (i, s) in scores.into_iter().enumerate() {
                let mut probs = vec![(1.0 - s) / 9.0; 10];
                probs[0] = s;
                records.push(ScoreRecord::new(format!("{g}{i}"), g, 0, probs));
            }
        }
        ScoreTable::new(records, 10, ScoreScale::Probability).unwrap()
    }

    #[test]
    fn single_class_table_gives_full_sets() {
        let records = (0..10).map(|i| ScoreRecord::new(format!("r{i}"), "1", 0, vec![1.0])).collect();
        let t = ScoreTable::new(records, 1, ScoreScale::Probability).unwrap();
        let p = fit_aggregate(&t, 0.1, ScoreMethod::aps()).unwrap();
        assert_eq!(p.quantile, Some(Quantile(1.0)));
    }

    #[test]
    fn group_quantiles_use_group_counts() {
        let t = two_group_table();
        let p = fit_group(&t, 0.5, ScoreMethod::aps()).unwrap();
        let q = p.group_quantiles.as_ref().unwrap();
        assert!((q["a"].0 - 0.3).abs() < 1e-12, "{:?}", q["a"]);
        assert!((q["b"].0 - 0.8).abs() < 1e-12, "{:?}", q["b"]);
        assert_eq!(p.calibration_counts["a"], 4);
        assert!(p.warnings.is_empty());
        p.validate().unwrap();
    }

    #[test]
    fn single_group_matches_aggregate() {
        let records = (0..30)
            .map(|i| {
                let s = 0.35 + 0.02 * i as f64;
                ScoreRecord::new(format!("r{i}"), "only", i % 3, vec![s, (1.0 - s) * 0.7, (1.0 - s) * 0.3])
            })
            .collect();
        let t = ScoreTable::new(records, 3, ScoreScale::Probability).unwrap();
        let agg = fit_aggregate(&t, 0.1, ScoreMethod::aps()).unwrap();
        let grp = fit_group(&t, 0.1, ScoreMethod::aps()).unwrap();
        assert_eq!(grp.group_quantiles.unwrap()["only"], agg.quantile.unwrap());
    }

    #[test]
    fn small_group_gets_infinite_quantile_and_warning() {
        let mut records: Vec<ScoreRecord> = (0..20)
            .map(|i| ScoreRecord::new(format!("big{i}"), "big", 0, vec![0.8, 0.2]))
            .collect();
        records.extend((0..3).map(|i| ScoreRecord::new(format!("small{i}"), "small", 0, vec![0.8, 0.2])));
        let t = ScoreTable::new(records, 2, ScoreScale::Probability).unwrap();
        let p = fit_group(&t, 0.1, ScoreMethod::aps()).unwrap();
        let q = p.group_quantiles.as_ref().unwrap();
        assert!(q["small"].is_infinite());
        assert!(!q["big"].is_infinite());
        assert_eq!(p.warnings.len(), 1);
        assert!(p.warnings[0].contains("small"));
    }

    #[test]
    fn alpha_ordering_of_fitted_quantiles() {
        let records = (0..100)
            .map(|i| {
                let s = 0.34 + 0.006 * i as f64;
                ScoreRecord::new(format!("r{i}"), "1", (i * 7) % 3, vec![s, (1.0 - s) / 2.0, (1.0 - s) / 2.0])
            })
            .collect();
        let t = ScoreTable::new(records, 3, ScoreScale::Probability).unwrap();
        let loose = fit_aggregate(&t, 0.5, ScoreMethod::aps()).unwrap().quantile.unwrap();
        let tight = fit_aggregate(&t, 0.1, ScoreMethod::aps()).unwrap().quantile.unwrap();
        assert!(loose <= tight);
    }

    #[test]
    fn quantile_json_encodes_infinity() {
        let json = serde_json::to_string(&vec![Quantile(0.25), Quantile::INFINITE]).unwrap();
        assert_eq!(json, r#"[0.25,"inf"]"#);
        let back: Vec<Quantile> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, vec![Quantile(0.25), Quantile::INFINITE]);
    }

    #[test]
    fn logit_tables_are_refused() {
        let r = vec![ScoreRecord::new("a", "1", 0, vec![3.0, -1.0])];
        let t = ScoreTable::new(r, 2, ScoreScale::Logit).unwrap();
        assert!(matches!(fit_aggregate(&t, 0.1, ScoreMethod::aps()), Err(CalibrationError::WrongScale(_))));
    }

    #[test]
    fn method_parsing() {
        assert_eq!("GAPS".parse::<Method>().unwrap(), Method::Gaps);
        assert!("foo".parse::<Method>().is_err());
        assert!(Method::Graps.is_group() && !Method::Raps.is_group());
    }
}
