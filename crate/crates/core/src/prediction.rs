//! Prediction-set construction.
//!
//! Every rule returns a rank prefix: the top `size` classes under the
//! probability ranking of [`crate::scoring::class_order`]. The class at rank
//! `j` enters a conformal set when the mass ranked strictly above it is below
//! the threshold `q`, or when its own conformity score is at most `q`. The two
//! tests agree whenever the class has positive probability; the second makes
//! "score <= q implies covered" hold exactly in floating point. These
//! deterministic sets always hold at least the top-ranked class.
//!
//! With a randomized score the class at rank `j` enters when its randomized
//! score `mass_above + u * p_j + penalty` is at most `q`. Those sets may be
//! empty: forcing the top class in would push coverage above the
//! `1 - alpha + 1/(n + 1)` ceiling whenever the classifier is confident.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{CalibratedPredictor, Method, Quantile};
use crate::data::{ScoreRecord, ScoreTable};
use crate::scoring::{record_uniform, RankedProbs, ScoreMethod};

/// Slack when comparing cumulative mass against `1 - alpha` in the naive rule.
const NAIVE_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("record {id:?} has {found} scores, predictor expects K = {expected}")]
    WidthMismatch { id: String, found: usize, expected: usize },

    #[error("predictor for {0} has no fitted quantile")]
    Unfitted(Method),
}

/// What to do with a record whose group had no calibration data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnseenGroupPolicy {
    #[default]
    FallbackAggregate,
    FullSet,
}

impl std::str::FromStr for UnseenGroupPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fallback-aggregate" => Ok(Self::FallbackAggregate),
            "full-set" => Ok(Self::FullSet),
            other => Err(format!(
                "unknown unseen-group policy {other:?}; expected fallback-aggregate or full-set"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet {
    /// Included classes, highest ranked first. Empty only for randomized scores.
    pub classes: Vec<usize>,
    pub size: usize,
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_used: Option<String>,
}

impl PredictionSet {
    fn new(classes: Vec<usize>, method: Method) -> Self {
        Self {
            size: classes.len(),
            classes,
            method,
            group_used: None,
        }
    }

    pub fn contains(&self, class: usize) -> bool {
        self.classes.contains(&class)
    }
}

/// Length of the rank prefix admitted by threshold `q`.
fn prefix_len(probs: &[f64], ranked: &RankedProbs, q: f64, method: &ScoreMethod, u: Option<f64>) -> usize {
    if q.is_infinite() {
        return probs.len();
    }
    let mut size = 0;
    for (pos, &class) in ranked.order.iter().enumerate() {
        let penalty = method.penalty(pos + 1);
        let included = match u {
            None => ranked.mass_above(pos) + penalty < q || ranked.mass_through(pos) + penalty <= q,
            Some(u) => ranked.mass_above(pos) + u * probs[class] + penalty <= q,
        };
        if !included {
            break;
        }
        size += 1;
    }
    if u.is_some() {
        size
    } else {
        size.max(1)
    }
}

fn build(probs: &[f64], q: f64, method: &ScoreMethod, u: Option<f64>, tag: Method) -> PredictionSet {
    let ranked = RankedProbs::new(probs);
    let size = prefix_len(probs, &ranked, q, method, u);
    PredictionSet::new(ranked.order[..size].to_vec(), tag)
}

/// APS construction: admit rank `j` while the mass ranked above it is below `q`.
pub fn build_set_cumulative(probs: &[f64], q: f64) -> PredictionSet {
    build(probs, q, &ScoreMethod::aps(), None, Method::Aps)
}

/// RAPS construction: the rank penalty is added to the prefix mass before comparing with `q`.
pub fn build_set_raps(probs: &[f64], q: f64, method: &ScoreMethod) -> PredictionSet {
    build(probs, q, method, None, Method::Raps)
}

/// Non-conformal baseline: shortest rank prefix with mass at least `1 - alpha`.
pub fn build_set_naive(probs: &[f64], alpha: f64) -> PredictionSet {
    let ranked = RankedProbs::new(probs);
    let target = 1.0 - alpha - NAIVE_TOL;
    let size = (1..=probs.len())
        .find(|&j| ranked.prefix[j] >= target)
        .unwrap_or(probs.len());
    PredictionSet::new(ranked.order[..size].to_vec(), Method::Naive)
}

/// A set together with any policy event that shaped it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub set: PredictionSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unseen_group_policy: Option<UnseenGroupPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Builds the prediction set for one probability-scale record.
pub fn predict(
    predictor: &CalibratedPredictor,
    record: &ScoreRecord,
    policy: UnseenGroupPolicy,
) -> Result<Prediction, PredictError> {
    if record.probs.len() != predictor.k {
        return Err(PredictError::WidthMismatch {
            id: record.id.clone(),
            found: record.probs.len(),
            expected: predictor.k,
        });
    }
    let method = predictor.method;
    let score_method = &predictor.score_method;
    let u = score_method
        .randomization_seed
        .map(|seed| record_uniform(seed, &record.id));
    let mut prediction = Prediction {
        set: PredictionSet::new(Vec::new(), method),
        unseen_group_policy: None,
        warning: None,
    };
    let quantile = match method {
        Method::Naive => {
            prediction.set = build_set_naive(&record.probs, predictor.alpha);
            return Ok(prediction);
        }
        Method::Aps | Method::Raps => predictor.quantile.ok_or(PredictError::Unfitted(method))?,
        Method::Gaps | Method::Graps => {
            let groups = predictor
                .group_quantiles
                .as_ref()
                .ok_or(PredictError::Unfitted(method))?;
            match groups.get(&record.group) {
                Some(&q) => q,
                None => {
                    prediction.unseen_group_policy = Some(policy);
                    prediction.warning = Some(format!(
                        "group {:?} of record {:?} was not seen at calibration; applied {policy:?}",
                        record.group, record.id
                    ));
                    match policy {
                        UnseenGroupPolicy::FallbackAggregate => {
                            predictor.fallback_quantile.ok_or(PredictError::Unfitted(method))?
                        }
                        UnseenGroupPolicy::FullSet => Quantile::INFINITE,
                    }
                }
            }
        }
    };
    let mut set = build(&record.probs, quantile.value(), score_method, u, method);
    if method.is_group() {
        set.group_used = Some(record.group.clone());
    }
    prediction.set = set;
    Ok(prediction)
}

/// Predicts every record of a probability-scale table, in table order.
pub fn predict_table(
    predictor: &CalibratedPredictor,
    table: &ScoreTable,
    policy: UnseenGroupPolicy,
) -> Result<Vec<Prediction>, PredictError> {
    table
        .records()
        .iter()
        .map(|r| predict(predictor, r, policy))
        .collect()
}
