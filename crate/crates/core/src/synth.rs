//! Seeded synthetic score tables with controllable group shift, and
//! brute-force oracles for checking the conformal machinery.
//!
//! Each record draws a label `y` from its group's class prevalence `pi`, then
//! a Gaussian evidence vector `e_j = d * [j == y] + N(0, 1)` where `d` is the
//! group's `difficulty` (a sharpness: larger is easier). The logits
//! `d * e_j + ln pi_j` are the exact posterior log-odds of `y` given `e`, so
//! their softmax is perfectly calibrated. The reported logits are those
//! calibrated logits multiplied by the group's `miscalibration` factor `tau`;
//! `tau > 1` makes the classifier overconfident and temperature scaling
//! recovers `beta = tau`.
//!
//! Monte-Carlo samples add independent `N(0, mc_noise^2)` jitter to the
//! reported logits.

use std::collections::{BTreeMap, BTreeSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::CalibratedPredictor;
use crate::data::{softmax, DataError, ScoreRecord, ScoreScale, ScoreTable, SIMPLEX_TOL};
use crate::prediction::{predict, PredictError, UnseenGroupPolicy};

/// Fitzpatrick-type category shares: non-neoplastic, benign, malignant.
pub const FITZPATRICK_PREVALENCE: [(&str, [f64; 3]); 7] = [
    ("1", [0.696, 0.150, 0.154]),
    ("2", [0.705, 0.140, 0.155]),
    ("3", [0.718, 0.144, 0.138]),
    ("4", [0.759, 0.132, 0.108]),
    ("5", [0.800, 0.104, 0.096]),
    ("6", [0.834, 0.070, 0.096]),
    ("missing", [0.689, 0.130, 0.181]),
];
pub const FITZPATRICK_CLASSES: [&str; 3] = ["non-neoplastic", "benign", "malignant"];
/// Index of the malignant category.
pub const FITZPATRICK_CRITICAL: usize = 2;

/// Floor applied to prevalences before taking logs, so zero-prevalence classes stay finite.
const MIN_PREVALENCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Predict(#[from] PredictError),
}

fn default_mc_noise() -> f64 {
    0.5
}

fn default_miscalibration() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub name: String,
    pub n_records: usize,
    /// Length-`k` simplex.
    pub class_prevalence: Vec<f64>,
    /// Sharpness of the evidence; larger means easier.
    pub difficulty: f64,
    /// Logit multiplier; 1 is calibrated, above 1 overconfident.
    #[serde(default = "default_miscalibration")]
    pub miscalibration: f64,
}

impl GroupSpec {
    pub fn uniform(name: impl Into<String>, n_records: usize, k: usize, difficulty: f64) -> Self {
        Self {
            name: name.into(),
            n_records,
            class_prevalence: vec![1.0 / k as f64; k],
            difficulty,
            miscalibration: 1.0,
        }
    }

    #[must_use]
    pub fn with_miscalibration(mut self, tau: f64) -> Self {
        self.miscalibration = tau;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub k: usize,
    pub groups: Vec<GroupSpec>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_samples: Option<usize>,
    /// Standard deviation of the logit jitter in Monte-Carlo samples.
    #[serde(default = "default_mc_noise")]
    pub mc_noise: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub critical_classes: BTreeSet<usize>,
}

impl SynthConfig {
    pub fn new(k: usize, groups: Vec<GroupSpec>, seed: u64) -> Self {
        Self {
            k,
            groups,
            seed,
            t_samples: None,
            mc_noise: default_mc_noise(),
            class_names: None,
            critical_classes: BTreeSet::new(),
        }
    }

    #[must_use]
    pub fn with_mc_samples(mut self, t: usize) -> Self {
        self.t_samples = Some(t);
        self
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::Config(msg));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.groups.is_empty() {
            return bad("at least one group is required".into());
        }
        let mut names = BTreeSet::new();
        for g in &self.groups {
            if !names.insert(g.name.as_str()) {
                return bad(format!("duplicate group name {:?}", g.name));
            }
            if g.n_records == 0 {
                return bad(format!("group {:?} needs n_records >= 1", g.name));
            }
            if g.class_prevalence.len() != self.k {
                return bad(format!(
                    "group {:?} prevalence has {} entries, expected k = {}",
                    g.name,
                    g.class_prevalence.len(),
                    self.k
                ));
            }
            let sum: f64 = g.class_prevalence.iter().sum();
            if g.class_prevalence.iter().any(|p| p.is_nan() || *p < 0.0) || (sum - 1.0).abs() > SIMPLEX_TOL {
                return bad(format!("group {:?} prevalence is not on the simplex (sum {sum})", g.name));
            }
            if !(g.difficulty > 0.0 && g.difficulty.is_finite()) {
                return bad(format!("group {:?} difficulty must be positive", g.name));
            }
            if !(g.miscalibration > 0.0 && g.miscalibration.is_finite()) {
                return bad(format!("group {:?} miscalibration must be positive", g.name));
            }
        }
        if self.t_samples == Some(0) {
            return bad("t_samples must be at least 1 when set".into());
        }
        if !(self.mc_noise >= 0.0 && self.mc_noise.is_finite()) {
            return bad("mc_noise must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// Seven Fitzpatrick groups over three categories with malignant as critical.
///
/// Skin type 6 holds 4% of `n_total`; the other groups share the rest equally.
/// Type 6 and the missing group get a lower difficulty.
pub fn fitzpatrick_preset(n_total: usize, seed: u64) -> SynthConfig {
    let small = (n_total as f64 * 0.04).round().max(1.0) as usize;
    let rest = n_total.saturating_sub(small) / 6;
    let groups = FITZPATRICK_PREVALENCE
        .iter()
        .map(|(name, p)| {
            let sum: f64 = p.iter().sum();
            let (n_records, difficulty) = match *name {
                "6" => (small, 1.0),
                "missing" => (rest.max(1), 1.0),
                _ => (rest.max(1), 1.5),
            };
            GroupSpec {
                name: name.to_string(),
                n_records,
                class_prevalence: p.iter().map(|v| v / sum).collect(),
                difficulty,
                miscalibration: 1.0,
            }
        })
        .collect();
    SynthConfig {
        class_names: Some(FITZPATRICK_CLASSES.iter().map(|s| s.to_string()).collect()),
        critical_classes: [FITZPATRICK_CRITICAL].into(),
        ..SynthConfig::new(3, groups, seed)
    }
}

/// Three equally sized groups, `easy`, `medium` and `hard`, over `k` uniform classes.
///
/// The hard group has weak evidence and an overconfident classifier, so
/// aggregate calibration undercovers it.
pub fn group_shift_preset(n_per_group: usize, k: usize, seed: u64) -> SynthConfig {
    let groups = vec![
        GroupSpec::uniform("easy", n_per_group, k, 3.0),
        GroupSpec::uniform("medium", n_per_group, k, 2.0),
        GroupSpec::uniform("hard", n_per_group, k, 1.0).with_miscalibration(2.0),
    ];
    SynthConfig::new(k, groups, seed)
}

struct RawRecord {
    id: String,
    group: String,
    label: usize,
    logits: Vec<f64>,
    mc: Option<Vec<Vec<f64>>>,
}

fn draw(config: &SynthConfig) -> Result<Vec<RawRecord>, SynthError> {
    config.validate()?;
    let k = config.k;
    let mut out = Vec::with_capacity(config.groups.iter().map(|g| g.n_records).sum());
    for (gi, g) in config.groups.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(gi as u64);
        let labels = WeightedIndex::new(&g.class_prevalence)
            .map_err(|e| SynthError::Config(format!("group {:?}: {e}", g.name)))?;
        let log_prior: Vec<f64> = g.class_prevalence.iter().map(|p| p.max(MIN_PREVALENCE).ln()).collect();
        for i in 0..g.n_records {
            let y = labels.sample(&mut rng);
            let logits: Vec<f64> = (0..k)
                .map(|j| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    let evidence = if j == y { g.difficulty } else { 0.0 } + noise;
                    g.miscalibration * (g.difficulty * evidence + log_prior[j])
                })
                .collect();
            let mc = config.t_samples.map(|t| {
                (0..t)
                    .map(|_| {
                        logits
                            .iter()
                            .map(|z| {
                                let jitter: f64 = StandardNormal.sample(&mut rng);
                                z + config.mc_noise * jitter
                            })
                            .collect()
                    })
                    .collect()
            });
            out.push(RawRecord {
                id: format!("{}-{i}", g.name),
                group: g.name.clone(),
                label: y,
                logits,
                mc,
            });
        }
    }
    Ok(out)
}

fn build(config: &SynthConfig, records: Vec<ScoreRecord>, scale: ScoreScale) -> Result<ScoreTable, SynthError> {
    let mut table = ScoreTable::new(records, config.k, scale)?;
    if let Some(names) = &config.class_names {
        table = table.with_class_names(names.clone())?;
    }
    Ok(table.with_critical_classes(config.critical_classes.iter().copied())?)
}

/// Generates a probability-scale table; records are ordered by group, then index.
pub fn generate(config: &SynthConfig) -> Result<ScoreTable, SynthError> {
    let records = draw(config)?
        .into_iter()
        .map(|r| {
            let rec = ScoreRecord::new(r.id, r.group, r.label, softmax(&r.logits));
            match r.mc {
                Some(mc) => rec.with_mc_samples(mc.iter().map(|z| softmax(z)).collect()),
                None => rec,
            }
        })
        .collect();
    build(config, records, ScoreScale::Probability)
}

/// Same draw as [`generate`], reported as logits.
pub fn generate_logits(config: &SynthConfig) -> Result<ScoreTable, SynthError> {
    let records = draw(config)?
        .into_iter()
        .map(|r| {
            let rec = ScoreRecord::new(r.id, r.group, r.label, r.logits);
            match r.mc {
                Some(mc) => rec.with_mc_samples(mc),
                None => rec,
            }
        })
        .collect();
    build(config, records, ScoreScale::Logit)
}

/// Per-group fraction of test records whose prediction set contains the label.
///
/// Counts membership directly, without the metrics module.
pub fn coverage_oracle(
    predictor: &CalibratedPredictor,
    test: &ScoreTable,
) -> Result<BTreeMap<String, f64>, SynthError> {
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in test.records() {
        let set = predict(predictor, r, UnseenGroupPolicy::FallbackAggregate)?.set;
        let entry = counts.entry(r.group.clone()).or_default();
        entry.1 += 1;
        if set.classes.contains(&r.label) {
            entry.0 += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|(g, (hit, n))| (g, hit as f64 / n as f64))
        .collect())
}

/// Smallest sorted score `s_(i)` with `i / m >= level`; `+inf` when `level > 1`.
///
/// # Panics
/// On an empty score list.
pub fn order_statistic_oracle(scores: &[f64], level: f64) -> f64 {
    assert!(!scores.is_empty(), "order statistic of an empty list");
    if level > 1.0 {
        return f64::INFINITY;
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("comparable scores"));
    let m = sorted.len();
    for i in 1..=m {
        if i as f64 / m as f64 >= level {
            return sorted[i - 1];
        }
    }
    sorted[m - 1]
}
