//! Conformity scores for classification.
//!
//! Classes are ranked by probability, highest first, with ties broken by
//! ascending class index. The APS score of a class is the probability mass
//! ranked at or above it; RAPS adds `lambda * max(0, rank - k_reg)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_RAPS_LAMBDA: f64 = 0.01;
pub const DEFAULT_RAPS_K_REG: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKind {
    Aps,
    Raps,
}

/// Conformity score parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreMethod {
    pub kind: ScoreKind,
    pub lambda: f64,
    pub k_reg: usize,
    /// Seed for the randomized score variant; `None` keeps scores deterministic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub randomization_seed: Option<u64>,
}

impl ScoreMethod {
    pub fn aps() -> Self {
        Self {
            kind: ScoreKind::Aps,
            lambda: 0.0,
            k_reg: 1,
            randomization_seed: None,
        }
    }

    pub fn raps(lambda: f64, k_reg: usize) -> Self {
        Self {
            kind: ScoreKind::Raps,
            lambda,
            k_reg,
            randomization_seed: None,
        }
    }

    #[must_use]
    pub fn randomized(mut self, seed: u64) -> Self {
        self.randomization_seed = Some(seed);
        self
    }

    /// Checks `lambda >= 0` and `1 <= k_reg <= k`.
    pub fn validate(&self, k: usize) -> Result<(), String> {
        if self.kind == ScoreKind::Aps {
            return Ok(());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(format!("RAPS lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.k_reg < 1 || self.k_reg > k {
            return Err(format!("RAPS k_reg must lie in [1, {k}], got {}", self.k_reg));
        }
        Ok(())
    }

    /// Rank penalty; zero for APS.
    pub fn penalty(&self, rank: usize) -> f64 {
        match self.kind {
            ScoreKind::Aps => 0.0,
            ScoreKind::Raps => self.lambda * rank.saturating_sub(self.k_reg) as f64,
        }
    }
}

impl Default for ScoreMethod {
    fn default() -> Self {
        Self::aps()
    }
}

/// Class indices in descending probability order, ties by ascending index.
pub fn class_order(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// 1-based rank of `label` under [`class_order`].
pub fn rank_of(probs: &[f64], label: usize) -> usize {
    let p = probs[label];
    1 + probs
        .iter()
        .enumerate()
        .filter(|&(j, &q)| q > p || (q == p && j < label))
        .count()
}

/// Probabilities sorted by rank together with their running sums.
#[derive(Debug, Clone)]
pub(crate) struct RankedProbs {
    pub order: Vec<usize>,
    /// `prefix[j]` is the mass of ranks `1..=j`; `prefix[0] = 0`.
    pub prefix: Vec<f64>,
}

impl RankedProbs {
    pub fn new(probs: &[f64]) -> Self {
        let order = class_order(probs);
        let mut prefix = Vec::with_capacity(order.len() + 1);
        let mut acc = 0.0;
        prefix.push(acc);
        for &c in &order {
            acc += probs[c];
            prefix.push(acc);
        }
        Self { order, prefix }
    }

    /// Mass ranked strictly above position `pos` (0-based).
    pub fn mass_above(&self, pos: usize) -> f64 {
        self.prefix[pos]
    }

    /// Mass ranked at or above position `pos`, capped at 1.
    pub fn mass_through(&self, pos: usize) -> f64 {
        self.prefix[pos + 1].min(1.0)
    }

    pub fn position(&self, class: usize) -> usize {
        self.order
            .iter()
            .position(|&c| c == class)
            .expect("class index within K")
    }
}

pub fn aps_score(probs: &[f64], label: usize) -> f64 {
    let ranked = RankedProbs::new(probs);
    ranked.mass_through(ranked.position(label))
}

pub fn raps_score(probs: &[f64], label: usize, method: &ScoreMethod) -> f64 {
    let ranked = RankedProbs::new(probs);
    let pos = ranked.position(label);
    ranked.mass_through(pos) + method.penalty(pos + 1)
}

/// Score for `label`; with `u` the label's own mass is scaled by `u` (randomized variant).
pub fn conformity_score(probs: &[f64], label: usize, method: &ScoreMethod, u: Option<f64>) -> f64 {
    let ranked = RankedProbs::new(probs);
    let pos = ranked.position(label);
    let mass = match u {
        None => ranked.mass_through(pos),
        Some(u) => ranked.mass_above(pos) + u * probs[label],
    };
    mass + method.penalty(pos + 1)
}

/// Deterministic uniform draw in `[0, 1)` tied to a seed and a record id.
pub fn record_uniform(seed: u64, id: &str) -> f64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h).random::<f64>()
}
