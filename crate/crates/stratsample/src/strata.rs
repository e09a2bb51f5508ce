//! Partition properties, strata, and the joint stratum distribution.
//!
//! A partition property is a True/False statement over the solution space of
//! a user request. A set of at most [`MAX_PROPERTIES`] properties divides the
//! space into `2^m` strata, each identified by one boolean label per
//! property. Marginal probabilities per property are combined under an
//! independence assumption into a joint distribution over strata, which is
//! what the sampler draws from.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound on properties per stratification.
pub const MAX_PROPERTIES: usize = 3;

/// Absolute tolerance for probability-sum checks. All arithmetic here is
/// short products of unit-interval values, so drift stays far below this.
pub const PROB_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum CoreError {
    #[error("empty partition")]
    EmptyPartition,

    #[error("property count out of range: {0} (expected 1..={MAX_PROPERTIES})")]
    PropertyCountOutOfRange(usize),

    #[error("degenerate weights: all weights are zero")]
    DegenerateWeights,

    #[error("negative weight at index {0}")]
    NegativeWeight(usize),

    #[error("probability out of range: {0}")]
    ProbabilityOutOfRange(f64),

    #[error("property statement is empty")]
    EmptyStatement,

    #[error("stratum has {got} labels but the stratification has {expected} properties")]
    StratumLengthMismatch { got: usize, expected: usize },

    #[error("invalid joint distribution: {0}")]
    InvalidJoint(String),
}

/// Where a partition property came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PropertyOrigin {
    AutoStratified,
    UserSupplied,
}

/// A True/False statement over the solution space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionProperty {
    pub id: String,
    pub statement: String,
    pub origin: PropertyOrigin,
}

impl PartitionProperty {
    pub fn new(
        id: impl Into<String>,
        statement: impl Into<String>,
        origin: PropertyOrigin,
    ) -> Result<Self, CoreError> {
        let statement = statement.into();
        if statement.trim().is_empty() {
            return Err(CoreError::EmptyStatement);
        }
        Ok(Self {
            id: id.into(),
            statement,
            origin,
        })
    }
}

/// One cell of the partitioned solution space: a boolean label per property.
///
/// Within a joint distribution over `m` properties, a stratum maps to a dense
/// index where bit `j` carries the label of property `j`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Stratum {
    labels: Vec<bool>,
}

impl Stratum {
    pub fn new(labels: Vec<bool>) -> Self {
        Self { labels }
    }

    /// Decodes a dense index: bit `j` of `index` is the label of property `j`.
    pub fn from_index(index: usize, property_count: usize) -> Self {
        let labels = (0..property_count).map(|j| (index >> j) & 1 == 1).collect();
        Self { labels }
    }

    pub fn index(&self) -> usize {
        self.labels
            .iter()
            .enumerate()
            .fold(0, |acc, (j, &l)| acc | ((l as usize) << j))
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &l in &self.labels {
            write!(f, "{}", if l { 'T' } else { 'F' })?;
        }
        Ok(())
    }
}

/// A property together with the estimated probability that a random valid
/// solution satisfies it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalEstimate {
    property: PartitionProperty,
    p_true: f64,
}

impl MarginalEstimate {
    pub fn new(property: PartitionProperty, p_true: f64) -> Result<Self, CoreError> {
        if !(0.0..=1.0).contains(&p_true) {
            return Err(CoreError::ProbabilityOutOfRange(p_true));
        }
        Ok(Self { property, p_true })
    }

    pub fn property(&self) -> &PartitionProperty {
        &self.property
    }

    pub fn p_true(&self) -> f64 {
        self.p_true
    }
}

/// Probability of each of the `2^m` strata, indexed by [`Stratum::index`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointDistribution {
    property_count: usize,
    probs: Vec<f64>,
}

impl JointDistribution {
    pub fn new(property_count: usize, probs: Vec<f64>) -> Result<Self, CoreError> {
        if probs.len() != 1 << property_count {
            return Err(CoreError::InvalidJoint(format!(
                "expected {} entries for {} properties, got {}",
                1usize << property_count,
                property_count,
                probs.len()
            )));
        }
        for &p in &probs {
            if p.is_nan() || p < 0.0 {
                return Err(CoreError::InvalidJoint(format!(
                    "negative or non-finite entry {p}"
                )));
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(CoreError::InvalidJoint(format!(
                "entries sum to {sum}, expected 1"
            )));
        }
        Ok(Self {
            property_count,
            probs,
        })
    }

    pub fn property_count(&self) -> usize {
        self.property_count
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Probability of a stratum; `None` when the label count does not match.
    pub fn prob(&self, stratum: &Stratum) -> Option<f64> {
        if stratum.len() != self.property_count {
            return None;
        }
        Some(self.probs[stratum.index()])
    }

    pub fn iter(&self) -> impl Iterator<Item = (Stratum, f64)> + '_ {
        self.probs
            .iter()
            .enumerate()
            .map(|(i, &p)| (Stratum::from_index(i, self.property_count), p))
    }

    pub(crate) fn validate(&self) -> Result<(), CoreError> {
        Self::new(self.property_count, self.probs.clone()).map(|_| ())
    }
}

/// Selected properties plus their marginal and joint stratum probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedStratification {
    properties: Vec<PartitionProperty>,
    marginals: Vec<MarginalEstimate>,
    joint: JointDistribution,
}

impl WeightedStratification {
    /// Builds the stratification from marginals; the joint is the product of
    /// independent per-property marginals.
    pub fn new(marginals: Vec<MarginalEstimate>) -> Result<Self, CoreError> {
        let joint = build_joint(&marginals)?;
        let properties = marginals.iter().map(|m| m.property.clone()).collect();
        Ok(Self {
            properties,
            marginals,
            joint,
        })
    }

    pub fn properties(&self) -> &[PartitionProperty] {
        &self.properties
    }

    pub fn marginals(&self) -> &[MarginalEstimate] {
        &self.marginals
    }

    pub fn joint(&self) -> &JointDistribution {
        &self.joint
    }

    /// Re-checks the structural invariants, for values deserialized from a
    /// cache file (possibly hand-edited).
    pub fn validate(&self) -> Result<(), CoreError> {
        let count = self.properties.len();
        if count == 0 || count > MAX_PROPERTIES {
            return Err(CoreError::PropertyCountOutOfRange(count));
        }
        if self.marginals.len() != count {
            return Err(CoreError::InvalidJoint(format!(
                "{} marginals for {} properties",
                self.marginals.len(),
                count
            )));
        }
        for (p, m) in self.properties.iter().zip(&self.marginals) {
            if p != &m.property {
                return Err(CoreError::InvalidJoint(format!(
                    "marginal for {:?} is not aligned with property {:?}",
                    m.property.id, p.id
                )));
            }
            if !(0.0..=1.0).contains(&m.p_true) {
                return Err(CoreError::ProbabilityOutOfRange(m.p_true));
            }
        }
        self.joint.validate()?;
        let expected = build_joint(&self.marginals)?;
        for ((s, got), (_, want)) in self.joint.iter().zip(expected.iter()) {
            if (got - want).abs() > PROB_SUM_TOLERANCE {
                return Err(CoreError::InvalidJoint(format!(
                    "joint entry for {s} is {got}, expected product of marginals {want}"
                )));
            }
        }
        Ok(())
    }
}

/// Count difference between the two labels of a binary partition assignment.
///
/// A balanced partition minimizes this; it is advisory (nothing downstream
/// consumes it), exposed for inspecting candidate partitions.
pub fn imbalance<K: Eq + Hash>(assignment: &HashMap<K, bool>) -> Result<u64, CoreError> {
    if assignment.is_empty() {
        return Err(CoreError::EmptyPartition);
    }
    let trues = assignment.values().filter(|&&l| l).count() as u64;
    let falses = assignment.len() as u64 - trues;
    Ok(trues.abs_diff(falses))
}

/// The joint stratum distribution as the product of independent marginals:
/// entry for label vector `l` is `∏_i (p_i if l_i else 1 − p_i)`.
pub fn build_joint(marginals: &[MarginalEstimate]) -> Result<JointDistribution, CoreError> {
    let m = marginals.len();
    if m == 0 || m > MAX_PROPERTIES {
        return Err(CoreError::PropertyCountOutOfRange(m));
    }
    let mut probs = Vec::with_capacity(1 << m);
    for index in 0..1usize << m {
        let mut p = 1.0;
        for (j, marginal) in marginals.iter().enumerate() {
            p *= if (index >> j) & 1 == 1 {
                marginal.p_true
            } else {
                1.0 - marginal.p_true
            };
        }
        probs.push(p);
    }
    JointDistribution::new(m, probs)
}

/// Rescales nonnegative weights into a probability distribution.
pub fn normalize(weights: &[f64]) -> Result<Vec<f64>, CoreError> {
    for (i, &w) in weights.iter().enumerate() {
        if w.is_nan() || w < 0.0 {
            return Err(CoreError::NegativeWeight(i));
        }
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(CoreError::DegenerateWeights);
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Draws one stratum from the joint distribution. The same seed sequence
/// yields the same draw sequence.
pub fn sample_stratum<R: Rng + ?Sized>(joint: &JointDistribution, rng: &mut R) -> Stratum {
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    for (stratum, p) in joint.iter() {
        cumulative += p;
        if u < cumulative {
            return stratum;
        }
    }
    // Rounding can leave the total marginally below 1; the tail belongs to
    // the last stratum.
    Stratum::from_index(joint.len() - 1, joint.property_count())
}
