//! Probability distributions over levels `1, 2, ...` with an explicit head
//! and an optional geometric tail.
//!
//! The first `m` probabilities are stored directly; beyond the head the mass
//! decays geometrically, `p_{m+k} = P_tail (1 - 2^{-gamma}) 2^{-gamma (k-1)}`.
//! This form keeps the probability mass function, tail probabilities and the
//! inverse CDF available in closed form, with no series truncation anywhere.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for "probabilities sum to one" checks.
pub const NORMALIZATION_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum DistError {
    #[error("head entry {index} must be finite and non-negative, got {value}")]
    BadEntry { index: usize, value: f64 },
    #[error("head probabilities sum to {sum} > 1")]
    MassExceedsOne { sum: f64 },
    #[error("tail rate gamma must be positive and finite, got {0}")]
    BadGamma(f64),
    #[error("head entry {index} is zero while the tail mass {tail_mass} is positive")]
    ZeroHeadWithTail { index: usize, tail_mass: f64 },
    #[error("distribution has no mass")]
    Empty,
    #[error("head + tail mass = {total} is not within {NORMALIZATION_TOL} of 1")]
    NotNormalized { total: f64 },
}

/// Serialized form: a plain record `{head, gamma, tail_mass}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct DistRecord {
    head: Vec<f64>,
    gamma: f64,
    tail_mass: f64,
}

/// Probability distribution over levels in head + geometric-tail form.
///
/// Immutable after construction; shared reads are safe across threads.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "DistRecord", into = "DistRecord")]
pub struct LevelDistribution {
    head: Vec<f64>,
    /// Cumulative sums of `head`, so CDF queries agree bit-for-bit between
    /// `inverse_cdf` and the stratified sweep.
    head_cdf: Vec<f64>,
    gamma: f64,
    tail_mass: f64,
}

impl PartialEq for LevelDistribution {
    fn eq(&self, other: &Self) -> bool {
        self.head == other.head && self.gamma == other.gamma && self.tail_mass == other.tail_mass
    }
}

impl LevelDistribution {
    /// Builds a distribution whose head is `head` (levels `1..=m`) and whose
    /// remaining mass `1 - sum(head)` decays geometrically at rate `gamma`.
    ///
    /// Rejects negative entries, head mass above `1 + 1e-12`, non-positive
    /// `gamma`, and zero head entries whenever the tail mass is positive.
    pub fn with_geometric_tail(head: &[f64], gamma: f64) -> Result<Self, DistError> {
        if gamma <= 0.0 || !gamma.is_finite() {
            return Err(DistError::BadGamma(gamma));
        }
        for (index, &value) in head.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(DistError::BadEntry { index, value });
            }
        }
        let sum: f64 = head.iter().sum();
        if sum > 1.0 + NORMALIZATION_TOL {
            return Err(DistError::MassExceedsOne { sum });
        }
        let mut head = head.to_vec();
        let tail_mass = if sum >= 1.0 {
            // Mass within tolerance of 1: renormalize, finite support.
            for p in &mut head {
                *p /= sum;
            }
            0.0
        } else {
            1.0 - sum
        };
        if tail_mass > 0.0 {
            if let Some(index) = head.iter().position(|&p| p == 0.0) {
                return Err(DistError::ZeroHeadWithTail { index, tail_mass });
            }
        } else {
            while head.last() == Some(&0.0) {
                head.pop();
            }
        }
        if head.is_empty() && tail_mass == 0.0 {
            return Err(DistError::Empty);
        }
        Ok(Self::assemble(head, gamma, tail_mass))
    }

    /// Finite-support distribution from explicit probabilities.
    pub fn finite(head: &[f64]) -> Result<Self, DistError> {
        let sum: f64 = head.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(DistError::NotNormalized { total: sum });
        }
        Self::with_geometric_tail(head, 1.5)
    }

    /// Assembles a distribution from already-normalized parts.
    ///
    /// Unlike [`with_geometric_tail`](Self::with_geometric_tail) this accepts
    /// zero head entries alongside a positive tail, which arises naturally for
    /// residual distributions and for tail-probability-tuned sum estimators.
    pub fn from_parts(head: Vec<f64>, gamma: f64, tail_mass: f64) -> Result<Self, DistError> {
        if gamma <= 0.0 || !gamma.is_finite() {
            return Err(DistError::BadGamma(gamma));
        }
        for (index, &value) in head.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(DistError::BadEntry { index, value });
            }
        }
        if !(0.0..=1.0).contains(&tail_mass) {
            return Err(DistError::NotNormalized { total: tail_mass });
        }
        let total = head.iter().sum::<f64>() + tail_mass;
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(DistError::NotNormalized { total });
        }
        let mut head = head;
        if tail_mass == 0.0 {
            while head.last() == Some(&0.0) {
                head.pop();
            }
            if head.is_empty() {
                return Err(DistError::Empty);
            }
        }
        Ok(Self::assemble(head, gamma, tail_mass))
    }

    fn assemble(head: Vec<f64>, gamma: f64, tail_mass: f64) -> Self {
        let mut head_cdf = Vec::with_capacity(head.len());
        let mut acc = 0.0;
        for &p in &head {
            acc += p;
            head_cdf.push(acc);
        }
        Self {
            head,
            head_cdf,
            gamma,
            tail_mass,
        }
    }

    pub fn head(&self) -> &[f64] {
        &self.head
    }

    pub fn head_len(&self) -> usize {
        self.head.len()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn tail_mass(&self) -> f64 {
        self.tail_mass
    }

    pub fn is_finite_support(&self) -> bool {
        self.tail_mass == 0.0
    }

    /// Largest supported level for finite distributions, `None` otherwise.
    pub fn max_level(&self) -> Option<u32> {
        self.is_finite_support().then_some(self.head.len() as u32)
    }

    /// Probability mass at level `i >= 1`; zero beyond finite support.
    ///
    /// Panics if `i == 0`.
    pub fn pmf(&self, i: u32) -> f64 {
        assert!(i >= 1, "levels are indexed from 1");
        let m = self.head.len() as u32;
        if i <= m {
            self.head[(i - 1) as usize]
        } else if self.tail_mass == 0.0 {
            0.0
        } else {
            let g = self.gamma;
            self.tail_mass * (1.0 - 0.5f64.powf(g)) * 0.5f64.powf(g * f64::from(i - m - 1))
        }
    }

    /// Tail probability `sum_{j >= i} p_j`, in closed form.
    ///
    /// Panics if `i == 0`.
    pub fn tail_prob(&self, i: u32) -> f64 {
        assert!(i >= 1, "levels are indexed from 1");
        let m = self.head.len() as u32;
        if i == 1 {
            1.0
        } else if i <= m {
            1.0 - self.head_cdf[(i - 2) as usize]
        } else if self.tail_mass == 0.0 {
            0.0
        } else {
            self.tail_mass * 0.5f64.powf(self.gamma * f64::from(i - m - 1))
        }
    }

    /// CDF `F(k) = sum_{j <= k} p_j`, with `F(0) = 0`.
    pub fn cdf(&self, k: u32) -> f64 {
        if k == 0 {
            return 0.0;
        }
        let m = self.head.len() as u32;
        if k <= m {
            self.head_cdf[(k - 1) as usize]
        } else {
            1.0 - self.tail_prob(k + 1)
        }
    }

    /// Generalized inverse CDF `min{k : F(k) >= u}` for `u` in `(0, 1)`.
    ///
    /// Head levels are resolved by binary search on the stored cumulative
    /// sums; tail levels analytically by a base-2 logarithm followed by a
    /// local scan that guards against rounding of the logarithm.
    ///
    /// Panics if `u` is outside the open interval `(0, 1)`.
    pub fn inverse_cdf(&self, u: f64) -> u32 {
        assert!(u > 0.0 && u < 1.0, "u must lie in (0, 1), got {u}");
        let m = self.head.len() as u32;
        if m > 0 && u <= self.head_cdf[(m - 1) as usize] {
            let idx = self.head_cdf.partition_point(|&c| c < u);
            return idx as u32 + 1;
        }
        if self.tail_mass == 0.0 {
            // u exceeded the head CDF only through rounding; F(m) = 1 >= u.
            return m.max(1);
        }
        let steps = ((self.tail_mass / (1.0 - u)).log2() / self.gamma).ceil();
        let k0 = if steps.is_finite() && steps > 0.0 {
            m.saturating_add(steps as u32).max(m + 1)
        } else {
            m + 1
        };
        let mut k = k0.max(m + 1);
        while k > m + 1 && self.cdf(k - 1) >= u {
            k -= 1;
        }
        while self.cdf(k) < u {
            k += 1;
        }
        k
    }

    /// Distribution of `level - m` conditional on `level > m`. Exact for the
    /// geometric tail: the conditional law is again of head + tail form with
    /// the same rate.
    pub fn conditional_beyond(&self, m: u32) -> Result<Self, DistError> {
        let scale = self.tail_prob(m + 1);
        if scale <= 0.0 {
            return Err(DistError::Empty);
        }
        let head_len = self.head.len() as u32;
        let mut head = Vec::new();
        for k in 1..=head_len.saturating_sub(m) {
            head.push(self.pmf(m + k) / scale);
        }
        let tail_mass = self.tail_prob(head_len.max(m) + 1) / scale;
        let total = head.iter().sum::<f64>() + tail_mass;
        for p in &mut head {
            *p /= total;
        }
        Self::from_parts(head, self.gamma, tail_mass / total)
    }
}

impl TryFrom<DistRecord> for LevelDistribution {
    type Error = DistError;

    fn try_from(record: DistRecord) -> Result<Self, Self::Error> {
        LevelDistribution::from_parts(record.head, record.gamma, record.tail_mass)
    }
}

impl From<LevelDistribution> for DistRecord {
    fn from(dist: LevelDistribution) -> Self {
        DistRecord {
            head: dist.head,
            gamma: dist.gamma,
            tail_mass: dist.tail_mass,
        }
    }
}
