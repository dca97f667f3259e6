//! Closed-form oracle chains and brute-force enumeration.
//!
//! An [`AnalyticChain`] has Gaussian level differences with known means and
//! standard deviations, so every estimator's mean and variance is available
//! in closed form. [`brute_force_scheme_variance`] complements the formulas
//! by enumerating all randomization outcomes exactly on small instances.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::dist::LevelDistribution;
use crate::level_diff::{Coupling, DeltaSample, DeltaSampler, SampleFault};
use crate::scheme::RandScheme;

/// Hard cap on analytic-chain support.
pub const MAX_CHAIN_LEVELS: usize = 32;

#[derive(Debug, Error, PartialEq)]
pub enum AnalyticError {
    #[error("level {level} has zero probability within the chain support")]
    ZeroProbabilityInSupport { level: u32 },
    #[error("the coupled-sum closed form needs a partial-sum chain")]
    CoupledNeedsPartialSum,
    #[error("brute force supports at most {max} levels / draws, got {got}")]
    InstanceTooLarge { max: usize, got: usize },
}

/// How the chain's level differences relate to the target `Y`.
///
/// Both modes share the sampling law (`Delta_i = a_i + b_i xi_i` with
/// independent standard normals); `PartialSum` additionally identifies
/// `Y_i = Delta_1 + ... + Delta_i` pathwise, which the coupled-sum second
/// moment formula requires.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainMode {
    IndependentIncrements,
    PartialSum,
}

/// Finite chain of Gaussian level differences with known moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticChain {
    means: Vec<f64>,
    sds: Vec<f64>,
    mode: ChainMode,
}

impl AnalyticChain {
    pub fn new(means: Vec<f64>, sds: Vec<f64>, mode: ChainMode) -> Self {
        assert_eq!(means.len(), sds.len());
        assert!(!means.is_empty() && means.len() <= MAX_CHAIN_LEVELS);
        assert!(sds.iter().all(|&b| b >= 0.0 && b.is_finite()));
        assert!(means.iter().all(|&a| a.is_finite()));
        Self { means, sds, mode }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn mode(&self) -> ChainMode {
        self.mode
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn sds(&self) -> &[f64] {
        &self.sds
    }

    pub fn mean(&self, level: u32) -> f64 {
        self.means.get((level - 1) as usize).copied().unwrap_or(0.0)
    }

    pub fn sd(&self, level: u32) -> f64 {
        self.sds.get((level - 1) as usize).copied().unwrap_or(0.0)
    }

    /// `E Y_k = a_1 + ... + a_k`.
    pub fn partial_mean(&self, k: u32) -> f64 {
        self.means.iter().take(k as usize).sum()
    }

    /// `E (Y - Y_k)^2` under the partial-sum identification.
    fn mean_square_to_target(&self, k: u32) -> f64 {
        let from = (k as usize).min(self.len());
        let mean: f64 = self.means[from..].iter().sum();
        let var: f64 = self.sds[from..].iter().map(|b| b * b).sum();
        mean * mean + var
    }
}

impl DeltaSampler for AnalyticChain {
    fn sample_delta(&self, level: u32, rng: &mut dyn RngCore) -> Result<DeltaSample, SampleFault> {
        assert!(level >= 1);
        let value = if (level as usize) <= self.len() {
            self.mean(level) + self.sd(level) * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        Ok(DeltaSample {
            level,
            value,
            cost: 1.0,
        })
    }

    fn sample_path_deltas(
        &self,
        max_level: u32,
        _coupling: Coupling,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<DeltaSample>, SampleFault> {
        (1..=max_level).map(|i| self.sample_delta(i, rng)).collect()
    }
}

/// Deterministic chain `Delta_i = 2^{-i}` on unbounded levels, unit cost.
/// Its target expectation is exactly 1.
#[derive(Debug, Clone, Copy, Default)]
pub struct DyadicChain;

impl DyadicChain {
    pub const TARGET: f64 = 1.0;
}

impl DeltaSampler for DyadicChain {
    fn sample_delta(&self, level: u32, _rng: &mut dyn RngCore) -> Result<DeltaSample, SampleFault> {
        assert!(level >= 1);
        Ok(DeltaSample {
            level,
            value: 0.5f64.powi(level as i32),
            cost: 1.0,
        })
    }

    fn sample_path_deltas(
        &self,
        max_level: u32,
        _coupling: Coupling,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<DeltaSample>, SampleFault> {
        (1..=max_level).map(|i| self.sample_delta(i, rng)).collect()
    }
}

/// Exact mean `E Y` of the chain target.
pub fn exact_mean(chain: &AnalyticChain) -> f64 {
    chain.means.iter().sum()
}

/// First two moments of an estimator in closed form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub second_moment: f64,
    pub variance: f64,
}

/// Restricts `dist` to the chain support `1..=m` and renormalizes.
pub(crate) fn restricted_probs(
    dist: &LevelDistribution,
    m: usize,
) -> Result<Vec<f64>, AnalyticError> {
    let total = dist.cdf(m as u32);
    let mut probs = Vec::with_capacity(m);
    for i in 1..=m as u32 {
        let p = dist.pmf(i) / total;
        if p <= 0.0 {
            return Err(AnalyticError::ZeroProbabilityInSupport { level: i });
        }
        probs.push(p);
    }
    Ok(probs)
}

fn suffix_sums(probs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; probs.len()];
    let mut acc = 0.0;
    for i in (0..probs.len()).rev() {
        acc += probs[i];
        out[i] = acc;
    }
    out
}

/// Moments of the single-term estimator `Delta_R / p_R`:
/// `E Z = E Y` and `E Z^2 = sum_i E Delta_i^2 / p_i`.
pub fn exact_single_term_moments(
    chain: &AnalyticChain,
    dist: &LevelDistribution,
) -> Result<Moments, AnalyticError> {
    let probs = restricted_probs(dist, chain.len())?;
    let mean = exact_mean(chain);
    let second_moment: f64 = probs
        .iter()
        .enumerate()
        .map(|(idx, &p)| {
            let a = chain.means[idx];
            let b = chain.sds[idx];
            (a * a + b * b) / p
        })
        .sum();
    Ok(Moments {
        mean,
        second_moment,
        variance: second_moment - mean * mean,
    })
}

/// Which second-moment formula applies to the sum estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SumCase {
    Coupled,
    Independent,
}

/// Moments of the sum estimator `sum_{i <= R} Delta_i / ptilde_i`.
pub fn exact_sum_moments(
    chain: &AnalyticChain,
    dist: &LevelDistribution,
    case: SumCase,
) -> Result<Moments, AnalyticError> {
    if case == SumCase::Coupled && chain.mode() != ChainMode::PartialSum {
        return Err(AnalyticError::CoupledNeedsPartialSum);
    }
    let probs = restricted_probs(dist, chain.len())?;
    let tails = suffix_sums(&probs);
    let mean = exact_mean(chain);
    let second_moment: f64 = match case {
        SumCase::Coupled => (0..chain.len())
            .map(|idx| {
                let before = chain.mean_square_to_target(idx as u32);
                let after = chain.mean_square_to_target(idx as u32 + 1);
                (before - after) / tails[idx]
            })
            .sum(),
        SumCase::Independent => (0..chain.len())
            .map(|idx| {
                let b = chain.sds[idx];
                let gap_before = mean - chain.partial_mean(idx as u32);
                let gap_after = mean - chain.partial_mean(idx as u32 + 1);
                (b * b + gap_before * gap_before - gap_after * gap_after) / tails[idx]
            })
            .sum(),
    };
    Ok(Moments {
        mean,
        second_moment,
        variance: second_moment - mean * mean,
    })
}

/// Estimator family for the limiting variance `lim n var(Z^{(n)})`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaFamily {
    SingleTerm,
    CoupledSum,
    IndependentSum,
}

/// Asymptotic variance of the stratified/residual estimators:
/// `sum var(Delta_i) / p_i` for the single-term family and
/// `sum var(Delta_i) / ptilde_i` for the sum families.
pub fn exact_sigma_infty(
    chain: &AnalyticChain,
    dist: &LevelDistribution,
    family: SigmaFamily,
) -> Result<f64, AnalyticError> {
    if family == SigmaFamily::CoupledSum && chain.mode() != ChainMode::PartialSum {
        return Err(AnalyticError::CoupledNeedsPartialSum);
    }
    let probs = restricted_probs(dist, chain.len())?;
    let weights = match family {
        SigmaFamily::SingleTerm => probs,
        SigmaFamily::CoupledSum | SigmaFamily::IndependentSum => suffix_sums(&probs),
    };
    Ok(chain.sds.iter().zip(&weights).map(|(b, w)| b * b / w).sum())
}

/// Exact distribution of the level-count vector `(N_1..N_m)` under `scheme`,
/// as `(counts, probability)` pairs over all outcomes with positive mass.
/// Strata are split at CDF breakpoints, so no discretization error enters.
pub fn allocation_distribution(scheme: RandScheme, probs: &[f64], n: u64) -> Vec<(Vec<u64>, f64)> {
    match scheme {
        RandScheme::Iid => multinomial_outcomes(probs, n),
        RandScheme::Residual => {
            let base: Vec<u64> = probs
                .iter()
                .map(|p| (n as f64 * p).floor() as u64)
                .collect();
            let r = n - base.iter().sum::<u64>();
            if r == 0 {
                return vec![(base, 1.0)];
            }
            let rf = r as f64;
            let star: Vec<f64> = probs
                .iter()
                .zip(&base)
                .map(|(p, &b)| ((n as f64 * p - b as f64) / rf).max(0.0))
                .collect();
            multinomial_outcomes(&star, r)
                .into_iter()
                .map(|(extra, prob)| {
                    let counts = base.iter().zip(&extra).map(|(a, b)| a + b).collect();
                    (counts, prob)
                })
                .collect()
        }
        RandScheme::Stratified => {
            let cdf = prefix_cdf(probs);
            let mut outcomes: Vec<(Vec<u64>, f64)> = vec![(vec![0; probs.len()], 1.0)];
            for j in 0..n {
                let lo = j as f64 / n as f64;
                let hi = (j + 1) as f64 / n as f64;
                let stratum = stratum_level_probs(&cdf, lo, hi);
                let mut next = Vec::new();
                for (counts, prob) in &outcomes {
                    for &(level, q) in &stratum {
                        let mut counts = counts.clone();
                        counts[level] += 1;
                        next.push((counts, prob * q));
                    }
                }
                outcomes = collapse(next);
            }
            outcomes
        }
        RandScheme::Systematic => {
            let cdf = prefix_cdf(probs);
            let width = 1.0 / n as f64;
            let mut cuts = vec![0.0, width];
            for &c in &cdf {
                for j in 0..n {
                    let offset = c - j as f64 / n as f64;
                    if offset > 0.0 && offset < width {
                        cuts.push(offset);
                    }
                }
            }
            cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            cuts.dedup();
            let mut outcomes = Vec::new();
            for window in cuts.windows(2) {
                let (lo, hi) = (window[0], window[1]);
                if hi - lo <= 0.0 {
                    continue;
                }
                let mid = 0.5 * (lo + hi);
                let mut counts = vec![0u64; probs.len()];
                for j in 0..n {
                    let u = j as f64 / n as f64 + mid;
                    let level = cdf.iter().position(|&c| c >= u).unwrap_or(probs.len() - 1);
                    counts[level] += 1;
                }
                outcomes.push((counts, (hi - lo) * n as f64));
            }
            collapse(outcomes)
        }
    }
}

fn prefix_cdf(probs: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    probs
        .iter()
        .map(|p| {
            acc += p;
            acc
        })
        .collect()
}

/// Conditional level probabilities within the stratum `(lo, hi)`.
fn stratum_level_probs(cdf: &[f64], lo: f64, hi: f64) -> Vec<(usize, f64)> {
    let scale = 1.0 / (hi - lo);
    let mut out = Vec::new();
    let mut prev = 0.0f64;
    for (level, &c) in cdf.iter().enumerate() {
        let overlap = (c.min(hi) - prev.max(lo)).max(0.0);
        if overlap > 0.0 {
            out.push((level, overlap * scale));
        }
        prev = c;
    }
    out
}

fn collapse(outcomes: Vec<(Vec<u64>, f64)>) -> Vec<(Vec<u64>, f64)> {
    let mut map: std::collections::BTreeMap<Vec<u64>, f64> = std::collections::BTreeMap::new();
    for (counts, prob) in outcomes {
        *map.entry(counts).or_insert(0.0) += prob;
    }
    map.into_iter().collect()
}

fn multinomial_outcomes(probs: &[f64], n: u64) -> Vec<(Vec<u64>, f64)> {
    fn recurse(
        probs: &[f64],
        level: usize,
        remaining: u64,
        weight: f64,
        current: &mut Vec<u64>,
        out: &mut Vec<(Vec<u64>, f64)>,
    ) {
        if level == probs.len() - 1 {
            let p = probs[level];
            if p == 0.0 && remaining > 0 {
                return;
            }
            let w = weight * p.powi(remaining as i32);
            current.push(remaining);
            out.push((current.clone(), w));
            current.pop();
            return;
        }
        let p = probs[level];
        let mut comb = 1.0;
        for k in 0..=remaining {
            if !(p == 0.0 && k > 0) {
                let w = weight * comb * p.powi(k as i32);
                current.push(k);
                recurse(probs, level + 1, remaining - k, w, current, out);
                current.pop();
            }
            // C(remaining, k+1) = C(remaining, k) * (remaining - k) / (k + 1)
            comb *= (remaining - k) as f64 / (k + 1) as f64;
        }
    }
    let mut out = Vec::new();
    recurse(probs, 0, n, 1.0, &mut Vec::new(), &mut out);
    out.retain(|(_, p)| *p > 0.0);
    out
}

/// Exact single-term estimator variance under `scheme`, by enumerating every
/// allocation outcome and combining with the Gaussian conditional moments.
/// Limited to at most 4 levels and 4 draws.
pub fn brute_force_scheme_variance(
    chain: &AnalyticChain,
    dist: &LevelDistribution,
    n: u64,
    scheme: RandScheme,
) -> Result<f64, AnalyticError> {
    if chain.len() > 4 {
        return Err(AnalyticError::InstanceTooLarge {
            max: 4,
            got: chain.len(),
        });
    }
    if n > 4 {
        return Err(AnalyticError::InstanceTooLarge {
            max: 4,
            got: n as usize,
        });
    }
    let probs = restricted_probs(dist, chain.len())?;
    let outcomes = allocation_distribution(scheme, &probs, n);
    debug_assert!((outcomes.iter().map(|(_, p)| p).sum::<f64>() - 1.0).abs() < 1e-9);

    let weights: Vec<f64> = probs.iter().map(|p| 1.0 / (n as f64 * p)).collect();
    let mut mean = 0.0;
    let mut second = 0.0;
    for (counts, prob) in &outcomes {
        let mut cond_mean = 0.0;
        let mut cond_var = 0.0;
        for (idx, &count) in counts.iter().enumerate() {
            let w = weights[idx];
            cond_mean += w * count as f64 * chain.means[idx];
            cond_var += w * w * count as f64 * chain.sds[idx] * chain.sds[idx];
        }
        mean += prob * cond_mean;
        second += prob * (cond_var + cond_mean * cond_mean);
    }
    Ok(second - mean * mean)
}
