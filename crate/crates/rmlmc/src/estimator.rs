//! Estimator drivers: assemble level draws and level differences into one
//! realization of `Z`, plus the exact variance oracle for schemes whose
//! count moments are available in closed form.
//!
//! All drivers weight by exact expected counts (`n p_i`, `n ptilde_i`, ...),
//! never by realized counts; realized-count weighting would bias. Numerical
//! faults from the sampling layer abort the replication and surface as
//! errors instead of being substituted, which would also bias.

use rand::distributions::Open01;
use rand::{Rng, RngCore};
use rand_distr::Poisson;
use thiserror::Error;

use crate::dist::LevelDistribution;
use crate::level_diff::{Coupling, DeltaSampler, SampleFault};
use crate::scheme::{self, LevelAllocation, RandScheme};

#[derive(Debug, Error, PartialEq)]
pub enum EstimatorError {
    #[error(transparent)]
    Fault(#[from] SampleFault),
    #[error("allocation is empty: n = {n} yields no level with at least one sample")]
    EmptyAllocation { n: u64 },
    #[error("hybrid estimator needs positive deterministic counts and at least one tail draw")]
    BadHybridSpec,
    #[error("conditioned-residual estimator needs at least one fixed draw")]
    MissingFixedDraws,
    #[error("count moments are inconsistent: E(N_{level} /\\ N_{level}) != E N_{level}")]
    InconsistentMoments { level: u32 },
    #[error("E(N_{i} /\\ N_{k}) is not available but cov(Delta_{i}, Delta_{k}) != 0")]
    MissingMinMoment { i: u32, k: u32 },
    #[error("moment tables must cover {needed} levels, have {got}")]
    MomentTableTooShort { needed: usize, got: usize },
}

/// One estimator realization with its total cost and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorOutput {
    pub estimate: f64,
    pub cost: f64,
    pub max_level: u32,
    pub n: u64,
}

/// Draws one allocation under the given randomization scheme.
pub fn draw_allocation(
    dist: &LevelDistribution,
    n: u64,
    scheme: RandScheme,
    rng: &mut dyn RngCore,
) -> LevelAllocation {
    match scheme {
        RandScheme::Iid => scheme::draw_iid(dist, n, rng),
        RandScheme::Stratified => scheme::draw_stratified(dist, n, rng),
        RandScheme::Systematic => scheme::draw_systematic(dist, n, rng),
        RandScheme::Residual => scheme::draw_residual(dist, n, rng),
    }
}

/// Single-term estimator: `Z = sum_i (n p_i)^{-1} sum_{j <= N_i} Delta_i^{(j)}`
/// with the allocation drawn under `scheme`.
pub fn single_term(
    dist: &LevelDistribution,
    n: u64,
    randomization: RandScheme,
    sampler: &dyn DeltaSampler,
    rng: &mut dyn RngCore,
) -> Result<EstimatorOutput, EstimatorError> {
    assert!(n >= 1);
    let alloc = draw_allocation(dist, n, randomization, rng);
    let mut estimate = 0.0;
    let mut cost = 0.0;
    let mut max_level = 0;
    for (&level, &count) in &alloc.counts {
        let weight = 1.0 / (n as f64 * dist.pmf(level));
        for _ in 0..count {
            let delta = sampler.sample_delta(level, rng)?;
            estimate += weight * delta.value;
            cost += delta.cost;
        }
        max_level = max_level.max(level);
    }
    Ok(EstimatorOutput {
        estimate,
        cost,
        max_level,
        n,
    })
}

/// Sum estimator: each draw `R^{(j)}` contributes `Delta_1..Delta_{R^{(j)}}`
/// weighted by `(n ptilde_i)^{-1}`. Coupled mode shares one driving path per
/// draw; independent mode refreshes the path per level. Paths are always
/// independent across draws; only the level draws carry the scheme's
/// dependence.
pub fn sum_estimator(
    dist: &LevelDistribution,
    n: u64,
    randomization: RandScheme,
    coupling: Coupling,
    sampler: &dyn DeltaSampler,
    rng: &mut dyn RngCore,
) -> Result<EstimatorOutput, EstimatorError> {
    assert!(n >= 1);
    let alloc = draw_allocation(dist, n, randomization, rng);
    let draws = alloc.draws.as_ref().expect("schemes always record draws");
    let mut estimate = 0.0;
    let mut cost = 0.0;
    let mut max_level = 0;
    for &r in draws {
        for delta in sampler.sample_path_deltas(r, coupling, rng)? {
            estimate += delta.value / (n as f64 * dist.tail_prob(delta.level));
            cost += delta.cost;
        }
        max_level = max_level.max(r);
    }
    Ok(EstimatorOutput {
        estimate,
        cost,
        max_level,
        n,
    })
}

/// Allocation rule of the idealized multilevel baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlmcVariant {
    /// `n_i = floor(n p_i)` samples of `Delta_i` per level.
    Single,
    /// `nhat_i = floor(n ptilde_i)` samples of `Delta_i` per level.
    Sum,
}

/// Deterministic counts for the idealized multilevel estimator; the index of
/// the last positive count is located analytically through the tail formula.
pub fn mlmc_counts(dist: &LevelDistribution, n: u64, variant: MlmcVariant) -> Vec<u64> {
    let nf = n as f64;
    let last = match variant {
        MlmcVariant::Single => crate::scheme::residual_decomposition(dist, n)
            .base_counts
            .len() as u32,
        MlmcVariant::Sum => {
            // ntilde is non-increasing; find the last level with n*ptilde >= 1.
            let mut last = 0u32;
            let mut level = 1u32;
            loop {
                if nf * dist.tail_prob(level) >= 1.0 {
                    last = level;
                    // Jump analytically once inside the geometric tail.
                    if level as usize > dist.head_len() && dist.tail_mass() > 0.0 {
                        let head_len = dist.head_len() as u32;
                        let steps = ((nf * dist.tail_mass()).log2() / dist.gamma()).floor();
                        let mut k = head_len + 1 + steps.max(0.0) as u32;
                        while nf * dist.tail_prob(k) < 1.0 && k > level {
                            k -= 1;
                        }
                        while nf * dist.tail_prob(k + 1) >= 1.0 {
                            k += 1;
                        }
                        last = k.max(last);
                        break;
                    }
                    level += 1;
                } else {
                    break;
                }
            }
            last
        }
    };
    (1..=last)
        .map(|i| {
            let target = match variant {
                MlmcVariant::Single => dist.pmf(i),
                MlmcVariant::Sum => dist.tail_prob(i),
            };
            (nf * target).floor() as u64
        })
        .collect()
}

/// Idealized multilevel estimator with deterministic allocation
/// `Z = sum_i counts_i^{-1} sum_{j <= counts_i} Delta_i^{(j)}`.
///
/// Each `Delta_i` draw is coupled within itself but independent across
/// levels and draws. Biased for `E Y`: its expectation is `E Y_m` at the
/// truncation level.
pub fn mlmc_idealized(
    dist: &LevelDistribution,
    n: u64,
    variant: MlmcVariant,
    sampler: &dyn DeltaSampler,
    rng: &mut dyn RngCore,
) -> Result<EstimatorOutput, EstimatorError> {
    let counts = mlmc_counts(dist, n, variant);
    if counts.iter().all(|&c| c == 0) {
        return Err(EstimatorError::EmptyAllocation { n });
    }
    let mut estimate = 0.0;
    let mut cost = 0.0;
    let mut max_level = 0;
    for (idx, &count) in counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let level = idx as u32 + 1;
        let weight = 1.0 / count as f64;
        for _ in 0..count {
            let delta = sampler.sample_delta(level, rng)?;
            estimate += weight * delta.value;
            cost += delta.cost;
        }
        max_level = level;
    }
    Ok(EstimatorOutput {
        estimate,
        cost,
        max_level,
        n,
    })
}

/// Multilevel head with an unbiased single-term tail.
///
/// `base_counts[i-1]` samples estimate levels `1..=m` deterministically; a
/// further `tail_draws` i.i.d. draws from `tail` estimate the remainder,
/// where index `k` of `tail` stands for the physical level `m + k`. The
/// shifted representation keeps the tail support strictly above `m`.
#[derive(Debug, Clone)]
pub struct HybridSpec {
    pub base_counts: Vec<u64>,
    pub tail: LevelDistribution,
    pub tail_draws: u64,
}

pub fn hybrid(
    spec: &HybridSpec,
    sampler: &dyn DeltaSampler,
    rng: &mut dyn RngCore,
) -> Result<EstimatorOutput, EstimatorError> {
    if spec.base_counts.is_empty() || spec.base_counts.contains(&0) || spec.tail_draws == 0 {
        return Err(EstimatorError::BadHybridSpec);
    }
    let m = spec.base_counts.len() as u32;
    let mut estimate = 0.0;
    let mut cost = 0.0;
    let mut max_level = 0;
    for (idx, &count) in spec.base_counts.iter().enumerate() {
        let level = idx as u32 + 1;
        let weight = 1.0 / count as f64;
        for _ in 0..count {
            let delta = sampler.sample_delta(level, rng)?;
            estimate += weight * delta.value;
            cost += delta.cost;
        }
        max_level = level;
    }
    let r = spec.tail_draws;
    for _ in 0..r {
        let shifted = spec.tail.inverse_cdf(rng.sample(Open01));
        let level = m + shifted;
        let weight = 1.0 / (r as f64 * spec.tail.pmf(shifted));
        let delta = sampler.sample_delta(level, rng)?;
        estimate += weight * delta.value;
        cost += delta.cost;
        max_level = max_level.max(level);
    }
    Ok(EstimatorOutput {
        estimate,
        cost,
        max_level,
        n: spec.base_counts.iter().sum::<u64>() + r,
    })
}

/// Truncation point and discarded mean mass of the Poisson scheme: levels
/// are materialized while `n * tail_prob(level) > 1e-12` and the remaining
/// intensity is resolved by one exact tail draw.
pub fn poisson_truncation(dist: &LevelDistribution, n: u64) -> (u32, f64) {
    let nf = n as f64;
    let mut last = if dist.tail_mass() > 0.0 {
        let m = dist.head_len() as u32;
        // Smallest k with n * tail_prob(k) <= 1e-12, found analytically.
        let steps = ((nf * dist.tail_mass() / 1e-12).log2() / dist.gamma())
            .ceil()
            .max(0.0);
        let mut k = m + 1 + steps as u32;
        while k > 1 && nf * dist.tail_prob(k) <= 1e-12 {
            k -= 1;
        }
        k
    } else {
        dist.head_len() as u32
    };
    while nf * dist.tail_prob(last + 1) > 1e-12 {
        last += 1;
    }
    (last, nf * dist.tail_prob(last + 1))
}

/// Independent Poisson counts `N_i ~ Poisson(n p_i)` with weights
/// `(n p_i)^{-1}`.
///
/// Levels beyond the truncation point carry total intensity at most `1e-12`;
/// they are covered by a single Poisson draw on the aggregate tail followed
/// by conditional placement, so no mass is silently dropped.
pub fn poisson_levels(
    dist: &LevelDistribution,
    n: u64,
    sampler: &dyn DeltaSampler,
    rng: &mut dyn RngCore,
) -> Result<EstimatorOutput, EstimatorError> {
    assert!(n >= 1);
    let nf = n as f64;
    let (last, tail_intensity) = poisson_truncation(dist, n);
    let mut estimate = 0.0;
    let mut cost = 0.0;
    let mut max_level = 0;
    for level in 1..=last {
        let intensity = nf * dist.pmf(level);
        if intensity <= 0.0 {
            continue;
        }
        let count = rng.sample(Poisson::new(intensity).expect("positive intensity")) as u64;
        if count == 0 {
            continue;
        }
        let weight = 1.0 / intensity;
        for _ in 0..count {
            let delta = sampler.sample_delta(level, rng)?;
            estimate += weight * delta.value;
            cost += delta.cost;
        }
        max_level = max_level.max(level);
    }
    if tail_intensity > 0.0 {
        let extra = rng.sample(Poisson::new(tail_intensity).expect("positive intensity")) as u64;
        for _ in 0..extra {
            // Conditional placement beyond the truncation point.
            let u: f64 = rng.sample(Open01);
            let level = dist.inverse_cdf(dist.cdf(last) + u * dist.tail_prob(last + 1));
            let weight = 1.0 / (nf * dist.pmf(level));
            let delta = sampler.sample_delta(level, rng)?;
            estimate += weight * delta.value;
            cost += delta.cost;
            max_level = max_level.max(level);
        }
    }
    Ok(EstimatorOutput {
        estimate,
        cost,
        max_level,
        n,
    })
}

/// Conditioned-residual demo: `n - 1` fixed draws plus one draw from `dist`,
/// weighted by the conditional expectation `p_i + #{fixed draws at i}`.
pub fn conditioned_residual(
    dist: &LevelDistribution,
    fixed: &[u32],
    sampler: &dyn DeltaSampler,
    rng: &mut dyn RngCore,
) -> Result<EstimatorOutput, EstimatorError> {
    if fixed.is_empty() {
        return Err(EstimatorError::MissingFixedDraws);
    }
    let n = fixed.len() as u64 + 1;
    let last = dist.inverse_cdf(rng.sample(Open01));
    let mut counts = std::collections::BTreeMap::new();
    for &level in fixed.iter().chain(std::iter::once(&last)) {
        assert!(level >= 1);
        *counts.entry(level).or_insert(0u64) += 1;
    }
    let mut estimate = 0.0;
    let mut cost = 0.0;
    let mut max_level = 0;
    for (&level, &count) in &counts {
        let fixed_here = fixed.iter().filter(|&&l| l == level).count() as f64;
        let weight = 1.0 / (dist.pmf(level) + fixed_here);
        for _ in 0..count {
            let delta = sampler.sample_delta(level, rng)?;
            estimate += weight * delta.value;
            cost += delta.cost;
        }
        max_level = max_level.max(level);
    }
    Ok(EstimatorOutput {
        estimate,
        cost,
        max_level,
        n,
    })
}

// ---------------------------------------------------------------------------
// Exact variance oracle

/// Per-level mean vector and covariance matrix of the level differences,
/// indexed from level 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaMoments {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

impl DeltaMoments {
    /// Moments of an analytic chain: diagonal covariance `b_i^2`.
    pub fn from_chain(chain: &crate::analytic::AnalyticChain, m: usize) -> Self {
        let mut mean = vec![0.0; m];
        let mut cov = vec![vec![0.0; m]; m];
        for i in 0..m {
            mean[i] = chain.mean(i as u32 + 1);
            let b = chain.sd(i as u32 + 1);
            cov[i][i] = b * b;
        }
        Self { mean, cov }
    }
}

/// First and mixed moments of the level counts `N_i`. `min_mean[i][k]`
/// holds `E(N_i /\ N_k)` where available; entries are `None` when no closed
/// form exists, which is only ever needed against correlated differences.
#[derive(Debug, Clone, PartialEq)]
pub struct CountMoments {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub min_mean: Vec<Vec<Option<f64>>>,
}

impl CountMoments {
    pub fn from_tables(
        mean: Vec<f64>,
        cov: Vec<Vec<f64>>,
        min_mean: Vec<Vec<Option<f64>>>,
    ) -> Self {
        Self {
            mean,
            cov,
            min_mean,
        }
    }

    /// Multinomial counts of the i.i.d. single-term scheme:
    /// `cov(N_i, N_k) = n (p_i 1{i=k} - p_i p_k)`.
    pub fn multinomial(dist: &LevelDistribution, n: u64, m: usize) -> Self {
        let nf = n as f64;
        let p: Vec<f64> = (1..=m as u32).map(|i| dist.pmf(i)).collect();
        let mean: Vec<f64> = p.iter().map(|&pi| nf * pi).collect();
        let mut cov = vec![vec![0.0; m]; m];
        let mut min_mean = vec![vec![None; m]; m];
        for i in 0..m {
            for k in 0..m {
                cov[i][k] = if i == k {
                    nf * (p[i] - p[i] * p[i])
                } else {
                    -nf * p[i] * p[k]
                };
            }
            min_mean[i][i] = Some(mean[i]);
        }
        Self {
            mean,
            cov,
            min_mean,
        }
    }

    /// Cumulative counts of the i.i.d. sum scheme. They are nested
    /// (`Ntilde_i >= Ntilde_k` for `i <= k`), so all min moments are exact:
    /// `E(Ntilde_i /\ Ntilde_k) = n ptilde_{i v k}`.
    pub fn cumulative_multinomial(dist: &LevelDistribution, n: u64, m: usize) -> Self {
        let nf = n as f64;
        let tails: Vec<f64> = (1..=m as u32).map(|i| dist.tail_prob(i)).collect();
        let mean: Vec<f64> = tails.iter().map(|&t| nf * t).collect();
        let mut cov = vec![vec![0.0; m]; m];
        let mut min_mean = vec![vec![None; m]; m];
        for i in 0..m {
            for k in 0..m {
                let upper = tails[i.max(k)];
                cov[i][k] = nf * upper - nf * tails[i] * tails[k];
                min_mean[i][k] = Some(nf * upper);
            }
        }
        Self {
            mean,
            cov,
            min_mean,
        }
    }

    /// Residual-sampling counts `N_i = n_i + N*_i`:
    /// `cov(N_i, N_k) = r (p*_i 1{i=k} - p*_i p*_k)`.
    pub fn residual(dist: &LevelDistribution, n: u64, m: usize) -> Self {
        let decomposition = scheme::residual_decomposition(dist, n);
        let r = decomposition.residual_draws as f64;
        let star: Vec<f64> = (1..=m as u32)
            .map(|i| decomposition.residual.as_ref().map_or(0.0, |p| p.pmf(i)))
            .collect();
        let mut mean = vec![0.0; m];
        let mut cov = vec![vec![0.0; m]; m];
        let mut min_mean = vec![vec![None; m]; m];
        for i in 0..m {
            let base = decomposition.base_counts.get(i).copied().unwrap_or(0) as f64;
            mean[i] = base + r * star[i];
            min_mean[i][i] = Some(mean[i]);
            for k in 0..m {
                cov[i][k] = if i == k {
                    r * (star[i] - star[i] * star[i])
                } else {
                    -r * star[i] * star[k]
                };
            }
        }
        Self {
            mean,
            cov,
            min_mean,
        }
    }

    /// Cumulative residual counts; nested like the i.i.d. sum scheme, with
    /// `cov = r (ptilde*_{i v k} - ptilde*_i ptilde*_k)`.
    pub fn cumulative_residual(dist: &LevelDistribution, n: u64, m: usize) -> Self {
        let nf = n as f64;
        let decomposition = scheme::residual_decomposition(dist, n);
        let r = decomposition.residual_draws as f64;
        let star_tail: Vec<f64> = (1..=m as u32)
            .map(|i| {
                decomposition
                    .residual
                    .as_ref()
                    .map_or(0.0, |p| p.tail_prob(i))
            })
            .collect();
        let mean: Vec<f64> = (1..=m as u32).map(|i| nf * dist.tail_prob(i)).collect();
        let mut cov = vec![vec![0.0; m]; m];
        let mut min_mean = vec![vec![None; m]; m];
        for i in 0..m {
            for k in 0..m {
                let upper = i.max(k);
                cov[i][k] = r * (star_tail[upper] - star_tail[i] * star_tail[k]);
                min_mean[i][k] = Some(mean[upper]);
            }
        }
        Self {
            mean,
            cov,
            min_mean,
        }
    }

    /// Independent Poisson counts with intensity `n p_i`.
    pub fn poisson(dist: &LevelDistribution, n: u64, m: usize) -> Self {
        let nf = n as f64;
        let mean: Vec<f64> = (1..=m as u32).map(|i| nf * dist.pmf(i)).collect();
        let mut cov = vec![vec![0.0; m]; m];
        let mut min_mean = vec![vec![None; m]; m];
        for i in 0..m {
            cov[i][i] = mean[i];
            min_mean[i][i] = Some(mean[i]);
        }
        Self {
            mean,
            cov,
            min_mean,
        }
    }

    /// Deterministic counts (idealized multilevel): zero covariance, exact
    /// minima.
    pub fn deterministic(counts: &[u64]) -> Self {
        let m = counts.len();
        let mean: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        let cov = vec![vec![0.0; m]; m];
        let mut min_mean = vec![vec![None; m]; m];
        for i in 0..m {
            for k in 0..m {
                min_mean[i][k] = Some(mean[i].min(mean[k]));
            }
        }
        Self {
            mean,
            cov,
            min_mean,
        }
    }
}

/// Exact variance of the general randomized estimator, truncated at `m`:
///
/// `v_{0,m} = sum_{i,k <= m} [cov(D_i, D_k) E(N_i /\ N_k)
///            + E D_i E D_k cov(N_i, N_k)] / (E N_i E N_k)`.
///
/// Terms with `cov(D_i, D_k) = 0` never touch the min table, so builders
/// without off-diagonal min moments work for uncorrelated differences.
pub fn general_variance(
    delta: &DeltaMoments,
    counts: &CountMoments,
    m: usize,
) -> Result<f64, EstimatorError> {
    for (name, len) in [
        ("delta mean", delta.mean.len()),
        ("delta cov", delta.cov.len()),
        ("count mean", counts.mean.len()),
        ("count cov", counts.cov.len()),
        ("count min", counts.min_mean.len()),
    ] {
        let _ = name;
        if len < m {
            return Err(EstimatorError::MomentTableTooShort {
                needed: m,
                got: len,
            });
        }
    }
    for i in 0..m {
        match counts.min_mean[i][i] {
            Some(diag) => {
                let rel = (diag - counts.mean[i]).abs() / counts.mean[i].abs().max(1.0);
                if rel > 1e-9 {
                    return Err(EstimatorError::InconsistentMoments {
                        level: i as u32 + 1,
                    });
                }
            }
            None => {
                return Err(EstimatorError::InconsistentMoments {
                    level: i as u32 + 1,
                })
            }
        }
    }
    let mut total = 0.0;
    for i in 0..m {
        if counts.mean[i] <= 0.0 {
            continue;
        }
        for k in 0..m {
            if counts.mean[k] <= 0.0 {
                continue;
            }
            let denom = counts.mean[i] * counts.mean[k];
            let cov_d = delta.cov[i][k];
            let mut term = delta.mean[i] * delta.mean[k] * counts.cov[i][k];
            if cov_d != 0.0 {
                let min = counts.min_mean[i][k].ok_or(EstimatorError::MissingMinMoment {
                    i: i as u32 + 1,
                    k: k as u32 + 1,
                })?;
                term += cov_d * min;
            }
            total += term / denom;
        }
    }
    Ok(total)
}
