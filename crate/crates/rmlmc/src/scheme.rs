//! Level-allocation schemes: i.i.d., uniformly stratified, systematic and
//! residual sampling.
//!
//! Each scheme turns `n` uniform variates into level draws `R^(1..n)` through
//! the inverse CDF of a [`LevelDistribution`]. Stratified sampling confines
//! the j-th uniform to `((j-1)/n, j/n)`; systematic sampling shares a single
//! offset across all strata; residual sampling fixes `floor(n p_i)` draws per
//! level and resolves the remainder multinomially.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::distributions::Open01;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::dist::LevelDistribution;

/// Randomization scheme token. CLI-visible values: `iid | str | sys | res`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RandScheme {
    Iid,
    #[serde(rename = "str")]
    Stratified,
    #[serde(rename = "sys")]
    Systematic,
    #[serde(rename = "res")]
    Residual,
}

impl RandScheme {
    pub const ALL: [RandScheme; 4] = [
        RandScheme::Iid,
        RandScheme::Stratified,
        RandScheme::Systematic,
        RandScheme::Residual,
    ];

    pub fn token(self) -> &'static str {
        match self {
            RandScheme::Iid => "iid",
            RandScheme::Stratified => "str",
            RandScheme::Systematic => "sys",
            RandScheme::Residual => "res",
        }
    }
}

impl fmt::Display for RandScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for RandScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "iid" => Ok(RandScheme::Iid),
            "str" => Ok(RandScheme::Stratified),
            "sys" => Ok(RandScheme::Systematic),
            "res" => Ok(RandScheme::Residual),
            other => Err(format!(
                "unknown scheme token `{other}` (expected iid|str|sys|res)"
            )),
        }
    }
}

/// Realized per-level sample counts from one randomization, with the draws
/// that produced them.
///
/// Stratified and systematic draws are non-decreasing by construction; i.i.d.
/// draws keep generation order; residual draws list the deterministic base
/// allocation in level order followed by the multinomial remainder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelAllocation {
    pub n: u64,
    pub counts: BTreeMap<u32, u64>,
    pub draws: Option<Vec<u32>>,
}

impl LevelAllocation {
    pub fn from_draws(n: u64, draws: Vec<u32>) -> Self {
        debug_assert_eq!(draws.len() as u64, n);
        let mut counts = BTreeMap::new();
        for &r in &draws {
            *counts.entry(r).or_insert(0) += 1;
        }
        Self {
            n,
            counts,
            draws: Some(draws),
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn max_level(&self) -> u32 {
        self.counts.keys().next_back().copied().unwrap_or(0)
    }
}

/// Draws `n` i.i.d. levels through the inverse CDF.
pub fn draw_iid(dist: &LevelDistribution, n: u64, rng: &mut dyn RngCore) -> LevelAllocation {
    assert!(n >= 1);
    let draws: Vec<u32> = (0..n)
        .map(|_| dist.inverse_cdf(rng.sample(Open01)))
        .collect();
    LevelAllocation::from_draws(n, draws)
}

/// Core of the stratified/systematic samplers: maps the already-stratified
/// uniforms `u[j]` to levels with a single forward CDF sweep, amortized
/// `O(n + max level)`. Exposed so deterministic uniform designs can be
/// injected directly.
pub fn stratified_from_uniforms(dist: &LevelDistribution, uniforms: &[f64]) -> Vec<u32> {
    let mut level = 1u32;
    let mut cdf = dist.cdf(1);
    let mut draws = Vec::with_capacity(uniforms.len());
    for &u in uniforms {
        debug_assert!(u > 0.0 && u < 1.0);
        while u > cdf {
            if dist.tail_prob(level + 1) <= 0.0 {
                // Finite support exhausted; F(max level) is 1 up to rounding.
                break;
            }
            level += 1;
            cdf = dist.cdf(level);
        }
        draws.push(level);
    }
    draws
}

/// Uniformly stratified draws: the j-th uniform lives in `((j-1)/n, j/n)`.
pub fn draw_stratified(dist: &LevelDistribution, n: u64, rng: &mut dyn RngCore) -> LevelAllocation {
    assert!(n >= 1);
    let uniforms: Vec<f64> = (0..n)
        .map(|j| {
            let v: f64 = rng.sample(Open01);
            (j as f64 + v) / n as f64
        })
        .collect();
    LevelAllocation::from_draws(n, stratified_from_uniforms(dist, &uniforms))
}

/// Systematic draws: one shared offset `U ~ U(0, 1/n)` across all strata.
pub fn draw_systematic(dist: &LevelDistribution, n: u64, rng: &mut dyn RngCore) -> LevelAllocation {
    assert!(n >= 1);
    let offset: f64 = rng.sample::<f64, _>(Open01) / n as f64;
    let uniforms: Vec<f64> = (0..n).map(|j| j as f64 / n as f64 + offset).collect();
    LevelAllocation::from_draws(n, stratified_from_uniforms(dist, &uniforms))
}

/// Deterministic part of residual sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualDecomposition {
    /// `floor(n p_i)` for levels `1..=base_counts.len()`; trailing zeros trimmed.
    pub base_counts: Vec<u64>,
    /// Number of multinomial remainder draws, `r = n - sum(base_counts)`.
    pub residual_draws: u64,
    /// Remainder distribution `p*_i = (n p_i - n_i) / r`; `None` when `r = 0`.
    pub residual: Option<LevelDistribution>,
}

/// Largest level with `n * pmf >= 1`, located analytically for the geometric
/// tail (never by scanning unbounded levels) and fixed up by a local scan.
fn last_level_with_unit_mass(dist: &LevelDistribution, n: u64) -> u32 {
    let m = dist.head_len() as u32;
    let nf = n as f64;
    let mut last = 0u32;
    for i in 1..=m {
        if nf * dist.pmf(i) >= 1.0 {
            last = i;
        }
    }
    if dist.tail_mass() > 0.0 {
        let first_tail = nf * dist.tail_mass() * (1.0 - 0.5f64.powf(dist.gamma()));
        if first_tail >= 1.0 {
            let steps = (first_tail.log2() / dist.gamma()).floor().max(0.0);
            let mut k = m + 1 + steps as u32;
            while k > m + 1 && nf * dist.pmf(k) < 1.0 {
                k -= 1;
            }
            while nf * dist.pmf(k + 1) >= 1.0 {
                k += 1;
            }
            if nf * dist.pmf(k) >= 1.0 {
                last = last.max(k);
            }
        }
    }
    last
}

/// Splits `n` draws into `floor(n p_i)` base counts, the residual count `r`,
/// and the residual distribution over the fractional parts.
///
/// For a geometric-tail `dist` the residual distribution is again of
/// head + geometric-tail form with the same rate, so it is kept exact.
pub fn residual_decomposition(dist: &LevelDistribution, n: u64) -> ResidualDecomposition {
    assert!(n >= 1);
    let nf = n as f64;
    let last_base = last_level_with_unit_mass(dist, n);
    let head_end = last_base.max(dist.head_len() as u32);

    let mut base_counts = Vec::with_capacity(last_base as usize);
    for i in 1..=last_base {
        base_counts.push((nf * dist.pmf(i)).floor() as u64);
    }
    let assigned: u64 = base_counts.iter().sum();
    debug_assert!(assigned <= n);
    let residual_draws = n - assigned;
    if residual_draws == 0 {
        return ResidualDecomposition {
            base_counts,
            residual_draws,
            residual: None,
        };
    }

    // Fractional parts over 1..=head_end, then the untouched geometric tail;
    // normalized explicitly so rounding in `n * p_i` cannot break validation.
    let mut frac = Vec::with_capacity(head_end as usize);
    for i in 1..=head_end {
        let base = if i <= last_base {
            base_counts[(i - 1) as usize] as f64
        } else {
            0.0
        };
        frac.push((nf * dist.pmf(i) - base).max(0.0));
    }
    let tail = nf * dist.tail_prob(head_end + 1);
    let total: f64 = frac.iter().sum::<f64>() + tail;
    for f in &mut frac {
        *f /= total;
    }
    let residual = LevelDistribution::from_parts(frac, dist.gamma(), tail / total)
        .expect("residual distribution is normalized by construction");
    ResidualDecomposition {
        base_counts,
        residual_draws,
        residual: Some(residual),
    }
}

/// Residual-sampling draws: deterministic base counts plus a multinomial
/// remainder, `N_i = n_i + N*_i`.
pub fn draw_residual(dist: &LevelDistribution, n: u64, rng: &mut dyn RngCore) -> LevelAllocation {
    let decomposition = residual_decomposition(dist, n);
    let mut draws = Vec::with_capacity(n as usize);
    for (idx, &count) in decomposition.base_counts.iter().enumerate() {
        for _ in 0..count {
            draws.push(idx as u32 + 1);
        }
    }
    if let Some(residual) = &decomposition.residual {
        for _ in 0..decomposition.residual_draws {
            draws.push(residual.inverse_cdf(rng.sample(Open01)));
        }
    }
    LevelAllocation::from_draws(n, draws)
}

/// Cumulative counts `Ntilde_i = sum_{k >= i} N_k` for every level up to the
/// allocation maximum.
pub fn cumulative_counts(alloc: &LevelAllocation) -> BTreeMap<u32, u64> {
    let mut out = BTreeMap::new();
    let max = alloc.max_level();
    let mut acc = 0u64;
    for i in (1..=max).rev() {
        acc += alloc.counts.get(&i).copied().unwrap_or(0);
        out.insert(i, acc);
    }
    out
}
