//! Pilot runs and level-distribution tuning.
//!
//! The product objective `(sum_i var(Delta_i)/p_i)(sum_i p_i kappa_i)` is
//! minimized by `p_i` proportional to `sqrt(var(Delta_i)/kappa_i)`; the same
//! rule with tail probabilities in place of `p_i` covers the independent-sum
//! family, subject to tail probabilities being non-increasing. The
//! coupled-sum family optimizes over subsequences of levels as well, which is
//! solved exactly here by exhaustive search (the experiments need at most a
//! handful of levels, so all `2^{m-1}` candidates are affordable).

use std::io::{Read, Write};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::LevelDistribution;
use crate::level_diff::{Coupling, DeltaSampler};
use crate::stats::RunningMoments;

/// Exhaustive coupled-sum search is capped at this many levels.
pub const MAX_COUPLED_LEVELS: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum TuneError {
    #[error("pilot table has no level with positive variance")]
    AllZeroVariance,
    #[error("pilot table lacks reference-variance entries needed for coupled-sum tuning")]
    MissingVarToRef,
    #[error("coupled-sum search supports at most {MAX_COUPLED_LEVELS} levels, got {0}")]
    TooManyLevels(usize),
    #[error("every candidate subsequence has zero objective")]
    AllZeroObjective,
    #[error("pilot table is empty or malformed: {0}")]
    BadPilot(String),
    #[error("pilot csv: {0}")]
    Io(String),
}

/// Per-level pilot estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotLevel {
    pub level: u32,
    pub count: u64,
    pub mean: f64,
    pub var: f64,
    pub mean_cost: f64,
    /// `var(Y_ref - Y_level)` when the pilot ran with a reference level.
    pub var_to_ref: Option<f64>,
}

/// Moment estimates from a pilot run, the input to the tuners.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PilotTable {
    pub levels: Vec<PilotLevel>,
    pub ref_level: Option<u32>,
    /// `var(Y_ref - Y_0) = var(Y_ref)`.
    pub var_ref: Option<f64>,
    /// Levels whose samples all faulted; excluded from `levels`.
    pub faulted_levels: Vec<u32>,
}

impl PilotTable {
    pub fn from_estimates(levels: Vec<PilotLevel>) -> Self {
        Self {
            levels,
            ..Self::default()
        }
    }

    pub fn vars(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.var).collect()
    }

    pub fn costs(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.mean_cost).collect()
    }

    /// `var(Y_ref - Y_k)` for `k = 0..=m`; needs a coupled pilot run.
    fn var_to_ref_series(&self, m: usize) -> Result<Vec<f64>, TuneError> {
        let mut out = Vec::with_capacity(m + 1);
        out.push(self.var_ref.ok_or(TuneError::MissingVarToRef)?);
        for level in &self.levels[..m] {
            out.push(level.var_to_ref.ok_or(TuneError::MissingVarToRef)?);
        }
        Ok(out)
    }

    /// Serializes as CSV with columns `level,count,mean,var,cost,var_to_ref`.
    /// A level-0 row carries `var(Y_ref)` when present.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), TuneError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["level", "count", "mean", "var", "cost", "var_to_ref"])
            .map_err(|e| TuneError::Io(e.to_string()))?;
        let fmt_opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        if let Some(var_ref) = self.var_ref {
            w.write_record(["0", "0", "0", "0", "0", &var_ref.to_string()])
                .map_err(|e| TuneError::Io(e.to_string()))?;
        }
        for level in &self.levels {
            w.write_record([
                level.level.to_string(),
                level.count.to_string(),
                level.mean.to_string(),
                level.var.to_string(),
                level.mean_cost.to_string(),
                fmt_opt(level.var_to_ref),
            ])
            .map_err(|e| TuneError::Io(e.to_string()))?;
        }
        w.flush().map_err(|e| TuneError::Io(e.to_string()))
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, TuneError> {
        let mut table = PilotTable::default();
        let mut r = csv::Reader::from_reader(reader);
        for record in r.records() {
            let record = record.map_err(|e| TuneError::Io(e.to_string()))?;
            let get = |i: usize| -> Result<&str, TuneError> {
                record
                    .get(i)
                    .ok_or_else(|| TuneError::BadPilot("missing column".into()))
            };
            let parse = |s: &str| -> Result<f64, TuneError> {
                s.parse()
                    .map_err(|_| TuneError::BadPilot(format!("bad number `{s}`")))
            };
            let level: u32 = get(0)?
                .parse()
                .map_err(|_| TuneError::BadPilot("bad level".into()))?;
            let var_to_ref = match get(5)? {
                "" => None,
                s => Some(parse(s)?),
            };
            if level == 0 {
                table.var_ref = var_to_ref;
                continue;
            }
            table.levels.push(PilotLevel {
                level,
                count: get(1)?
                    .parse()
                    .map_err(|_| TuneError::BadPilot("bad count".into()))?,
                mean: parse(get(2)?)?,
                var: parse(get(3)?)?,
                mean_cost: parse(get(4)?)?,
                var_to_ref,
            });
        }
        Ok(table)
    }
}

/// Estimates per-level moments of `Delta_i` for `i <= max_level` from
/// `samples` draws each. With `ref_level = Some(L)` the run additionally
/// estimates `var(Y_L - Y_i)` from `samples` coupled paths to level `L`,
/// which coupled-sum tuning needs.
///
/// Levels whose draws all fault are excluded and reported in
/// `faulted_levels`.
pub fn run_pilot(
    sampler: &dyn DeltaSampler,
    max_level: u32,
    samples: u64,
    ref_level: Option<u32>,
    rng: &mut dyn RngCore,
) -> PilotTable {
    assert!(max_level >= 2, "pilot needs at least two levels");
    assert!(samples >= 100, "pilot needs at least 100 samples per level");
    let mut table = PilotTable::default();
    for level in 1..=max_level {
        let mut acc = RunningMoments::new();
        for _ in 0..samples {
            if let Ok(delta) = sampler.sample_delta(level, rng) {
                acc.update(delta.value, delta.cost).unwrap();
            }
        }
        if acc.count() < 2 {
            table.faulted_levels.push(level);
            continue;
        }
        table.levels.push(PilotLevel {
            level,
            count: acc.count(),
            mean: acc.mean(),
            var: acc.variance().unwrap(),
            mean_cost: acc.mean_cost(),
            var_to_ref: None,
        });
    }
    if let Some(reference) = ref_level {
        let reference = reference.max(max_level);
        let mut accs: Vec<RunningMoments> = vec![RunningMoments::new(); max_level as usize + 1];
        for _ in 0..samples {
            let Ok(deltas) = sampler.sample_path_deltas(reference, Coupling::Coupled, rng) else {
                continue;
            };
            let y_ref: f64 = deltas.iter().map(|d| d.value).sum();
            let mut partial = 0.0;
            // k = 0 uses Y_0 = 0.
            accs[0].update(y_ref, 0.0).unwrap();
            for k in 1..=max_level as usize {
                partial += deltas[k - 1].value;
                accs[k].update(y_ref - partial, 0.0).unwrap();
            }
        }
        table.ref_level = Some(reference);
        table.var_ref = accs[0].variance();
        for entry in &mut table.levels {
            entry.var_to_ref = accs[entry.level as usize].variance();
        }
    }
    table
}

/// Product objective `(sum var_i / p_i)(sum p_i kappa_i)`; the quantity the
/// single-term distribution minimizes.
pub fn product_objective(vars: &[f64], costs: &[f64], probs: &[f64]) -> f64 {
    let variance: f64 = vars.iter().zip(probs).map(|(v, p)| v / p).sum();
    let cost: f64 = costs.iter().zip(probs).map(|(k, p)| k * p).sum();
    variance * cost
}

/// Pool-adjacent-violators projection onto non-increasing sequences
/// (least squares, so pooled runs take their arithmetic mean).
pub fn pav_non_increasing(values: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() >= 2 {
            let (b, nb) = blocks[blocks.len() - 1];
            let (a, na) = blocks[blocks.len() - 2];
            if b <= a {
                break;
            }
            blocks.pop();
            blocks.pop();
            let n = na + nb;
            blocks.push(((a * na as f64 + b * nb as f64) / n as f64, n));
        }
    }
    let mut out = Vec::with_capacity(values.len());
    for (v, n) in blocks {
        out.extend(std::iter::repeat_n(v, n));
    }
    out
}

fn beta_weights(pilot: &PilotTable) -> Result<Vec<f64>, TuneError> {
    let vars = pilot.vars();
    let costs = pilot.costs();
    if vars.iter().all(|&v| v <= 0.0) {
        return Err(TuneError::AllZeroVariance);
    }
    let mut beta: Vec<f64> = vars
        .iter()
        .zip(&costs)
        .map(|(v, k)| (v / k).sqrt())
        .collect();
    // Exact-zero variance estimates get a negligible floor so every level
    // keeps positive probability (required for unbiasedness).
    let max = beta.iter().cloned().fold(0.0, f64::max);
    for b in &mut beta {
        if *b == 0.0 {
            *b = max * 1e-9;
        }
    }
    Ok(beta)
}

/// Level distribution for the single-term family: head probabilities
/// proportional to `sqrt(var_i / kappa_i)`, continued past the pilot by a
/// geometric tail at rate `gamma` when given.
pub fn optimal_single_term(
    pilot: &PilotTable,
    gamma: Option<f64>,
) -> Result<LevelDistribution, TuneError> {
    let beta = beta_weights(pilot)?;
    let m = beta.len();
    match gamma {
        None => {
            let total: f64 = beta.iter().sum();
            let head: Vec<f64> = beta.iter().map(|b| b / total).collect();
            LevelDistribution::finite(&head).map_err(|e| TuneError::BadPilot(e.to_string()))
        }
        Some(g) => {
            let decay = 0.5f64.powf(g);
            let tail_weight = beta[m - 1] * decay / (1.0 - decay);
            let total: f64 = beta.iter().sum::<f64>() + tail_weight;
            let head: Vec<f64> = beta.iter().map(|b| b / total).collect();
            LevelDistribution::with_geometric_tail(&head, g)
                .map_err(|e| TuneError::BadPilot(e.to_string()))
        }
    }
}

/// Level distribution for the independent-sum family: tail probabilities
/// proportional to `sqrt(var_i / kappa_i)`, projected to non-increasing by
/// pool-adjacent-violators, then differenced into level probabilities.
pub fn optimal_independent_sum(
    pilot: &PilotTable,
    gamma: Option<f64>,
) -> Result<LevelDistribution, TuneError> {
    let beta = beta_weights(pilot)?;
    let m = beta.len();
    let pooled = pav_non_increasing(&beta);
    let scale = pooled[0];
    let tails: Vec<f64> = pooled.iter().map(|t| t / scale).collect();
    match gamma {
        None => {
            let mut head = Vec::with_capacity(m);
            for i in 0..m {
                let next = if i + 1 < m { tails[i + 1] } else { 0.0 };
                head.push(tails[i] - next);
            }
            LevelDistribution::from_parts(head, 1.5, 0.0)
                .map_err(|e| TuneError::BadPilot(e.to_string()))
        }
        Some(g) => {
            let decay = 0.5f64.powf(g);
            let mut head = Vec::with_capacity(m);
            for i in 0..m {
                let next = if i + 1 < m {
                    tails[i + 1]
                } else {
                    tails[m - 1] * decay
                };
                head.push(tails[i] - next);
            }
            let tail_mass = tails[m - 1] * decay;
            LevelDistribution::from_parts(head, g, tail_mass)
                .map_err(|e| TuneError::BadPilot(e.to_string()))
        }
    }
}

/// Result of the coupled-sum subsequence search.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledSumPlan {
    /// Physical levels `J_1 < ... < J_K` used by the estimator; drawn index
    /// `k` stands for the difference `Y_{J_k} - Y_{J_{k-1}}`.
    pub levels: Vec<u32>,
    /// Distribution over the indices `1..=K`.
    pub dist: LevelDistribution,
    /// Value of the product objective at the optimum.
    pub objective: f64,
    /// Levels whose variance differences were negative (estimation noise)
    /// and were floored at zero.
    pub floored: Vec<u32>,
}

/// Objective value, tail probabilities and floored levels of one candidate.
type Candidate = (f64, Vec<u32>, Vec<f64>, Vec<u32>);

/// Scores one candidate subsequence; `None` when it cannot carry positive
/// tail probabilities everywhere mass is needed.
fn score_subsequence(
    v: &[f64],
    costs: &[f64],
    levels: &[u32],
) -> Option<(f64, Vec<f64>, Vec<u32>)> {
    let mut diffs = Vec::with_capacity(levels.len());
    let mut floored = Vec::new();
    let mut prev = 0usize;
    for &j in levels {
        let d = v[prev] - v[j as usize];
        if d < 0.0 {
            floored.push(j);
        }
        diffs.push(d.max(0.0));
        prev = j as usize;
    }
    let kappa: Vec<f64> = levels.iter().map(|&j| costs[(j - 1) as usize]).collect();
    let beta: Vec<f64> = diffs
        .iter()
        .zip(&kappa)
        .map(|(d, k)| (d / k).sqrt())
        .collect();
    let pooled = pav_non_increasing(&beta);
    if pooled[0] <= 0.0 {
        return None;
    }
    let tails: Vec<f64> = pooled.iter().map(|t| t / pooled[0]).collect();
    let mut var_part = 0.0;
    let mut cost_part = 0.0;
    for k in 0..levels.len() {
        if tails[k] <= 0.0 {
            if diffs[k] > 0.0 {
                return None;
            }
            continue;
        }
        var_part += diffs[k] / tails[k];
        cost_part += tails[k] * kappa[k];
    }
    Some((var_part * cost_part, tails, floored))
}

fn plan_from(
    levels: Vec<u32>,
    tails: Vec<f64>,
    objective: f64,
    floored: Vec<u32>,
) -> Result<CoupledSumPlan, TuneError> {
    if objective == 0.0 {
        return Err(TuneError::AllZeroObjective);
    }
    let k = levels.len();
    let mut head = Vec::with_capacity(k);
    for i in 0..k {
        let next = if i + 1 < k { tails[i + 1] } else { 0.0 };
        head.push(tails[i] - next);
    }
    let dist = LevelDistribution::from_parts(head, 1.5, 0.0)
        .map_err(|e| TuneError::BadPilot(e.to_string()))?;
    Ok(CoupledSumPlan {
        levels,
        dist,
        objective,
        floored,
    })
}

/// Coupled-sum tuning restricted to a given ascending subsequence of levels
/// (pass `1..=m` for the plain consecutive ladder).
pub fn optimal_coupled_sum_on(
    pilot: &PilotTable,
    levels: &[u32],
) -> Result<CoupledSumPlan, TuneError> {
    let m = levels.last().copied().unwrap_or(0) as usize;
    if m == 0 || m > pilot.levels.len() {
        return Err(TuneError::BadPilot(format!(
            "levels {levels:?} outside the pilot range"
        )));
    }
    let v = pilot.var_to_ref_series(m)?;
    let costs = pilot.costs();
    let (objective, tails, floored) =
        score_subsequence(&v, &costs, levels).ok_or(TuneError::AllZeroObjective)?;
    plan_from(levels.to_vec(), tails, objective, floored)
}

/// Exact coupled-sum tuning: exhaustively searches all subsequences of
/// `{1..m}` ending at `m` and, per candidate, sets tail probabilities
/// proportional to `sqrt(d_k / kappa_{J_k})` (projected non-increasing)
/// where `d_k = var(Y_ref - Y_{J_{k-1}}) - var(Y_ref - Y_{J_k})`. Ties break
/// toward the lexicographically smallest subsequence.
pub fn optimal_coupled_sum(pilot: &PilotTable, m: usize) -> Result<CoupledSumPlan, TuneError> {
    if m == 0 || m > pilot.levels.len() {
        return Err(TuneError::BadPilot(format!(
            "m = {m} outside the pilot range"
        )));
    }
    if m > MAX_COUPLED_LEVELS {
        return Err(TuneError::TooManyLevels(m));
    }
    let v = pilot.var_to_ref_series(m)?;
    let costs = pilot.costs();

    let mut best: Option<Candidate> = None;
    for mask in 0..(1u32 << (m - 1)) {
        let mut levels: Vec<u32> = (1..m as u32).filter(|i| mask >> (i - 1) & 1 == 1).collect();
        levels.push(m as u32);
        let Some((objective, tails, floored)) = score_subsequence(&v, &costs, &levels) else {
            continue;
        };
        let better = match &best {
            None => true,
            Some((obj, lv, _, _)) => objective < *obj || (objective == *obj && levels < *lv),
        };
        if better {
            best = Some((objective, levels, tails, floored));
        }
    }
    let (objective, levels, tails, floored) = best.ok_or(TuneError::AllZeroObjective)?;
    plan_from(levels, tails, objective, floored)
}
