//! Experiment harness: replication studies over a grid of
//! (family, scheme, n) cells with deterministic parallel execution.
//!
//! Every replication owns a private random stream keyed by the base seed,
//! the cell and the replication index, never by the executing thread, so a
//! report is byte-identical across parallelism degrees and repeated runs.
//! Default parallelism follows rayon's global pool (`RAYON_NUM_THREADS`);
//! `threads` in the config forces a specific degree.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytic::{self, AnalyticChain, ChainMode, DyadicChain};
use crate::dist::{DistError, LevelDistribution};
use crate::estimator::{
    self, general_variance, CountMoments, DeltaMoments, EstimatorError, HybridSpec, MlmcVariant,
};
use crate::level_diff::{catalog_entry, Coupling, DeltaSampler, SdeSampler, SubsequenceSampler};
use crate::scheme::RandScheme;
use crate::stats::RunningMoments;
use crate::tune::{self, TuneError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Tune(#[from] TuneError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error("cell {cell}: {faults} of {reps} replications faulted (limit 0.1%)")]
    ExcessiveFaults {
        cell: String,
        faults: u64,
        reps: u64,
    },
    #[error("i/o error: {0}")]
    Io(String),
}

// ---------------------------------------------------------------------------
// Tokens

macro_rules! token_enum {
    ($name:ident { $($variant:ident => $token:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $token)] $variant),+
        }

        impl $name {
            pub fn token(self) -> &'static str {
                match self { $(Self::$variant => $token),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.token())
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($token => Ok(Self::$variant),)+
                    other => Err(format!(
                        concat!("unknown ", stringify!($name), " token `{}`"), other
                    )),
                }
            }
        }
    };
}

token_enum!(ModelToken {
    Gbm => "gbm",
    Cir => "cir",
    Heston => "heston",
    ModGbm => "modgbm",
    Det => "det",
});

token_enum!(FamilyToken {
    Single => "single",
    IndependentSum => "isum",
    CoupledSum => "csum",
});

token_enum!(SchemeToken {
    Iid => "iid",
    Stratified => "str",
    Systematic => "sys",
    Residual => "res",
    Mlmc => "mlmc",
    Poisson => "poisson",
    Hybrid => "hybrid",
    CondRes => "cond-res",
});

impl SchemeToken {
    fn as_randomization(self) -> Option<RandScheme> {
        match self {
            SchemeToken::Iid => Some(RandScheme::Iid),
            SchemeToken::Stratified => Some(RandScheme::Stratified),
            SchemeToken::Systematic => Some(RandScheme::Systematic),
            SchemeToken::Residual => Some(RandScheme::Residual),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration

/// Where the level distribution comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistSource {
    /// Per-model default: the dyadic distribution for `det`, otherwise a
    /// pilot run with desk-scale defaults.
    Default,
    Explicit {
        head: Vec<f64>,
        gamma: f64,
        tail_mass: f64,
        /// Optional subsequence of physical levels (index `k` stands for
        /// `Y_{levels[k]} - Y_{levels[k-1]}`).
        #[serde(default, skip_serializing_if = "Option::is_none")]
        levels: Option<Vec<u32>>,
    },
    File {
        path: String,
    },
    Pilot {
        max_level: u32,
        samples: u64,
        #[serde(default)]
        gamma: Option<f64>,
        #[serde(default)]
        ref_level: Option<u32>,
    },
}

/// Serialized form of a tuned distribution; what `tune` writes and `run`
/// reads back.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DistFile {
    pub head: Vec<f64>,
    pub gamma: f64,
    pub tail_mass: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<u32>>,
}

impl DistFile {
    pub fn new(dist: &LevelDistribution, levels: Option<Vec<u32>>) -> Self {
        Self {
            head: dist.head().to_vec(),
            gamma: dist.gamma(),
            tail_mass: dist.tail_mass(),
            levels,
        }
    }

    pub fn to_dist(&self) -> Result<LevelDistribution, DistError> {
        LevelDistribution::from_parts(self.head.clone(), self.gamma, self.tail_mass)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelToken,
    pub families: Vec<FamilyToken>,
    pub schemes: Vec<SchemeToken>,
    pub ns: Vec<u64>,
    pub replications: u64,
    pub seed: u64,
    #[serde(default = "default_dist_source")]
    pub dist: DistSource,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub truth_override: Option<f64>,
}

fn default_dist_source() -> DistSource {
    DistSource::Default
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.families.is_empty() || self.schemes.is_empty() {
            return Err(HarnessError::Config(
                "families and schemes must be non-empty".into(),
            ));
        }
        if self.ns.is_empty() || self.ns.contains(&0) {
            return Err(HarnessError::Config("n values must be positive".into()));
        }
        if self.replications < 2 {
            return Err(HarnessError::Config(
                "at least 2 replications required".into(),
            ));
        }
        for &scheme in &self.schemes {
            if matches!(
                scheme,
                SchemeToken::Poisson | SchemeToken::Hybrid | SchemeToken::CondRes
            ) && self.families.iter().any(|&f| f != FamilyToken::Single)
            {
                return Err(HarnessError::Config(format!(
                    "scheme `{scheme}` applies to the single-term family only"
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Reports

/// One grid cell of an experiment report.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CellReport {
    pub model: String,
    pub family: String,
    pub scheme: String,
    pub n: u64,
    pub reps: u64,
    pub mean: f64,
    pub stderr: f64,
    pub mean_cost: f64,
    pub ire: f64,
    pub truth: f64,
    pub faults: u64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct ExperimentReport {
    pub cells: Vec<CellReport>,
}

impl ExperimentReport {
    /// Copy with wall-clock timings zeroed. Timing is the one
    /// non-deterministic column, so reproducibility comparisons and stored
    /// references use the canonical form.
    pub fn canonical(&self) -> Self {
        let mut out = self.clone();
        for cell in &mut out.cells {
            cell.seconds = 0.0;
        }
        out
    }

    pub fn find(&self, family: &str, scheme: &str, n: u64) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.family == family && c.scheme == scheme && c.n == n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

/// Writes the report; CSV columns are exactly
/// `model,family,scheme,n,reps,mean,stderr,mean_cost,ire,truth,faults,seconds`.
pub fn emit_report<W: Write>(
    report: &ExperimentReport,
    format: ReportFormat,
    writer: W,
) -> Result<(), HarnessError> {
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(writer);
            for cell in &report.cells {
                w.serialize(cell)
                    .map_err(|e| HarnessError::Io(e.to_string()))?;
            }
            // serde skips the header on empty input; force it so an empty
            // report is still a valid header-only file.
            if report.cells.is_empty() {
                w.write_record([
                    "model",
                    "family",
                    "scheme",
                    "n",
                    "reps",
                    "mean",
                    "stderr",
                    "mean_cost",
                    "ire",
                    "truth",
                    "faults",
                    "seconds",
                ])
                .map_err(|e| HarnessError::Io(e.to_string()))?;
            }
            w.flush().map_err(|e| HarnessError::Io(e.to_string()))
        }
        ReportFormat::Json => serde_json::to_writer_pretty(writer, report)
            .map_err(|e| HarnessError::Io(e.to_string())),
    }
}

pub fn parse_report<R: Read>(
    format: ReportFormat,
    reader: R,
) -> Result<ExperimentReport, HarnessError> {
    match format {
        ReportFormat::Csv => {
            let mut cells = Vec::new();
            let mut r = csv::Reader::from_reader(reader);
            for record in r.deserialize() {
                cells.push(record.map_err(|e| HarnessError::Io(e.to_string()))?);
            }
            Ok(ExperimentReport { cells })
        }
        ReportFormat::Json => {
            serde_json::from_reader(reader).map_err(|e| HarnessError::Io(e.to_string()))
        }
    }
}

// ---------------------------------------------------------------------------
// Random streams

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xCBF2_9CE4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x100_0000_01B3);
    }
    hash
}

/// Stream seed for one replication: a hash of the base seed, the cell key
/// and the replication index. Independent of thread scheduling.
pub fn replication_seed(base: u64, cell_key: &str, replication: u64) -> u64 {
    splitmix64(splitmix64(base ^ fnv1a(cell_key.as_bytes())) ^ replication)
}

// ---------------------------------------------------------------------------
// Experiment execution

enum AnySampler {
    Sde(SdeSampler),
    Subsequence(SubsequenceSampler),
    Dyadic(DyadicChain),
}

impl AnySampler {
    fn as_dyn(&self) -> &dyn DeltaSampler {
        match self {
            AnySampler::Sde(s) => s,
            AnySampler::Subsequence(s) => s,
            AnySampler::Dyadic(s) => s,
        }
    }
}

struct FamilySetup {
    dist: LevelDistribution,
    sampler: AnySampler,
}

struct ResolvedExperiment {
    truth: f64,
    families: Vec<(FamilyToken, FamilySetup)>,
}

fn base_sampler(model: ModelToken) -> AnySampler {
    match model {
        ModelToken::Det => AnySampler::Dyadic(DyadicChain),
        token => {
            let entry = catalog_entry(token.token()).expect("catalog covers all SDE tokens");
            AnySampler::Sde(SdeSampler::new(entry.model))
        }
    }
}

fn model_truth(model: ModelToken) -> f64 {
    match model {
        ModelToken::Det => DyadicChain::TARGET,
        token => {
            catalog_entry(token.token())
                .expect("catalog covers all SDE tokens")
                .truth
        }
    }
}

fn resolve(config: &ExperimentConfig) -> Result<ResolvedExperiment, HarnessError> {
    let truth = config
        .truth_override
        .unwrap_or_else(|| model_truth(config.model));
    let explicit = |head: &[f64], gamma: f64, tail_mass: f64, levels: &Option<Vec<u32>>| {
        let dist = LevelDistribution::from_parts(head.to_vec(), gamma, tail_mass)?;
        let families = config
            .families
            .iter()
            .map(|&family| {
                let sampler = match (levels, config.model) {
                    (Some(levels), model) if model != ModelToken::Det => {
                        let entry = catalog_entry(model.token()).expect("SDE token");
                        AnySampler::Subsequence(SubsequenceSampler::new(
                            SdeSampler::new(entry.model),
                            levels.clone(),
                        ))
                    }
                    _ => base_sampler(config.model),
                };
                (
                    family,
                    FamilySetup {
                        dist: dist.clone(),
                        sampler,
                    },
                )
            })
            .collect();
        Ok::<_, HarnessError>(ResolvedExperiment { truth, families })
    };

    match &config.dist {
        DistSource::Explicit {
            head,
            gamma,
            tail_mass,
            levels,
        } => explicit(head, *gamma, *tail_mass, levels),
        DistSource::File { path } => {
            let text =
                std::fs::read_to_string(path).map_err(|e| HarnessError::Io(e.to_string()))?;
            let file: DistFile =
                toml::from_str(&text).map_err(|e| HarnessError::Io(e.to_string()))?;
            explicit(&file.head, file.gamma, file.tail_mass, &file.levels)
        }
        DistSource::Default if config.model == ModelToken::Det => {
            // Delta_i = 2^{-i} is matched exactly by p_i = 2^{-i}.
            let dist = LevelDistribution::with_geometric_tail(&[0.5], 1.0)?;
            let families = config
                .families
                .iter()
                .map(|&family| {
                    (
                        family,
                        FamilySetup {
                            dist: dist.clone(),
                            sampler: base_sampler(config.model),
                        },
                    )
                })
                .collect();
            Ok(ResolvedExperiment { truth, families })
        }
        DistSource::Default => tuned(config, 8, 20_000, Some(1.5), Some(10), truth),
        DistSource::Pilot {
            max_level,
            samples,
            gamma,
            ref_level,
        } => tuned(config, *max_level, *samples, *gamma, *ref_level, truth),
    }
}

/// Runs one pilot and tunes a distribution per estimator family.
fn tuned(
    config: &ExperimentConfig,
    max_level: u32,
    samples: u64,
    gamma: Option<f64>,
    ref_level: Option<u32>,
    truth: f64,
) -> Result<ResolvedExperiment, HarnessError> {
    if config.model == ModelToken::Det {
        return Err(HarnessError::Config(
            "the deterministic chain has zero variance; give it an explicit distribution".into(),
        ));
    }
    let needs_ref = config.families.contains(&FamilyToken::CoupledSum);
    let sampler = base_sampler(config.model);
    let mut rng = ChaCha8Rng::seed_from_u64(replication_seed(
        config.seed,
        &format!("pilot/{}", config.model),
        0,
    ));
    let pilot = tune::run_pilot(
        sampler.as_dyn(),
        max_level,
        samples,
        if needs_ref {
            ref_level.or(Some(13))
        } else {
            None
        },
        &mut rng,
    );
    let mut families = Vec::new();
    for &family in &config.families {
        let setup = match family {
            FamilyToken::Single => FamilySetup {
                dist: tune::optimal_single_term(&pilot, gamma)?,
                sampler: base_sampler(config.model),
            },
            FamilyToken::IndependentSum => FamilySetup {
                dist: tune::optimal_independent_sum(&pilot, gamma)?,
                sampler: base_sampler(config.model),
            },
            FamilyToken::CoupledSum => {
                let plan = tune::optimal_coupled_sum(&pilot, pilot.levels.len())?;
                let entry = catalog_entry(config.model.token()).expect("SDE token");
                let sampler =
                    if plan.levels.len() == plan.levels.last().copied().unwrap_or(0) as usize {
                        AnySampler::Sde(SdeSampler::new(entry.model))
                    } else {
                        AnySampler::Subsequence(SubsequenceSampler::new(
                            SdeSampler::new(entry.model),
                            plan.levels.clone(),
                        ))
                    };
                FamilySetup {
                    dist: plan.dist,
                    sampler,
                }
            }
        };
        families.push((family, setup));
    }
    Ok(ResolvedExperiment { truth, families })
}

/// Default hybrid split for effort `n`: multilevel base counts
/// `floor(n p_i)` on the first two levels, remainder as unbiased tail draws.
fn hybrid_spec(dist: &LevelDistribution, n: u64) -> Result<HybridSpec, HarnessError> {
    let nf = n as f64;
    let mut base_counts = Vec::new();
    for level in 1..=2u32 {
        let count = (nf * dist.pmf(level)).floor() as u64;
        if count == 0 {
            break;
        }
        base_counts.push(count);
    }
    if base_counts.is_empty() {
        return Err(HarnessError::Config(format!(
            "n = {n} too small for the hybrid base"
        )));
    }
    let m = base_counts.len() as u32;
    let tail = dist.conditional_beyond(m)?;
    let tail_draws = n - base_counts.iter().sum::<u64>();
    if tail_draws == 0 {
        return Err(HarnessError::Config(format!(
            "n = {n} leaves no hybrid tail draws"
        )));
    }
    Ok(HybridSpec {
        base_counts,
        tail,
        tail_draws,
    })
}

fn run_replication(
    family: FamilyToken,
    scheme: SchemeToken,
    setup: &FamilySetup,
    hybrid: Option<&HybridSpec>,
    n: u64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64), EstimatorError> {
    let sampler = setup.sampler.as_dyn();
    let dist = &setup.dist;
    let out = match scheme.as_randomization() {
        Some(randomization) => match family {
            FamilyToken::Single => estimator::single_term(dist, n, randomization, sampler, rng)?,
            FamilyToken::IndependentSum => estimator::sum_estimator(
                dist,
                n,
                randomization,
                Coupling::Independent,
                sampler,
                rng,
            )?,
            FamilyToken::CoupledSum => {
                estimator::sum_estimator(dist, n, randomization, Coupling::Coupled, sampler, rng)?
            }
        },
        None => match scheme {
            SchemeToken::Mlmc => {
                let variant = match family {
                    FamilyToken::Single => MlmcVariant::Single,
                    _ => MlmcVariant::Sum,
                };
                estimator::mlmc_idealized(dist, n, variant, sampler, rng)?
            }
            SchemeToken::Poisson => estimator::poisson_levels(dist, n, sampler, rng)?,
            SchemeToken::Hybrid => {
                estimator::hybrid(hybrid.expect("hybrid spec prepared per cell"), sampler, rng)?
            }
            SchemeToken::CondRes => {
                let fixed: Vec<u32> = (1..n)
                    .map(|_| dist.inverse_cdf(rand::Rng::sample(rng, rand::distributions::Open01)))
                    .collect();
                estimator::conditioned_residual(dist, &fixed, sampler, rng)?
            }
            _ => unreachable!("randomization schemes handled above"),
        },
    };
    Ok((out.estimate, out.cost))
}

/// Runs the full grid. Deterministic for a fixed config: replication streams
/// are keyed by (seed, cell, index) and aggregation folds in index order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    config.validate()?;
    let resolved = resolve(config)?;
    let pool = config
        .threads
        .map(|t| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| HarnessError::Config(e.to_string()))
        })
        .transpose()?;

    let mut cells = Vec::new();
    for (family, setup) in &resolved.families {
        for &scheme in &config.schemes {
            for &n in &config.ns {
                let hybrid = if scheme == SchemeToken::Hybrid {
                    Some(hybrid_spec(&setup.dist, n)?)
                } else {
                    None
                };
                let cell_key = format!("{}/{}/{}/{}", config.model, family, scheme, n);
                let started = Instant::now();
                let body = || {
                    (0..config.replications)
                        .into_par_iter()
                        .map(|rep| {
                            let mut rng = ChaCha8Rng::seed_from_u64(replication_seed(
                                config.seed,
                                &cell_key,
                                rep,
                            ));
                            run_replication(*family, scheme, setup, hybrid.as_ref(), n, &mut rng)
                        })
                        .collect::<Vec<_>>()
                };
                let results = match &pool {
                    Some(pool) => pool.install(body),
                    None => body(),
                };

                let mut moments = RunningMoments::new();
                let mut faults = 0u64;
                for result in results {
                    match result {
                        Ok((estimate, cost)) => moments.update(estimate, cost).map_err(|e| {
                            HarnessError::Config(format!("non-finite estimate: {e}"))
                        })?,
                        Err(EstimatorError::Fault(_)) => faults += 1,
                        Err(other) => return Err(other.into()),
                    }
                }
                if faults * 1000 > config.replications {
                    return Err(HarnessError::ExcessiveFaults {
                        cell: cell_key,
                        faults,
                        reps: config.replications,
                    });
                }
                cells.push(CellReport {
                    model: config.model.token().to_string(),
                    family: family.token().to_string(),
                    scheme: scheme.token().to_string(),
                    n,
                    reps: moments.count(),
                    mean: moments.mean(),
                    stderr: moments.std_error().unwrap_or(0.0),
                    mean_cost: moments.mean_cost(),
                    ire: moments.ire(resolved.truth).map_err(|e| {
                        HarnessError::Config(format!("too few successful replications: {e}"))
                    })?,
                    truth: resolved.truth,
                    faults,
                    seconds: started.elapsed().as_secs_f64(),
                });
            }
        }
    }
    Ok(ExperimentReport { cells })
}

// ---------------------------------------------------------------------------
// Oracle self-checks

/// Outcome of one oracle invariant check.
#[derive(Debug, Clone)]
pub struct OracleCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random_chain(rng: &mut ChaCha8Rng, mode: ChainMode) -> (AnalyticChain, LevelDistribution) {
    use rand::Rng;
    let m = rng.gen_range(2..8usize);
    let means: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let sds: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..1.0)).collect();
    let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
    (
        AnalyticChain::new(means, sds, mode),
        LevelDistribution::finite(&probs).unwrap(),
    )
}

/// Runs the analytic-oracle invariant suite; every check must pass on a
/// correct build. Deterministic for a fixed seed.
pub fn oracle_check(seed: u64) -> Vec<OracleCheck> {
    use rand::Rng;
    let mut checks = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // General variance vs the single-term / sum / Poisson closed forms.
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (chain, dist) = random_chain(&mut rng, ChainMode::PartialSum);
        let m = chain.len();
        let n = rng.gen_range(1..64u64);
        let delta = DeltaMoments::from_chain(&chain, m);
        let mean = analytic::exact_mean(&chain);

        let single = general_variance(&delta, &CountMoments::multinomial(&dist, n, m), m).unwrap();
        let single_expect = (analytic::exact_single_term_moments(&chain, &dist)
            .unwrap()
            .second_moment
            - mean * mean)
            / n as f64;
        worst = worst.max((single - single_expect).abs() / single_expect.abs().max(1e-12));

        let summed = general_variance(
            &delta,
            &CountMoments::cumulative_multinomial(&dist, n, m),
            m,
        )
        .unwrap();
        for case in [analytic::SumCase::Coupled, analytic::SumCase::Independent] {
            let expect = (analytic::exact_sum_moments(&chain, &dist, case)
                .unwrap()
                .second_moment
                - mean * mean)
                / n as f64;
            worst = worst.max((summed - expect).abs() / expect.abs().max(1e-12));
        }

        let poisson = general_variance(&delta, &CountMoments::poisson(&dist, n, m), m).unwrap();
        let poisson_expect = analytic::exact_single_term_moments(&chain, &dist)
            .unwrap()
            .second_moment
            / n as f64;
        worst = worst.max((poisson - poisson_expect).abs() / poisson_expect.abs().max(1e-12));
    }
    checks.push(OracleCheck {
        name: "general-variance closed forms",
        passed: worst < 1e-10,
        detail: format!("worst relative gap {worst:.3e}"),
    });

    // Scheme variance ordering by exact enumeration.
    let mut ordering_ok = true;
    let mut detail = String::new();
    for trial in 0..25 {
        let m = rng.gen_range(2..4usize);
        let n = rng.gen_range(2..5u64);
        let means: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sds: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..1.0)).collect();
        let chain = AnalyticChain::new(means, sds, ChainMode::IndependentIncrements);
        let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
        let dist = LevelDistribution::finite(&probs).unwrap();
        let iid = analytic::brute_force_scheme_variance(&chain, &dist, n, RandScheme::Iid).unwrap();
        let tol = 1e-10 * iid.max(1.0);
        for scheme in [RandScheme::Stratified, RandScheme::Residual] {
            let v = analytic::brute_force_scheme_variance(&chain, &dist, n, scheme).unwrap();
            if v > iid + tol {
                ordering_ok = false;
                detail = format!("trial {trial}: {scheme} variance {v} exceeds iid {iid}");
            }
        }
        let single = analytic::exact_single_term_moments(&chain, &dist)
            .unwrap()
            .variance;
        let sys = analytic::brute_force_scheme_variance(&chain, &dist, n, RandScheme::Systematic)
            .unwrap();
        if sys > single + tol {
            ordering_ok = false;
            detail = format!("trial {trial}: systematic variance {sys} exceeds single {single}");
        }
    }
    checks.push(OracleCheck {
        name: "scheme variance ordering",
        passed: ordering_ok,
        detail: if ordering_ok {
            "str/res <= iid and sys <= single".into()
        } else {
            detail
        },
    });

    // Residual sampling approaches the asymptotic variance.
    let m = 12usize;
    let means: Vec<f64> = (1..=m as i32).map(|i| 0.5f64.powi(i)).collect();
    let sds: Vec<f64> = (1..=m as i32)
        .map(|i| 0.5f64.powf(0.75 * i as f64))
        .collect();
    let chain = AnalyticChain::new(means, sds, ChainMode::IndependentIncrements);
    let raw: Vec<f64> = (1..=m as i32)
        .map(|i| 0.5f64.powf(1.5 * i as f64))
        .collect();
    let total: f64 = raw.iter().sum();
    let probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
    let dist = LevelDistribution::finite(&probs).unwrap();
    let n = 10_000u64;
    let delta = DeltaMoments::from_chain(&chain, m);
    let v = general_variance(&delta, &CountMoments::residual(&dist, n, m), m).unwrap();
    let sigma =
        analytic::exact_sigma_infty(&chain, &dist, analytic::SigmaFamily::SingleTerm).unwrap();
    let gap = (n as f64 * v - sigma).abs() / sigma;
    checks.push(OracleCheck {
        name: "residual asymptotic variance",
        passed: gap < 0.05,
        detail: format!("relative gap {gap:.3e} at n = {n}"),
    });

    // Tail identities of the level distribution.
    let mut tail_ok = true;
    for _ in 0..20 {
        let h1 = rng.gen_range(0.2..0.6);
        let h2 = rng.gen_range(0.05..0.3);
        let gamma = rng.gen_range(0.5..2.5);
        let d = LevelDistribution::with_geometric_tail(&[h1, h2], gamma).unwrap();
        for i in 1..60u32 {
            if (d.tail_prob(i) - d.tail_prob(i + 1) - d.pmf(i)).abs() > 1e-12 {
                tail_ok = false;
            }
        }
        let u = rng.gen_range(1e-9..1.0 - 1e-9);
        let k = d.inverse_cdf(u);
        if d.cdf(k) < u || (k > 1 && d.cdf(k - 1) >= u) {
            tail_ok = false;
        }
    }
    checks.push(OracleCheck {
        name: "distribution tail identities",
        passed: tail_ok,
        detail: "pmf/tail/inverse-cdf consistency".into(),
    });

    // Moment merging.
    let mut acc_all = RunningMoments::new();
    let mut acc_a = RunningMoments::new();
    let mut acc_b = RunningMoments::new();
    for i in 0..10_000 {
        let v: f64 = rng.gen_range(-2.0..2.0);
        acc_all.update(v, 1.0).unwrap();
        if i % 3 == 0 {
            acc_a.update(v, 1.0).unwrap();
        } else {
            acc_b.update(v, 1.0).unwrap();
        }
    }
    let merged = RunningMoments::merge(&acc_a, &acc_b);
    let merge_ok = (merged.mean() - acc_all.mean()).abs() < 1e-10
        && (merged.variance().unwrap() - acc_all.variance().unwrap()).abs() < 1e-10;
    checks.push(OracleCheck {
        name: "moment merge consistency",
        passed: merge_ok,
        detail: "merge equals sequential accumulation".into(),
    });

    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det_config() -> ExperimentConfig {
        ExperimentConfig {
            model: ModelToken::Det,
            families: vec![FamilyToken::Single],
            schemes: vec![
                SchemeToken::Iid,
                SchemeToken::Stratified,
                SchemeToken::Systematic,
                SchemeToken::Residual,
            ],
            ns: vec![8, 64],
            replications: 50,
            seed: 7,
            dist: DistSource::Default,
            threads: Some(2),
            truth_override: None,
        }
    }

    #[test]
    fn deterministic_chain_smoke_has_zero_ire() {
        let report = run_experiment(&det_config()).unwrap();
        assert_eq!(report.cells.len(), 8);
        for cell in &report.cells {
            assert_eq!(cell.ire, 0.0, "{}/{}/{}", cell.family, cell.scheme, cell.n);
            assert_eq!(cell.mean, 1.0);
            // Unit-cost chain: each replication costs exactly n draws.
            assert_eq!(cell.mean_cost, cell.n as f64);
        }
    }

    #[test]
    fn report_is_reproducible_across_threads_and_runs() {
        let mut config = det_config();
        config.schemes.push(SchemeToken::Poisson);
        let reference = run_experiment(&config).unwrap().canonical();
        for threads in [1usize, 4, 8] {
            config.threads = Some(threads);
            let report = run_experiment(&config).unwrap().canonical();
            let mut a = Vec::new();
            let mut b = Vec::new();
            emit_report(&reference, ReportFormat::Csv, &mut a).unwrap();
            emit_report(&report, ReportFormat::Csv, &mut b).unwrap();
            assert_eq!(a, b, "threads = {threads}");
        }
    }

    #[test]
    fn mean_cost_grows_linearly_in_n() {
        let mut config = det_config();
        config.schemes = vec![SchemeToken::Iid, SchemeToken::Poisson];
        config.ns = vec![16, 64, 256, 1024];
        config.replications = 400;
        let report = run_experiment(&config).unwrap();
        for scheme in ["iid", "poisson"] {
            for &n in &config.ns {
                let cell = report.find("single", scheme, n).unwrap();
                let slope = cell.mean_cost / n as f64;
                // E K = n * sum p_i kappa_i = n for the unit-cost chain.
                assert!((slope - 1.0).abs() < 0.05, "{scheme} n={n} slope {slope}");
            }
        }
    }

    #[test]
    fn report_round_trips_csv_and_json() {
        let report = run_experiment(&det_config()).unwrap();
        for format in [ReportFormat::Csv, ReportFormat::Json] {
            let mut buf = Vec::new();
            emit_report(&report, format, &mut buf).unwrap();
            let back = parse_report(format, &buf[..]).unwrap();
            assert_eq!(back, report);
        }
    }

    #[test]
    fn empty_report_is_header_only_csv() {
        let mut buf = Vec::new();
        emit_report(&ExperimentReport::default(), ReportFormat::Csv, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.trim_end(),
            "model,family,scheme,n,reps,mean,stderr,mean_cost,ire,truth,faults,seconds"
        );
    }

    #[test]
    fn config_validation_rejects_bad_combinations() {
        let mut config = det_config();
        config.families = vec![FamilyToken::CoupledSum];
        config.schemes = vec![SchemeToken::Hybrid];
        assert!(matches!(
            run_experiment(&config),
            Err(HarnessError::Config(_))
        ));

        let mut config = det_config();
        config.replications = 1;
        assert!(matches!(
            run_experiment(&config),
            Err(HarnessError::Config(_))
        ));

        let mut config = det_config();
        config.ns = vec![];
        assert!(matches!(
            run_experiment(&config),
            Err(HarnessError::Config(_))
        ));
    }

    #[test]
    fn token_round_trips() {
        for (token, text) in [
            (SchemeToken::Iid, "iid"),
            (SchemeToken::Stratified, "str"),
            (SchemeToken::CondRes, "cond-res"),
        ] {
            assert_eq!(token.token(), text);
            assert_eq!(text.parse::<SchemeToken>().unwrap(), token);
        }
        assert!("bogus".parse::<SchemeToken>().is_err());
        assert_eq!("modgbm".parse::<ModelToken>().unwrap(), ModelToken::ModGbm);
        assert_eq!(
            "csum".parse::<FamilyToken>().unwrap(),
            FamilyToken::CoupledSum
        );
    }

    #[test]
    fn oracle_check_passes() {
        let checks = oracle_check(2024);
        for check in &checks {
            assert!(check.passed, "{}: {}", check.name, check.detail);
        }
    }

    #[test]
    fn replication_seed_is_stable() {
        let a = replication_seed(7, "gbm/single/str/1000", 3);
        let b = replication_seed(7, "gbm/single/str/1000", 3);
        assert_eq!(a, b);
        assert_ne!(a, replication_seed(7, "gbm/single/str/1000", 4));
        assert_ne!(a, replication_seed(8, "gbm/single/str/1000", 3));
        assert_ne!(a, replication_seed(7, "gbm/single/iid/1000", 3));
    }

    #[test]
    fn dist_file_round_trip() {
        let dist = LevelDistribution::with_geometric_tail(&[0.7, 0.2], 1.5).unwrap();
        let file = DistFile::new(&dist, Some(vec![1, 3, 5]));
        let text = toml::to_string(&file).unwrap();
        let back: DistFile = toml::from_str(&text).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.to_dist().unwrap(), dist);
    }
}
