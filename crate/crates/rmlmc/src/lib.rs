//! Randomized multilevel Monte Carlo estimators.
//!
//! The crate estimates `E[Y]` for a target that is only reachable through a
//! hierarchy of approximations `Y_1, Y_2, ...` with geometrically growing
//! simulation cost, such as payoffs of time-discretised SDEs. It provides
//!
//! * unbiased estimators built from randomly allocated level differences
//!   (single-term, independent-sum and coupled-sum families),
//! * four randomization schemes for the level draws — i.i.d., uniformly
//!   stratified, systematic and residual sampling — plus Poisson counts,
//!   an idealized multilevel baseline and an MLMC/unbiased hybrid,
//! * SDE level-difference samplers (Milstein and antithetic truncated
//!   Milstein) for four benchmark models,
//! * pilot-based tuning of the level distribution per estimator family,
//! * exact variance oracles on synthetic Gaussian chains, and
//! * a reproducible, parallel experiment harness reporting inverse relative
//!   efficiencies (average cost times mean squared error).
//!
//! Entry points: [`dist::LevelDistribution`] for the level probabilities,
//! [`level_diff::SdeSampler`] or [`analytic::AnalyticChain`] for level
//! differences, the drivers in [`estimator`], and [`harness::run_experiment`]
//! for full replication studies.

pub mod analytic;
pub mod dist;
pub mod estimator;
pub mod harness;
pub mod level_diff;
pub mod scheme;
pub mod stats;
pub mod tune;

pub use dist::LevelDistribution;
pub use estimator::EstimatorOutput;
pub use level_diff::{DeltaSample, DeltaSampler, SdeSampler};
pub use scheme::{LevelAllocation, RandScheme};
pub use stats::RunningMoments;
