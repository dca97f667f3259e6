//! Level-difference samplers for SDE terminal-value functionals.
//!
//! Level `i` approximates the payoff on the dyadic mesh with `2^{i-1}` steps
//! (`Y_0 = 0` by convention). Scalar models use the Milstein scheme; the
//! Heston model uses the antithetic truncated Milstein scheme, pairing each
//! fine path with a twin whose consecutive increment pairs are swapped.
//!
//! Consecutive-level differences share one driving Brownian path: the coarse
//! path consumes pairwise sums of the fine increments. Paths are simulated in
//! a streaming cascade, so memory stays `O(max level)` regardless of how deep
//! the randomized level draws reach.
//!
//! Costs are measured in discretisation steps executed, which is the
//! dominant, deterministic work unit and keeps efficiency figures
//! machine-independent. Gaussian generation is folded into the step cost.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use thiserror::Error;

/// One level-difference realization together with its simulation cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaSample {
    pub level: u32,
    pub value: f64,
    pub cost: f64,
}

/// Numerical fault (overflow/NaN) while simulating a level difference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("non-finite state while simulating level {level}")]
pub struct SampleFault {
    pub level: u32,
}

/// Whether multi-level draws share one driving path or use a fresh path per
/// level difference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coupling {
    Coupled,
    Independent,
}

/// Source of level differences consumed by the estimator drivers.
pub trait DeltaSampler: Sync {
    /// One realization of `Delta_i` at `level`, coupled within itself.
    fn sample_delta(&self, level: u32, rng: &mut dyn RngCore) -> Result<DeltaSample, SampleFault>;

    /// Realizations of `Delta_1..Delta_max_level`, sharing one path when
    /// `coupling` is [`Coupling::Coupled`].
    fn sample_path_deltas(
        &self,
        max_level: u32,
        coupling: Coupling,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<DeltaSample>, SampleFault>;
}

// ---------------------------------------------------------------------------
// Models

/// Model dynamics with the benchmark parameterizations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelKind {
    /// `dX = mu X dt + sigma X dB`.
    Gbm { mu: f64, sigma: f64, x0: f64 },
    /// `dX = kappa (theta - X) dt + sigma sqrt(X) dB`.
    Cir {
        kappa: f64,
        theta: f64,
        sigma: f64,
        x0: f64,
    },
    /// Bivariate stochastic-volatility model driven by Brownian motions with
    /// correlation `rho`.
    Heston {
        mu: f64,
        kappa: f64,
        theta: f64,
        sigma: f64,
        rho: f64,
        s0: f64,
        v0: f64,
    },
    /// gBM volatility with time-dependent drift `t^2 X`.
    ModifiedGbm { sigma: f64, x0: f64 },
}

/// Terminal-value functional applied to the simulated state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Payoff {
    /// `x -> exp(-rate) * max(x - strike, 0)`.
    DiscountedCall {
        rate: f64,
        strike: f64,
    },
    Identity,
}

impl Payoff {
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            Payoff::DiscountedCall { rate, strike } => (-rate).exp() * (x - strike).max(0.0),
            Payoff::Identity => x,
        }
    }
}

/// An SDE together with its payoff; horizon is fixed at `T = 1` for the
/// benchmark catalog.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdeModel {
    pub kind: ModelKind,
    pub payoff: Payoff,
    pub horizon: f64,
}

impl SdeModel {
    pub fn new(kind: ModelKind, payoff: Payoff) -> Self {
        match kind {
            ModelKind::Gbm { sigma, .. } | ModelKind::ModifiedGbm { sigma, .. } => {
                assert!(sigma >= 0.0, "sigma must be non-negative")
            }
            ModelKind::Cir {
                kappa,
                theta,
                sigma,
                ..
            } => {
                assert!(
                    kappa > 0.0 && theta > 0.0 && sigma > 0.0,
                    "CIR parameters must be positive"
                )
            }
            ModelKind::Heston {
                kappa,
                theta,
                sigma,
                rho,
                ..
            } => {
                assert!(
                    kappa > 0.0 && theta > 0.0 && sigma >= 0.0,
                    "Heston parameters must be positive"
                );
                assert!(
                    (-1.0..=1.0).contains(&rho),
                    "correlation must lie in [-1, 1]"
                );
            }
        }
        Self {
            kind,
            payoff,
            horizon: 1.0,
        }
    }

    pub fn is_heston(&self) -> bool {
        matches!(self.kind, ModelKind::Heston { .. })
    }
}

/// Benchmark model with its reference value for efficiency reports.
#[derive(Debug, Clone, Copy)]
pub struct CatalogEntry {
    pub token: &'static str,
    pub model: SdeModel,
    pub truth: f64,
}

/// The four benchmark models with their exact parameters and reference
/// expectations.
pub fn model_catalog() -> Vec<CatalogEntry> {
    vec![
        CatalogEntry {
            token: "gbm",
            model: SdeModel::new(
                ModelKind::Gbm {
                    mu: 0.05,
                    sigma: 0.2,
                    x0: 1.0,
                },
                Payoff::DiscountedCall {
                    rate: 0.05,
                    strike: 1.0,
                },
            ),
            truth: 0.104505836,
        },
        CatalogEntry {
            token: "cir",
            model: SdeModel::new(
                ModelKind::Cir {
                    kappa: 5.0,
                    theta: 0.04,
                    sigma: 0.25,
                    x0: 0.04,
                },
                Payoff::DiscountedCall {
                    rate: 0.05,
                    strike: 0.03,
                },
            ),
            truth: 0.01142686,
        },
        CatalogEntry {
            token: "heston",
            model: SdeModel::new(
                ModelKind::Heston {
                    mu: 0.05,
                    kappa: 5.0,
                    theta: 0.04,
                    sigma: 0.25,
                    rho: -0.5,
                    s0: 1.0,
                    v0: 0.04,
                },
                Payoff::DiscountedCall {
                    rate: 0.05,
                    strike: 1.0,
                },
            ),
            truth: 0.10459672,
        },
        CatalogEntry {
            token: "modgbm",
            model: SdeModel::new(
                ModelKind::ModifiedGbm {
                    sigma: 0.1,
                    x0: 1.0,
                },
                Payoff::Identity,
            ),
            truth: 1.395612139,
        },
    ]
}

pub fn catalog_entry(token: &str) -> Option<CatalogEntry> {
    model_catalog().into_iter().find(|e| e.token == token)
}

// ---------------------------------------------------------------------------
// Brownian grids (materialized form)

/// Brownian increments on the dyadic mesh with `2^level` steps over
/// `[0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianGrid {
    pub level: u32,
    pub increments: Vec<f64>,
    pub horizon: f64,
}

impl BrownianGrid {
    pub fn sample(level: u32, horizon: f64, rng: &mut dyn RngCore) -> Self {
        let steps = 1usize << level;
        let sd = (horizon / steps as f64).sqrt();
        let increments = (0..steps)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * sd)
            .collect();
        Self {
            level,
            increments,
            horizon,
        }
    }

    /// Halves the mesh by pairwise summation of increments; the path total is
    /// preserved exactly.
    pub fn coarsen(&self) -> BrownianGrid {
        assert!(self.level >= 1, "level-0 grids cannot be coarsened");
        let increments = self
            .increments
            .chunks_exact(2)
            .map(|c| c[0] + c[1])
            .collect();
        BrownianGrid {
            level: self.level - 1,
            increments,
            horizon: self.horizon,
        }
    }
}

/// Swaps consecutive increment pairs `(g1, g2) -> (g2, g1)`; its own inverse.
pub fn swap_pairs(increments: &[f64]) -> Vec<f64> {
    let mut out = increments.to_vec();
    for pair in out.chunks_exact_mut(2) {
        pair.swap(0, 1);
    }
    out
}

fn scalar_step(kind: &ModelKind, x: f64, t: f64, dt: f64, dw: f64) -> f64 {
    match *kind {
        ModelKind::Gbm { mu, sigma, .. } => {
            x + mu * x * dt + sigma * x * dw + 0.5 * sigma * sigma * x * (dw * dw - dt)
        }
        ModelKind::Cir {
            kappa,
            theta,
            sigma,
            ..
        } => {
            let floored = x.max(0.0);
            x + kappa * (theta - x) * dt
                + sigma * floored.sqrt() * dw
                + 0.25 * sigma * sigma * (dw * dw - dt)
        }
        ModelKind::ModifiedGbm { sigma, .. } => {
            x + t * t * x * dt + sigma * x * dw + 0.5 * sigma * sigma * x * (dw * dw - dt)
        }
        ModelKind::Heston { .. } => unreachable!("Heston is not a scalar model"),
    }
}

/// Terminal state of the Milstein recursion along `grid`.
///
/// Scalar models only; the Heston model goes through [`antithetic_delta`].
/// Non-finite states surface as a [`SampleFault`] rather than propagating.
pub fn milstein_terminal(model: &SdeModel, grid: &BrownianGrid) -> Result<f64, SampleFault> {
    assert!(
        !model.is_heston(),
        "scalar Milstein does not apply to the Heston model"
    );
    let steps = grid.increments.len();
    let dt = grid.horizon / steps as f64;
    let mut x = match model.kind {
        ModelKind::Gbm { x0, .. }
        | ModelKind::Cir { x0, .. }
        | ModelKind::ModifiedGbm { x0, .. } => x0,
        ModelKind::Heston { .. } => unreachable!(),
    };
    let mut t = 0.0;
    for &dw in &grid.increments {
        x = scalar_step(&model.kind, x, t, dt, dw);
        t += dt;
        if !x.is_finite() {
            return Err(SampleFault {
                level: grid.level + 1,
            });
        }
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// Streaming path cascade

#[derive(Debug, Clone, Copy)]
struct Terminal {
    plain: f64,
    anti: f64,
}

trait Dynamics {
    type State: Copy;
    fn initial(&self) -> Self::State;
    fn draw(&self, sd: f64, rng: &mut dyn RngCore) -> [f64; 2];
    fn step(&self, x: Self::State, t: f64, dt: f64, noise: [f64; 2]) -> Self::State;
    fn terminal(&self, x: Self::State) -> f64;
    fn finite(&self, x: Self::State) -> bool;
}

struct ScalarDynamics<'a> {
    kind: &'a ModelKind,
}

impl Dynamics for ScalarDynamics<'_> {
    type State = f64;

    fn initial(&self) -> f64 {
        match *self.kind {
            ModelKind::Gbm { x0, .. }
            | ModelKind::Cir { x0, .. }
            | ModelKind::ModifiedGbm { x0, .. } => x0,
            ModelKind::Heston { .. } => unreachable!(),
        }
    }

    fn draw(&self, sd: f64, rng: &mut dyn RngCore) -> [f64; 2] {
        [rng.sample::<f64, _>(StandardNormal) * sd, 0.0]
    }

    fn step(&self, x: f64, t: f64, dt: f64, noise: [f64; 2]) -> f64 {
        scalar_step(self.kind, x, t, dt, noise[0])
    }

    fn terminal(&self, x: f64) -> f64 {
        x
    }

    fn finite(&self, x: f64) -> bool {
        x.is_finite()
    }
}

struct HestonDynamics {
    mu: f64,
    kappa: f64,
    theta: f64,
    sigma: f64,
    rho: f64,
    s0: f64,
    v0: f64,
}

impl Dynamics for HestonDynamics {
    type State = (f64, f64);

    fn initial(&self) -> (f64, f64) {
        (self.s0, self.v0)
    }

    fn draw(&self, sd: f64, rng: &mut dyn RngCore) -> [f64; 2] {
        [
            rng.sample::<f64, _>(StandardNormal) * sd,
            rng.sample::<f64, _>(StandardNormal) * sd,
        ]
    }

    /// Truncated Milstein update: Milstein without Levy areas, variance
    /// floored at zero before square roots.
    fn step(&self, (s, v): (f64, f64), _t: f64, dt: f64, noise: [f64; 2]) -> (f64, f64) {
        let (w1, w2) = (noise[0], noise[1]);
        let db1 = self.rho * w2 + (1.0 - self.rho * self.rho).sqrt() * w1;
        let db2 = w2;
        let vp = v.max(0.0);
        let s_next = s
            + self.mu * s * dt
            + vp.sqrt() * s * db1
            + 0.5 * vp * s * (db1 * db1 - dt)
            + 0.25 * self.sigma * s * (db1 * db2 - self.rho * dt);
        let v_next = v
            + self.kappa * (self.theta - v) * dt
            + self.sigma * vp.sqrt() * db2
            + 0.25 * self.sigma * self.sigma * (db2 * db2 - dt);
        (s_next, v_next)
    }

    fn terminal(&self, (s, _): (f64, f64)) -> f64 {
        s
    }

    fn finite(&self, (s, v): (f64, f64)) -> bool {
        s.is_finite() && v.is_finite()
    }
}

struct MeshRunner<S> {
    mesh: u32,
    stride: u64,
    dt: f64,
    plain: S,
    t_plain: f64,
    /// Antithetic twin; meshes with at least two increments only.
    anti: Option<S>,
    t_anti: f64,
    pending: Option<[f64; 2]>,
    acc: [f64; 2],
    done: u64,
}

/// Simulates one driving path at the finest of `meshes` and returns the
/// terminal (plain, antithetic) payoff arguments at every requested mesh.
/// Coarser meshes consume pairwise-summed increments of the same path;
/// `anti[k]` asks for an antithetic twin at `meshes[k]`.
fn run_path<D: Dynamics>(
    dynamics: &D,
    horizon: f64,
    meshes: &[u32],
    anti: &[bool],
    rng: &mut dyn RngCore,
) -> Result<Vec<Terminal>, SampleFault> {
    debug_assert!(!meshes.is_empty());
    debug_assert_eq!(meshes.len(), anti.len());
    debug_assert!(meshes.windows(2).all(|w| w[0] < w[1]));
    let finest = *meshes.last().unwrap();
    let total_steps = 1u64 << finest;
    let fine_sd = (horizon / total_steps as f64).sqrt();

    let mut runners: Vec<MeshRunner<D::State>> = meshes
        .iter()
        .zip(anti)
        .map(|(&mesh, &wants_anti)| MeshRunner {
            mesh,
            stride: 1u64 << (finest - mesh),
            dt: horizon / (1u64 << mesh) as f64,
            plain: dynamics.initial(),
            t_plain: 0.0,
            anti: (wants_anti && mesh >= 1).then(|| dynamics.initial()),
            t_anti: 0.0,
            pending: None,
            acc: [0.0; 2],
            done: 0,
        })
        .collect();

    for step in 1..=total_steps {
        let noise = dynamics.draw(fine_sd, rng);
        for runner in &mut runners {
            runner.acc[0] += noise[0];
            runner.acc[1] += noise[1];
            if step % runner.stride == 0 {
                let g = runner.acc;
                runner.acc = [0.0; 2];
                runner.plain = dynamics.step(runner.plain, runner.t_plain, runner.dt, g);
                runner.t_plain += runner.dt;
                if !dynamics.finite(runner.plain) {
                    return Err(SampleFault {
                        level: runner.mesh + 1,
                    });
                }
                if let Some(anti) = runner.anti.as_mut() {
                    if runner.done % 2 == 0 {
                        runner.pending = Some(g);
                    } else {
                        let first = runner.pending.take().expect("buffered pair increment");
                        *anti = dynamics.step(*anti, runner.t_anti, runner.dt, g);
                        runner.t_anti += runner.dt;
                        *anti = dynamics.step(*anti, runner.t_anti, runner.dt, first);
                        runner.t_anti += runner.dt;
                        if !dynamics.finite(*anti) {
                            return Err(SampleFault {
                                level: runner.mesh + 1,
                            });
                        }
                    }
                }
                runner.done += 1;
            }
        }
    }

    Ok(runners
        .into_iter()
        .map(|runner| {
            let plain = dynamics.terminal(runner.plain);
            let anti = runner.anti.map_or(plain, |a| dynamics.terminal(a));
            Terminal { plain, anti }
        })
        .collect())
}

/// `anti[k]` requests the antithetic twin at `meshes[k]`; scalar models
/// ignore it (their twin equals the plain path).
fn model_terminals(
    model: &SdeModel,
    meshes: &[u32],
    anti: &[bool],
    rng: &mut dyn RngCore,
) -> Result<Vec<Terminal>, SampleFault> {
    match model.kind {
        ModelKind::Heston {
            mu,
            kappa,
            theta,
            sigma,
            rho,
            s0,
            v0,
        } => {
            let dynamics = HestonDynamics {
                mu,
                kappa,
                theta,
                sigma,
                rho,
                s0,
                v0,
            };
            run_path(&dynamics, model.horizon, meshes, anti, rng)
        }
        ref kind => {
            let no_anti = vec![false; meshes.len()];
            run_path(
                &ScalarDynamics { kind },
                model.horizon,
                meshes,
                &no_anti,
                rng,
            )
        }
    }
}

// ---------------------------------------------------------------------------
// Sampler

/// Level-difference sampler for one SDE model.
///
/// Stateless apart from the caller-owned random stream; share one instance
/// read-only across threads and give each replication its own stream.
#[derive(Debug, Clone, Copy)]
pub struct SdeSampler {
    model: SdeModel,
}

impl SdeSampler {
    pub fn new(model: SdeModel) -> Self {
        Self { model }
    }

    pub fn model(&self) -> &SdeModel {
        &self.model
    }

    /// Steps executed for one mesh evaluation, including the antithetic twin
    /// for the Heston scheme.
    fn mesh_cost(&self, mesh: u32) -> f64 {
        let steps = (1u64 << mesh) as f64;
        if self.model.is_heston() && mesh >= 1 {
            2.0 * steps
        } else {
            steps
        }
    }

    /// `Y_fine - Y_coarse` between two physical levels from one shared path;
    /// `coarse_level = 0` means `Y_0 = 0`.
    pub fn delta_between(
        &self,
        coarse_level: u32,
        fine_level: u32,
        rng: &mut dyn RngCore,
    ) -> Result<DeltaSample, SampleFault> {
        assert!(fine_level >= 1 && coarse_level < fine_level);
        let fine_mesh = fine_level - 1;
        let payoff = &self.model.payoff;
        let (value, cost) = if coarse_level == 0 {
            let terms = model_terminals(&self.model, &[fine_mesh], &[true], rng)?;
            let value = 0.5 * (payoff.apply(terms[0].plain) + payoff.apply(terms[0].anti));
            (value, self.mesh_cost(fine_mesh))
        } else {
            let coarse_mesh = coarse_level - 1;
            let terms =
                model_terminals(&self.model, &[coarse_mesh, fine_mesh], &[false, true], rng)?;
            let fine = 0.5 * (payoff.apply(terms[1].plain) + payoff.apply(terms[1].anti));
            let value = fine - payoff.apply(terms[0].plain);
            (
                value,
                self.mesh_cost(fine_mesh) + (1u64 << coarse_mesh) as f64,
            )
        };
        Ok(DeltaSample {
            level: fine_level,
            value,
            cost,
        })
    }

    /// Differences along an ascending ladder of physical levels. In coupled
    /// mode all terminals come from a single driving path: each terminal
    /// evaluation is charged once and generating the shared grid is charged
    /// at the finest level. In independent mode every rung uses a fresh path
    /// coupled within itself, costed like [`Self::delta_between`].
    pub fn path_deltas_along(
        &self,
        levels: &[u32],
        coupling: Coupling,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<DeltaSample>, SampleFault> {
        assert!(!levels.is_empty());
        assert!(levels[0] >= 1 && levels.windows(2).all(|w| w[0] < w[1]));
        match coupling {
            Coupling::Independent => {
                let mut out = Vec::with_capacity(levels.len());
                let mut prev = 0u32;
                for &level in levels {
                    out.push(self.delta_between(prev, level, rng)?);
                    prev = level;
                }
                Ok(out)
            }
            Coupling::Coupled => {
                let meshes: Vec<u32> = levels.iter().map(|&l| l - 1).collect();
                let anti = vec![true; meshes.len()];
                let terms = model_terminals(&self.model, &meshes, &anti, rng)?;
                let payoff = &self.model.payoff;
                let mut out = Vec::with_capacity(levels.len());
                let mut coarse = 0.0;
                for (idx, &level) in levels.iter().enumerate() {
                    let fine =
                        0.5 * (payoff.apply(terms[idx].plain) + payoff.apply(terms[idx].anti));
                    out.push(DeltaSample {
                        level,
                        value: fine - coarse,
                        cost: self.mesh_cost(meshes[idx]),
                    });
                    coarse = payoff.apply(terms[idx].plain);
                }
                // Shared-grid generation, charged once at the finest mesh.
                out.last_mut().expect("non-empty ladder").cost +=
                    (1u64 << meshes.last().unwrap()) as f64;
                Ok(out)
            }
        }
    }
}

impl DeltaSampler for SdeSampler {
    fn sample_delta(&self, level: u32, rng: &mut dyn RngCore) -> Result<DeltaSample, SampleFault> {
        assert!(level >= 1);
        self.delta_between(level.saturating_sub(1), level, rng)
    }

    fn sample_path_deltas(
        &self,
        max_level: u32,
        coupling: Coupling,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<DeltaSample>, SampleFault> {
        let levels: Vec<u32> = (1..=max_level).collect();
        self.path_deltas_along(&levels, coupling, rng)
    }
}

/// One coupled level difference; convenience wrapper over [`SdeSampler`].
pub fn sample_delta_coupled(
    model: &SdeModel,
    level: u32,
    rng: &mut dyn RngCore,
) -> Result<DeltaSample, SampleFault> {
    SdeSampler::new(*model).sample_delta(level, rng)
}

/// Level difference under the antithetic truncated Milstein scheme.
pub fn antithetic_delta(
    model: &SdeModel,
    level: u32,
    rng: &mut dyn RngCore,
) -> Result<DeltaSample, SampleFault> {
    assert!(
        model.is_heston(),
        "the antithetic scheme is wired to the Heston model"
    );
    SdeSampler::new(*model).sample_delta(level, rng)
}

/// Differences for levels `1..=max_level`; see
/// [`SdeSampler::path_deltas_along`] for the coupling semantics.
pub fn sample_path_deltas(
    model: &SdeModel,
    max_level: u32,
    coupling: Coupling,
    rng: &mut dyn RngCore,
) -> Result<Vec<DeltaSample>, SampleFault> {
    SdeSampler::new(*model).sample_path_deltas(max_level, coupling, rng)
}

/// Re-indexes a sampler along a subsequence of physical levels: drawn index
/// `k` maps to the difference `Y_{J_k} - Y_{J_{k-1}}`. Reported levels are
/// the indices `k`, so index-space level distributions weight correctly;
/// costs remain physical.
#[derive(Debug, Clone)]
pub struct SubsequenceSampler {
    inner: SdeSampler,
    levels: Vec<u32>,
}

impl SubsequenceSampler {
    pub fn new(inner: SdeSampler, levels: Vec<u32>) -> Self {
        assert!(!levels.is_empty());
        assert!(levels[0] >= 1 && levels.windows(2).all(|w| w[0] < w[1]));
        Self { inner, levels }
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }
}

impl DeltaSampler for SubsequenceSampler {
    fn sample_delta(&self, level: u32, rng: &mut dyn RngCore) -> Result<DeltaSample, SampleFault> {
        let k = level as usize;
        assert!(
            k >= 1 && k <= self.levels.len(),
            "index {level} outside the subsequence"
        );
        let coarse = if k == 1 { 0 } else { self.levels[k - 2] };
        let mut delta = self.inner.delta_between(coarse, self.levels[k - 1], rng)?;
        delta.level = level;
        Ok(delta)
    }

    fn sample_path_deltas(
        &self,
        max_level: u32,
        coupling: Coupling,
        rng: &mut dyn RngCore,
    ) -> Result<Vec<DeltaSample>, SampleFault> {
        let k = max_level as usize;
        assert!(
            k >= 1 && k <= self.levels.len(),
            "index {max_level} outside the subsequence"
        );
        let mut deltas = self
            .inner
            .path_deltas_along(&self.levels[..k], coupling, rng)?;
        for (idx, delta) in deltas.iter_mut().enumerate() {
            delta.level = idx as u32 + 1;
        }
        Ok(deltas)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gbm() -> SdeModel {
        catalog_entry("gbm").unwrap().model
    }

    #[test]
    fn coarsen_sums_pairs() {
        let grid = BrownianGrid {
            level: 1,
            increments: vec![0.25, -1.0],
            horizon: 1.0,
        };
        let coarse = grid.coarsen();
        assert_eq!(coarse.level, 0);
        assert_eq!(coarse.increments, vec![-0.75]);

        let ones = BrownianGrid {
            level: 3,
            increments: vec![1.0; 8],
            horizon: 1.0,
        };
        let coarse = ones.coarsen();
        assert_eq!(coarse.increments, vec![2.0; 4]);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let grid = BrownianGrid::sample(6, 1.0, &mut rng);
        let total: f64 = grid.increments.iter().sum();
        let coarse_total: f64 = grid.coarsen().increments.iter().sum();
        assert!((total - coarse_total).abs() < 1e-14);
    }

    #[test]
    #[should_panic(expected = "cannot be coarsened")]
    fn coarsen_rejects_level_zero() {
        BrownianGrid {
            level: 0,
            increments: vec![0.0],
            horizon: 1.0,
        }
        .coarsen();
    }

    #[test]
    fn milstein_one_step_hand_value() {
        let grid = BrownianGrid {
            level: 0,
            increments: vec![0.0],
            horizon: 1.0,
        };
        let x = milstein_terminal(&gbm(), &grid).unwrap();
        assert!((x - 1.03).abs() < 1e-15, "{x}");
    }

    #[test]
    fn zero_volatility_reduces_to_euler() {
        let model = SdeModel::new(
            ModelKind::Gbm {
                mu: 0.07,
                sigma: 0.0,
                x0: 2.0,
            },
            Payoff::Identity,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let grid = BrownianGrid::sample(5, 1.0, &mut rng);
        let x = milstein_terminal(&model, &grid).unwrap();
        let dt = 1.0 / 32.0;
        let mut euler = 2.0;
        for _ in 0..32 {
            euler += 0.07 * euler * dt;
        }
        assert!((x - euler).abs() < 1e-12);
    }

    #[test]
    fn gbm_terminal_mean_matches_closed_form() {
        let model = SdeModel::new(
            ModelKind::Gbm {
                mu: 0.05,
                sigma: 0.2,
                x0: 1.0,
            },
            Payoff::Identity,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut acc = crate::stats::RunningMoments::new();
        for _ in 0..1_000_000 {
            let grid = BrownianGrid::sample(6, 1.0, &mut rng);
            acc.update(milstein_terminal(&model, &grid).unwrap(), 0.0)
                .unwrap();
        }
        let target = (0.05f64).exp();
        let band = 4.0 * acc.std_error().unwrap() + 5e-4;
        assert!(
            (acc.mean() - target).abs() < band,
            "mean {} target {target}",
            acc.mean()
        );
    }

    #[test]
    fn level_one_delta_is_single_step_payoff() {
        let sampler = SdeSampler::new(gbm());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let delta = sampler.sample_delta(1, &mut rng).unwrap();
        assert_eq!(delta.cost, 1.0);
        assert_eq!(delta.level, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = BrownianGrid::sample(0, 1.0, &mut rng);
        let direct = gbm()
            .payoff
            .apply(milstein_terminal(&gbm(), &grid).unwrap());
        assert_eq!(delta.value, direct);
    }

    #[test]
    fn streamed_pair_matches_materialized_grids() {
        // modgbm included: its time-dependent drift pins the left-endpoint
        // time bookkeeping of the streaming cascade.
        for token in ["gbm", "cir", "modgbm"] {
            let model = catalog_entry(token).unwrap().model;
            let sampler = SdeSampler::new(model);
            for level in 2..=9u32 {
                let mut rng = ChaCha8Rng::seed_from_u64(100 + u64::from(level));
                let delta = sampler.sample_delta(level, &mut rng).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(100 + u64::from(level));
                let fine = BrownianGrid::sample(level - 1, 1.0, &mut rng);
                let coarse = fine.coarsen();
                let expect = model
                    .payoff
                    .apply(milstein_terminal(&model, &fine).unwrap())
                    - model
                        .payoff
                        .apply(milstein_terminal(&model, &coarse).unwrap());
                assert_eq!(delta.value, expect, "{token} level {level}");
                assert_eq!(
                    delta.cost,
                    (1u64 << (level - 1)) as f64 + (1u64 << (level - 2)) as f64
                );
            }
        }
    }

    #[test]
    fn coupled_path_telescopes_to_finest_payoff() {
        for token in ["gbm", "cir", "modgbm"] {
            let entry = catalog_entry(token).unwrap();
            let sampler = SdeSampler::new(entry.model);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let deltas = sampler
                .sample_path_deltas(5, Coupling::Coupled, &mut rng)
                .unwrap();
            let total: f64 = deltas.iter().map(|d| d.value).sum();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let fine = BrownianGrid::sample(4, 1.0, &mut rng);
            let direct = entry
                .model
                .payoff
                .apply(milstein_terminal(&entry.model, &fine).unwrap());
            assert!(
                (total - direct).abs() < 1e-12,
                "{token}: {total} vs {direct}"
            );
        }
    }

    #[test]
    fn single_level_path_matches_pair_sampler_in_law() {
        let sampler = SdeSampler::new(gbm());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let path = sampler
            .sample_path_deltas(1, Coupling::Coupled, &mut rng)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pair = sampler.sample_delta(1, &mut rng).unwrap();
        assert_eq!(path[0].value, pair.value);
        assert_eq!(path[0].level, pair.level);
        // Path mode charges the shared-grid generation on top of the
        // terminal evaluation; pair mode folds it into the stepping.
        assert_eq!(pair.cost, 1.0);
        assert_eq!(path[0].cost, 2.0);
    }

    #[test]
    fn coupled_path_cost_includes_grid_generation() {
        let sampler = SdeSampler::new(gbm());
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let deltas = sampler
            .sample_path_deltas(4, Coupling::Coupled, &mut rng)
            .unwrap();
        let total: f64 = deltas.iter().map(|d| d.cost).sum();
        // terminals 1 + 2 + 4 + 8, plus 8 for generating the shared grid.
        assert_eq!(total, 23.0);
        let independent = sampler
            .sample_path_deltas(4, Coupling::Independent, &mut rng)
            .unwrap();
        let total: f64 = independent.iter().map(|d| d.cost).sum();
        // pairs: 1 + (2+1) + (4+2) + (8+4).
        assert_eq!(total, 22.0);
    }

    #[test]
    fn independent_mode_levels_uncorrelated() {
        let sampler = SdeSampler::new(gbm());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let reps = 100_000;
        let (mut s2, mut s3, mut s23) = (
            crate::stats::RunningMoments::new(),
            crate::stats::RunningMoments::new(),
            0.0,
        );
        for _ in 0..reps {
            let deltas = sampler
                .sample_path_deltas(3, Coupling::Independent, &mut rng)
                .unwrap();
            s2.update(deltas[1].value, 0.0).unwrap();
            s3.update(deltas[2].value, 0.0).unwrap();
            s23 += deltas[1].value * deltas[2].value;
        }
        let cov = s23 / reps as f64 - s2.mean() * s3.mean();
        let corr = cov / (s2.variance().unwrap() * s3.variance().unwrap()).sqrt();
        let band = 4.0 / (reps as f64).sqrt();
        assert!(corr.abs() < band, "corr {corr}");
    }

    #[test]
    fn delta_mean_agrees_with_level_mean_difference() {
        // Two independent routes to E[Y_3 - Y_2].
        let sampler = SdeSampler::new(gbm());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut delta_acc = crate::stats::RunningMoments::new();
        let mut diff_acc = crate::stats::RunningMoments::new();
        let model = gbm();
        for _ in 0..1_000_000 {
            delta_acc
                .update(sampler.sample_delta(3, &mut rng).unwrap().value, 0.0)
                .unwrap();
            let fine = BrownianGrid::sample(2, 1.0, &mut rng);
            let coarse = fine.coarsen();
            let y3 = model
                .payoff
                .apply(milstein_terminal(&model, &fine).unwrap());
            let y2 = model
                .payoff
                .apply(milstein_terminal(&model, &coarse).unwrap());
            diff_acc.update(y3 - y2, 0.0).unwrap();
        }
        let band = 4.0
            * (delta_acc.std_error().unwrap().powi(2) + diff_acc.std_error().unwrap().powi(2))
                .sqrt();
        assert!((delta_acc.mean() - diff_acc.mean()).abs() < band);
    }

    #[test]
    fn delta_variance_decays_with_level() {
        let sampler = SdeSampler::new(gbm());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut var4 = crate::stats::RunningMoments::new();
        let mut var6 = crate::stats::RunningMoments::new();
        for _ in 0..100_000 {
            var4.update(sampler.sample_delta(4, &mut rng).unwrap().value, 0.0)
                .unwrap();
            var6.update(sampler.sample_delta(6, &mut rng).unwrap().value, 0.0)
                .unwrap();
        }
        assert!(var6.variance().unwrap() < var4.variance().unwrap());
    }

    #[test]
    fn cost_is_deterministic_per_level() {
        let sampler = SdeSampler::new(catalog_entry("heston").unwrap().model);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for level in [1u32, 2, 3, 5] {
            let expect = if level == 1 {
                1.0
            } else {
                2.0 * (1u64 << (level - 1)) as f64 + (1u64 << (level - 2)) as f64
            };
            for _ in 0..5 {
                let delta = sampler.sample_delta(level, &mut rng).unwrap();
                assert_eq!(delta.cost, expect);
            }
        }
    }

    #[test]
    fn swap_pairs_is_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let grid = BrownianGrid::sample(5, 1.0, &mut rng);
        let swapped = swap_pairs(&grid.increments);
        assert_ne!(swapped, grid.increments);
        assert_eq!(swap_pairs(&swapped), grid.increments);
    }

    #[test]
    fn heston_antithetic_matches_materialized_reference() {
        // Reference: draw two independent grids, coarsen and swap explicitly.
        let entry = catalog_entry("heston").unwrap();
        let (mu, kappa, theta, sigma, rho, s0, v0) = match entry.model.kind {
            ModelKind::Heston {
                mu,
                kappa,
                theta,
                sigma,
                rho,
                s0,
                v0,
            } => (mu, kappa, theta, sigma, rho, s0, v0),
            _ => unreachable!(),
        };
        let dynamics = HestonDynamics {
            mu,
            kappa,
            theta,
            sigma,
            rho,
            s0,
            v0,
        };
        let level = 4u32;
        let mesh = level - 1;

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let streamed = SdeSampler::new(entry.model)
            .sample_delta(level, &mut rng)
            .unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let steps = 1usize << mesh;
        let sd = (1.0f64 / steps as f64).sqrt();
        let mut w1 = Vec::with_capacity(steps);
        let mut w2 = Vec::with_capacity(steps);
        for _ in 0..steps {
            w1.push(rng.sample::<f64, _>(StandardNormal) * sd);
            w2.push(rng.sample::<f64, _>(StandardNormal) * sd);
        }
        let run = |w1: &[f64], w2: &[f64], dt: f64| {
            let mut x = dynamics.initial();
            let mut t = 0.0;
            for (a, b) in w1.iter().zip(w2) {
                x = dynamics.step(x, t, dt, [*a, *b]);
                t += dt;
            }
            dynamics.terminal(x)
        };
        let dt = 1.0 / steps as f64;
        let fine = run(&w1, &w2, dt);
        let anti = run(&swap_pairs(&w1), &swap_pairs(&w2), dt);
        let cw1: Vec<f64> = w1.chunks_exact(2).map(|c| c[0] + c[1]).collect();
        let cw2: Vec<f64> = w2.chunks_exact(2).map(|c| c[0] + c[1]).collect();
        let coarse = run(&cw1, &cw2, 2.0 * dt);
        let payoff = entry.model.payoff;
        let expect = 0.5 * (payoff.apply(fine) + payoff.apply(anti)) - payoff.apply(coarse);
        assert!(
            (streamed.value - expect).abs() < 1e-12,
            "{} vs {expect}",
            streamed.value
        );
    }

    #[test]
    fn heston_degenerate_volatility_matches_gbm_deltas() {
        // sigma = 0 in the variance equation with v0 = theta freezes V, so the
        // antithetic deltas must match plain coupled deltas of a gBM with the
        // same volatility in distribution.
        let heston = SdeModel::new(
            ModelKind::Heston {
                mu: 0.05,
                kappa: 5.0,
                theta: 0.04,
                sigma: 0.0,
                rho: -0.5,
                s0: 1.0,
                v0: 0.04,
            },
            Payoff::DiscountedCall {
                rate: 0.05,
                strike: 1.0,
            },
        );
        let gbm_like = SdeModel::new(
            ModelKind::Gbm {
                mu: 0.05,
                sigma: 0.2,
                x0: 1.0,
            },
            Payoff::DiscountedCall {
                rate: 0.05,
                strike: 1.0,
            },
        );
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut h = crate::stats::RunningMoments::new();
        let mut g = crate::stats::RunningMoments::new();
        let hs = SdeSampler::new(heston);
        let gs = SdeSampler::new(gbm_like);
        for _ in 0..100_000 {
            h.update(hs.sample_delta(3, &mut rng).unwrap().value, 0.0)
                .unwrap();
            g.update(gs.sample_delta(3, &mut rng).unwrap().value, 0.0)
                .unwrap();
        }
        let band = 4.0 * (h.std_error().unwrap().powi(2) + g.std_error().unwrap().powi(2)).sqrt();
        assert!((h.mean() - g.mean()).abs() < band);
    }

    #[test]
    fn catalog_payoffs_and_truths() {
        let gbm = catalog_entry("gbm").unwrap();
        assert_eq!(gbm.model.payoff.apply(1.0), 0.0);
        assert_eq!(gbm.truth, 0.104505836);

        let cir = catalog_entry("cir").unwrap();
        assert_eq!(cir.model.payoff.apply(0.03), 0.0);
        let at_theta = cir.model.payoff.apply(0.04);
        assert!((at_theta - (-0.05f64).exp() * 0.01).abs() < 1e-15);
        assert_eq!(cir.truth, 0.01142686);

        let modgbm = catalog_entry("modgbm").unwrap();
        assert_eq!(modgbm.model.payoff.apply(1.234), 1.234);
        assert_eq!(modgbm.truth, 1.395612139);
        assert_eq!(catalog_entry("heston").unwrap().truth, 0.10459672);
    }

    #[test]
    fn subsequence_sampler_reindexes() {
        let sampler = SdeSampler::new(gbm());
        let sub = SubsequenceSampler::new(sampler, vec![1, 3, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let deltas = sub
            .sample_path_deltas(3, Coupling::Coupled, &mut rng)
            .unwrap();
        assert_eq!(
            deltas.iter().map(|d| d.level).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
        // Telescoping across the subsequence still reaches the finest payoff.
        let total: f64 = deltas.iter().map(|d| d.value).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let fine = BrownianGrid::sample(3, 1.0, &mut rng);
        let direct = gbm()
            .payoff
            .apply(milstein_terminal(&gbm(), &fine).unwrap());
        assert!((total - direct).abs() < 1e-12);
        // Cost of the middle rung is its fine terminal only.
        assert_eq!(deltas[1].cost, 4.0);
    }
}
