//! The general variance formula as an exact oracle.
//!
//! For any randomization whose count moments are available in closed form —
//! multinomial, cumulative, residual, Poisson, deterministic — the estimator
//! variance is a finite double sum over level pairs. This example evaluates
//! it for several schemes on a Gaussian chain and confirms the numbers by
//! simulation.
//!
//! ```text
//! cargo run --release --example variance_oracle
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rmlmc::analytic::{AnalyticChain, ChainMode};
use rmlmc::dist::LevelDistribution;
use rmlmc::estimator::{
    general_variance, mlmc_counts, poisson_levels, single_term, sum_estimator, CountMoments,
    DeltaMoments, MlmcVariant,
};
use rmlmc::level_diff::Coupling;
use rmlmc::scheme::RandScheme;
use rmlmc::stats::RunningMoments;

fn main() {
    let chain = AnalyticChain::new(
        vec![0.8, 0.35, -0.1, 0.05],
        vec![0.5, 0.3, 0.2, 0.1],
        ChainMode::PartialSum,
    );
    let dist = LevelDistribution::finite(&[0.4, 0.3, 0.2, 0.1]).unwrap();
    let m = chain.len();
    let n = 16u64;
    let delta = DeltaMoments::from_chain(&chain, m);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let reps = 400_000;

    println!("{:<24}{:>12}{:>12}", "scheme", "oracle", "empirical");
    let mut row = |label: &str, oracle: f64, samples: &mut dyn FnMut(&mut ChaCha8Rng) -> f64| {
        let mut acc = RunningMoments::new();
        for _ in 0..reps {
            acc.update(samples(&mut rng), 0.0).unwrap();
        }
        println!("{label:<24}{oracle:>12.6}{:>12.6}", acc.variance().unwrap());
    };

    let counts = CountMoments::multinomial(&dist, n, m);
    row(
        "single-term iid",
        general_variance(&delta, &counts, m).unwrap(),
        &mut |rng| {
            single_term(&dist, n, RandScheme::Iid, &chain, rng)
                .unwrap()
                .estimate
        },
    );

    let counts = CountMoments::residual(&dist, n, m);
    row(
        "single-term residual",
        general_variance(&delta, &counts, m).unwrap(),
        &mut |rng| {
            single_term(&dist, n, RandScheme::Residual, &chain, rng)
                .unwrap()
                .estimate
        },
    );

    let counts = CountMoments::cumulative_multinomial(&dist, n, m);
    row(
        "coupled sum iid",
        general_variance(&delta, &counts, m).unwrap(),
        &mut |rng| {
            sum_estimator(&dist, n, RandScheme::Iid, Coupling::Coupled, &chain, rng)
                .unwrap()
                .estimate
        },
    );

    let counts = CountMoments::poisson(&dist, n, m);
    row(
        "poisson levels",
        general_variance(&delta, &counts, m).unwrap(),
        &mut |rng| poisson_levels(&dist, n, &chain, rng).unwrap().estimate,
    );

    let allocation = mlmc_counts(&dist, n, MlmcVariant::Single);
    let counts = CountMoments::deterministic(&allocation);
    row(
        "idealized multilevel",
        general_variance(&delta, &counts, m).unwrap(),
        &mut |rng| {
            rmlmc::estimator::mlmc_idealized(&dist, n, MlmcVariant::Single, &chain, rng)
                .unwrap()
                .estimate
        },
    );
}
