//! Coupled-sum estimation of a CIR payoff, with and without subsequence
//! optimization.
//!
//! All level differences of one draw share a single driving Brownian path.
//! The tuner may skip coarse levels entirely when their differences carry
//! little variance reduction per unit cost; on CIR this pays noticeably.
//!
//! ```text
//! cargo run --release --example coupled_sum_cir
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rmlmc::estimator::sum_estimator;
use rmlmc::level_diff::{catalog_entry, Coupling, DeltaSampler, SdeSampler, SubsequenceSampler};
use rmlmc::scheme::RandScheme;
use rmlmc::stats::RunningMoments;
use rmlmc::tune::{optimal_coupled_sum, optimal_coupled_sum_on, run_pilot};

fn main() {
    let entry = catalog_entry("cir").expect("catalog model");
    let sampler = SdeSampler::new(entry.model);
    let mut rng = ChaCha8Rng::seed_from_u64(99);

    // The coupled-sum objective needs var(Y_ref - Y_i) proxies, estimated
    // from shared paths to a reference level.
    let pilot = run_pilot(&sampler, 8, 30_000, Some(10), &mut rng);

    let ladder: Vec<u32> = (1..=8).collect();
    let consecutive = optimal_coupled_sum_on(&pilot, &ladder).unwrap();
    let optimal = optimal_coupled_sum(&pilot, 8).unwrap();
    println!(
        "consecutive ladder objective: {:.4e}",
        consecutive.objective
    );
    println!(
        "optimal subsequence {:?} objective: {:.4e}",
        optimal.levels, optimal.objective
    );

    let n = 10_000;
    let replications = 500;
    let mut run = |label: &str, dist: &rmlmc::LevelDistribution, sampler: &dyn DeltaSampler| {
        let mut acc = RunningMoments::new();
        for _ in 0..replications {
            let out = sum_estimator(
                dist,
                n,
                RandScheme::Stratified,
                Coupling::Coupled,
                sampler,
                &mut rng,
            )
            .unwrap();
            acc.update(out.estimate, out.cost).unwrap();
        }
        println!(
            "{label:<22} mean {:.6}  IRE {:.4}",
            acc.mean(),
            acc.ire(entry.truth).unwrap()
        );
    };

    run("consecutive ladder:", &consecutive.dist, &sampler);
    let subsequence = SubsequenceSampler::new(sampler, optimal.levels.clone());
    run("optimal subsequence:", &optimal.dist, &subsequence);
    println!("reference value: {:.6}", entry.truth);
}
