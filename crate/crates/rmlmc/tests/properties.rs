//! Property tests for the structural invariants.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rmlmc::dist::LevelDistribution;
use rmlmc::scheme::{self, RandScheme};
use rmlmc::stats::RunningMoments;

fn arb_dist() -> impl Strategy<Value = LevelDistribution> {
    (
        proptest::collection::vec(0.01f64..1.0, 1..6),
        0.5f64..2.5,
        proptest::bool::ANY,
    )
        .prop_map(|(raw, gamma, finite)| {
            let total: f64 = raw.iter().sum();
            if finite {
                let head: Vec<f64> = raw.iter().map(|p| p / total).collect();
                LevelDistribution::finite(&head).unwrap()
            } else {
                // Keep at least 20% of the mass in the tail.
                let head: Vec<f64> = raw.iter().map(|p| 0.8 * p / total).collect();
                LevelDistribution::with_geometric_tail(&head, gamma).unwrap()
            }
        })
}

proptest! {
    #[test]
    fn tail_prob_decrements_equal_pmf(dist in arb_dist()) {
        for i in 1..50u32 {
            let diff = dist.tail_prob(i) - dist.tail_prob(i + 1);
            prop_assert!((diff - dist.pmf(i)).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_cdf_satisfies_min_cdf_definition(dist in arb_dist(), u in 1e-9f64..1.0) {
        prop_assume!(u < 1.0);
        let k = dist.inverse_cdf(u);
        prop_assert!(dist.cdf(k) >= u);
        if k > 1 {
            prop_assert!(dist.cdf(k - 1) < u);
        }
    }

    #[test]
    fn allocations_conserve_draw_count(dist in arb_dist(), n in 1u64..512, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for randomization in RandScheme::ALL {
            let alloc = match randomization {
                RandScheme::Iid => scheme::draw_iid(&dist, n, &mut rng),
                RandScheme::Stratified => scheme::draw_stratified(&dist, n, &mut rng),
                RandScheme::Systematic => scheme::draw_systematic(&dist, n, &mut rng),
                RandScheme::Residual => scheme::draw_residual(&dist, n, &mut rng),
            };
            prop_assert_eq!(alloc.total(), n);
            let draws = alloc.draws.clone().unwrap();
            prop_assert_eq!(draws.len() as u64, n);
            // Cumulative counts telescope back to the plain counts.
            let tilde = scheme::cumulative_counts(&alloc);
            for (&level, &count) in &alloc.counts {
                let here = tilde.get(&level).copied().unwrap_or(0);
                let next = tilde.get(&(level + 1)).copied().unwrap_or(0);
                prop_assert_eq!(here - next, count);
            }
        }
    }

    #[test]
    fn merged_moments_match_sequential(values in proptest::collection::vec(-1e3f64..1e3, 2..200), split in 0usize..200) {
        let split = split % values.len();
        let mut sequential = RunningMoments::new();
        for &v in &values {
            sequential.update(v, 1.0).unwrap();
        }
        let mut a = RunningMoments::new();
        let mut b = RunningMoments::new();
        for &v in &values[..split] {
            a.update(v, 1.0).unwrap();
        }
        for &v in &values[split..] {
            b.update(v, 1.0).unwrap();
        }
        let merged = RunningMoments::merge(&a, &b);
        prop_assert!((merged.mean() - sequential.mean()).abs() <= 1e-10 * sequential.mean().abs().max(1.0));
        if let (Some(mv), Some(sv)) = (merged.variance(), sequential.variance()) {
            prop_assert!((mv - sv).abs() <= 1e-10 * sv.max(1.0));
        }
    }
}
