//! Streaming moments and efficiency summaries for replication studies.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("non-finite value {0} rejected")]
    NonFinite(f64),
    #[error("operation needs at least {needed} observations, have {got}")]
    InsufficientCount { needed: u64, got: u64 },
    #[error("confidence level must lie in (0, 1), got {0}")]
    BadLevel(f64),
}

/// Single-pass count/mean/variance accumulator with cost tracking.
///
/// Updates use Welford's recurrence; [`merge`](RunningMoments::merge) combines
/// two accumulators with the pairwise formula, so replications can be
/// aggregated across threads in any grouping.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningMoments {
    count: u64,
    mean: f64,
    m2: f64,
    cost_sum: f64,
}

impl RunningMoments {
    pub fn new() -> Self {
        Self::default()
    }

    /// Folds in one observation and its simulation cost.
    pub fn update(&mut self, value: f64, cost: f64) -> Result<(), StatsError> {
        if !value.is_finite() {
            return Err(StatsError::NonFinite(value));
        }
        self.count += 1;
        let delta = value - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (value - self.mean);
        self.cost_sum += cost;
        Ok(())
    }

    /// Combines two accumulators; equals sequential processing of the
    /// concatenated stream up to floating-point rounding.
    pub fn merge(a: &Self, b: &Self) -> Self {
        if a.count == 0 {
            return *b;
        }
        if b.count == 0 {
            return *a;
        }
        let count = a.count + b.count;
        let delta = b.mean - a.mean;
        let mean = a.mean + delta * b.count as f64 / count as f64;
        let m2 = a.m2 + b.m2 + delta * delta * a.count as f64 * b.count as f64 / count as f64;
        Self {
            count,
            mean,
            m2,
            cost_sum: a.cost_sum + b.cost_sum,
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn cost_sum(&self) -> f64 {
        self.cost_sum
    }

    pub fn mean_cost(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.cost_sum / self.count as f64
        }
    }

    /// Sample variance `m2 / (count - 1)`; absent below two observations.
    pub fn variance(&self) -> Option<f64> {
        (self.count >= 2).then(|| self.m2 / (self.count - 1) as f64)
    }

    pub fn std_error(&self) -> Option<f64> {
        self.variance().map(|v| (v / self.count as f64).sqrt())
    }

    /// Inverse relative efficiency: average cost times the plain average of
    /// squared deviations from `truth` (the biased `1/count` mean square).
    pub fn ire(&self, truth: f64) -> Result<f64, StatsError> {
        if self.count < 2 {
            return Err(StatsError::InsufficientCount {
                needed: 2,
                got: self.count,
            });
        }
        let msd = self.m2 / self.count as f64 + (self.mean - truth).powi(2);
        Ok(self.mean_cost() * msd)
    }

    /// Normal-approximation confidence interval `mean ± z sqrt(var / count)`.
    pub fn normal_ci(&self, level: f64) -> Result<(f64, f64), StatsError> {
        if !(0.0 < level && level < 1.0) {
            return Err(StatsError::BadLevel(level));
        }
        if self.count < 30 {
            return Err(StatsError::InsufficientCount {
                needed: 30,
                got: self.count,
            });
        }
        let z = Normal::new(0.0, 1.0)
            .unwrap()
            .inverse_cdf(0.5 + level / 2.0);
        let half = z * self.std_error().unwrap();
        Ok((self.mean - half, self.mean + half))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn mean_and_variance_hand_case() {
        let mut acc = RunningMoments::new();
        for v in [1.0, 2.0, 3.0] {
            acc.update(v, 1.0).unwrap();
        }
        assert_eq!(acc.mean(), 2.0);
        assert!((acc.variance().unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn variance_absent_below_two() {
        let mut acc = RunningMoments::new();
        acc.update(5.0, 0.0).unwrap();
        assert_eq!(acc.variance(), None);
    }

    #[test]
    fn rejects_non_finite() {
        let mut acc = RunningMoments::new();
        assert!(matches!(
            acc.update(f64::NAN, 0.0),
            Err(StatsError::NonFinite(_))
        ));
        assert!(matches!(
            acc.update(f64::INFINITY, 0.0),
            Err(StatsError::NonFinite(_))
        ));
        assert_eq!(acc.count(), 0);
    }

    #[test]
    fn clt_band_on_standard_normals() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut acc = RunningMoments::new();
        for _ in 0..1_000_000 {
            let z: f64 = rng.sample(StandardNormal);
            acc.update(z, 1.0).unwrap();
        }
        assert!(acc.mean().abs() < 4e-3);
        assert!((acc.variance().unwrap() - 1.0).abs() < 0.01);
    }

    #[test]
    fn merge_identity_and_commutativity() {
        let mut a = RunningMoments::new();
        let mut b = RunningMoments::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            a.update(rng.gen::<f64>(), 1.0).unwrap();
        }
        for _ in 0..37 {
            b.update(rng.gen::<f64>() * 3.0, 2.0).unwrap();
        }
        assert_eq!(RunningMoments::merge(&RunningMoments::new(), &a), a);
        let ab = RunningMoments::merge(&a, &b);
        let ba = RunningMoments::merge(&b, &a);
        assert!((ab.mean() - ba.mean()).abs() < 1e-10 * ab.mean().abs().max(1.0));
        assert!((ab.variance().unwrap() - ba.variance().unwrap()).abs() < 1e-10);
    }

    #[test]
    fn merge_matches_sequential_at_random_splits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values: Vec<f64> = (0..5000)
            .map(|_| rng.sample::<f64, _>(StandardNormal) + 2.5)
            .collect();
        let mut sequential = RunningMoments::new();
        for &v in &values {
            sequential.update(v, 1.0).unwrap();
        }
        for _ in 0..1000 {
            let split = rng.gen_range(1..values.len());
            let (left, right) = values.split_at(split);
            let mut a = RunningMoments::new();
            let mut b = RunningMoments::new();
            for &v in left {
                a.update(v, 1.0).unwrap();
            }
            for &v in right {
                b.update(v, 1.0).unwrap();
            }
            let merged = RunningMoments::merge(&a, &b);
            let rel = |x: f64, y: f64| (x - y).abs() / y.abs().max(1e-300);
            assert!(rel(merged.mean(), sequential.mean()) < 1e-10);
            assert!(rel(merged.variance().unwrap(), sequential.variance().unwrap()) < 1e-10);
        }
    }

    #[test]
    fn merge_associative_on_random_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let mut accs = Vec::new();
            for _ in 0..3 {
                let mut acc = RunningMoments::new();
                for _ in 0..rng.gen_range(2..50) {
                    acc.update(rng.sample::<f64, _>(StandardNormal) * 4.0, 1.0)
                        .unwrap();
                }
                accs.push(acc);
            }
            let left = RunningMoments::merge(&RunningMoments::merge(&accs[0], &accs[1]), &accs[2]);
            let right = RunningMoments::merge(&accs[0], &RunningMoments::merge(&accs[1], &accs[2]));
            assert!((left.mean() - right.mean()).abs() / left.mean().abs().max(1.0) < 1e-10);
            assert!(
                (left.variance().unwrap() - right.variance().unwrap()).abs()
                    / left.variance().unwrap().max(1e-300)
                    < 1e-10
            );
        }
    }

    #[test]
    fn numerically_stable_under_large_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut acc = RunningMoments::new();
        for _ in 0..10_000_000u64 {
            let z: f64 = rng.sample(StandardNormal);
            acc.update(1e9 + z, 1.0).unwrap();
        }
        let var = acc.variance().unwrap();
        assert!((var - 1.0).abs() < 0.01, "variance {var}");
    }

    #[test]
    fn ire_hand_cases() {
        let mut acc = RunningMoments::new();
        acc.update(1.0, 1.0).unwrap();
        acc.update(1.0, 1.0).unwrap();
        assert_eq!(acc.ire(1.0).unwrap(), 0.0);

        let mut acc = RunningMoments::new();
        acc.update(0.0, 1.0).unwrap();
        acc.update(2.0, 1.0).unwrap();
        assert!((acc.ire(1.0).unwrap() - 1.0).abs() < 1e-15);

        let mut single = RunningMoments::new();
        single.update(0.3, 1.0).unwrap();
        assert!(single.ire(0.3).is_err());
    }

    #[test]
    fn ci_degenerate_and_width_scaling() {
        let mut acc = RunningMoments::new();
        for _ in 0..64 {
            acc.update(2.0, 1.0).unwrap();
        }
        assert_eq!(acc.normal_ci(0.95).unwrap(), (2.0, 2.0));

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let width = |count: usize, rng: &mut ChaCha8Rng| {
            let mut acc = RunningMoments::new();
            for _ in 0..count {
                acc.update(rng.sample(StandardNormal), 1.0).unwrap();
            }
            let (lo, hi) = acc.normal_ci(0.95).unwrap();
            hi - lo
        };
        let w4 = width(10_000, &mut rng);
        let w6 = width(1_000_000, &mut rng);
        let ratio = w4 / w6;
        assert!((ratio - 10.0).abs() < 0.5, "ratio {ratio}");
    }

    #[test]
    fn ci_coverage_simulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let metas = 1000;
        let per = 100_000;
        let mut covered = 0;
        for _ in 0..metas {
            let mut acc = RunningMoments::new();
            for _ in 0..per {
                acc.update(rng.sample(StandardNormal), 1.0).unwrap();
            }
            let (lo, hi) = acc.normal_ci(0.95).unwrap();
            if lo <= 0.0 && 0.0 <= hi {
                covered += 1;
            }
        }
        assert!(covered >= 930, "coverage {covered}/1000");
    }
}
