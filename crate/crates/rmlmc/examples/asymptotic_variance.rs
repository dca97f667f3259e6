//! Convergence of `n * var(Z^{(n)})` to the asymptotic variance
//! `sigma_inf^2 = sum var(Delta_i) / p_i` for residual sampling, computed
//! exactly through the count-moment oracle — no simulation involved.
//!
//! The i.i.d. scheme stays at `n * var(Z^{(1)})`, which exceeds the limit by
//! `sum (E Delta_i)^2 / p_i - (E Y)^2`; the gap is what stratification wins.
//!
//! ```text
//! cargo run --example asymptotic_variance
//! ```

use rmlmc::analytic::{
    exact_sigma_infty, exact_single_term_moments, AnalyticChain, ChainMode, SigmaFamily,
};
use rmlmc::dist::LevelDistribution;
use rmlmc::estimator::{general_variance, CountMoments, DeltaMoments};

fn main() {
    let m = 10usize;
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

    let sigma = exact_sigma_infty(&chain, &dist, SigmaFamily::SingleTerm).unwrap();
    let single = exact_single_term_moments(&chain, &dist).unwrap().variance;
    let delta = DeltaMoments::from_chain(&chain, m);

    println!("sigma_inf^2 = {sigma:.6}, n var(Z_iid^(n)) = {single:.6}");
    println!("{:>8}{:>16}{:>16}", "n", "n var(res)", "rel gap");
    for n in [10u64, 100, 1_000, 10_000, 100_000] {
        let counts = CountMoments::residual(&dist, n, m);
        let var = general_variance(&delta, &counts, m).unwrap();
        let scaled = n as f64 * var;
        println!(
            "{n:>8}{scaled:>16.6}{:>16.2e}",
            (scaled - sigma).abs() / sigma
        );
    }
}
