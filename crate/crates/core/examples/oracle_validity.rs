//! Rejection rate of the test under H0 when null draws come from the true
//! conditional law.
//!
//! `cargo run --release --example oracle_validity -- [trials]`

use cdcit::bench::run_trials_with_progress;
use cdcit::crt::{SamplerKind, TestConfig};
use cdcit::synthetic::{Hypothesis, ModelId, Scenario};

fn main() -> cdcit::Result<()> {
    let trials = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(20);
    let scenario = Scenario::new(ModelId::GaussianOracle, Hypothesis::H0, 5);
    let config = TestConfig {
        repetitions: 50,
        sampler_kind: SamplerKind::AnalyticGaussianOracle,
        ..TestConfig::default()
    };
    let report = run_trials_with_progress(&scenario, trials, &config, 0, 300, 9, |r| {
        println!("trial {:>3}: p = {:.3}", r.index, r.p_value)
    })?;
    let bound = 0.05 + 2.0 * (0.05f64 * 0.95 / trials as f64).sqrt();
    println!(
        "rejection rate {:.3} (se {:.3}); binomial bound at alpha 0.05: {bound:.3}",
        report.rejection_rate, report.standard_error
    );
    Ok(())
}
