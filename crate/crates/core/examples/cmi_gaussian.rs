//! Classifier-based CMI against its closed form on a Gaussian model.
//!
//! `cargo run --release --example cmi_gaussian -- [classifier epochs]`

use cdcit::cmi::{estimate_cmi, CmiConfig};
use cdcit::synthetic::{generate, Hypothesis, ModelId, Scenario};

fn main() -> cdcit::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(300);
    let config = CmiConfig {
        epochs,
        ..CmiConfig::default()
    };
    println!("classifier epochs {epochs}");
    for rho in [0.0, 0.3, 0.6, 0.9] {
        let hyp = if rho == 0.0 { Hypothesis::H0 } else { Hypothesis::H1 };
        let scenario = Scenario::new(ModelId::GaussianOracle, hyp, 1).with_rho(rho);
        let mut values = Vec::new();
        let mut truth = 0.0;
        for seed in 0..5 {
            let g = generate(&scenario, 2000, seed)?;
            truth = g.analytic_cmi.unwrap_or(f64::NAN);
            values.push(estimate_cmi(&g.data, &config, seed)?.value);
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        println!("rho {rho:.1}: closed form {truth:.4}, mean estimate {mean:+.4}");
    }
    Ok(())
}
