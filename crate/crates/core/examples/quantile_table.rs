//! Conditional-quantile errors of the diffusion sampler next to a perfect
//! sampler and the unconditional marginal.
//!
//! `cargo run --release --example quantile_table -- [m1|m2|m3] [reps]`

use cdcit::bench::{quantile_mse, QuantileConfig, QuantileSampler};
use cdcit::diffusion::DiffusionConfig;
use cdcit::synthetic::ModelId;

fn main() -> cdcit::Result<()> {
    let mut args = std::env::args().skip(1);
    let model: ModelId = args.next().as_deref().unwrap_or("m1").parse()?;
    let repetitions = args.next().and_then(|a| a.parse().ok()).unwrap_or(10);
    let config = QuantileConfig {
        repetitions,
        reference_draws: 200_000,
        diffusion: DiffusionConfig {
            sampler_steps: 200,
            ..DiffusionConfig::low_dimensional()
        },
        ..QuantileConfig::default()
    };
    println!("{model}, {repetitions} repetitions");
    println!(
        "{:<10} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "sampler", "0.05", "0.25", "0.50", "0.75", "0.95"
    );
    for sampler in [
        QuantileSampler::Diffusion,
        QuantileSampler::Perfect,
        QuantileSampler::Marginal,
    ] {
        let run = quantile_mse(model, sampler, &config, 1)?;
        let cells: Vec<String> = run.report.rows.iter().map(|r| format!("{:>8.4}", r.mse)).collect();
        println!("{:<10} {}", format!("{sampler:?}").to_lowercase(), cells.join(" "));
    }
    Ok(())
}
