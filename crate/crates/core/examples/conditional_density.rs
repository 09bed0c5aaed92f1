//! Kernel density of diffusion draws at one conditioning vector of M1,
//! against a KDE of direct draws from the true conditional.
//!
//! `cargo run --release --example conditional_density`

use cdcit::bench::{gaussian_kde, ks_distance, linspace};
use cdcit::diffusion::{sample_repeated, train_score, DiffusionConfig};
use cdcit::rng::stream;
use cdcit::synthetic::{generate, Hypothesis, ModelId, Scenario};
use ndarray::ArrayView1;

fn main() -> cdcit::Result<()> {
    let scenario = Scenario::new(ModelId::M1, Hypothesis::H0, 5);
    let training = generate(&scenario, 500, 2)?;
    let config = DiffusionConfig {
        sampler_steps: 300,
        ..DiffusionConfig::low_dimensional()
    };
    let model = train_score(&training.data, &config, 2)?;

    let z = [0.5, -0.3, 0.2, 0.0, 0.1];
    let learned = sample_repeated(&model, &z, 2000, config.reverse_schedule(), 4, &[])?
        .column(0)
        .to_vec();
    let mut rng = stream(4, &[99]);
    let truth: Vec<f64> = (0..2000)
        .map(|_| training.law.draw(ArrayView1::from(&z), &mut rng)[0])
        .collect();

    println!("two-sample KS {:.4}", ks_distance(&learned, &truth)?);
    let grid = linspace(-1.0, 6.0, 15);
    let a = gaussian_kde(&learned, &grid)?;
    let b = gaussian_kde(&truth, &grid)?;
    println!("{:>6} {:>9} {:>9}", "x", "diffusion", "true");
    for ((x, da), (_, db)) in a.iter().zip(&b) {
        println!("{x:>6.2} {da:>9.4} {db:>9.4}");
    }
    Ok(())
}
