//! Train a conditional score model and draw X | Z from it.
//!
//! `cargo run --release --example train_and_sample -- [epochs]`

use cdcit::diffusion::{sample_repeated, train_score_with_progress, DiffusionConfig, ScoreModel};
use cdcit::synthetic::{generate, Hypothesis, ModelId, Scenario};

fn main() -> cdcit::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(600);
    // X | Z ~ N(mean(Z), 1) with two conditioning coordinates.
    let scenario = Scenario::new(ModelId::GaussianOracle, Hypothesis::H0, 2);
    let data = generate(&scenario, 1000, 1)?.data.to_unlabeled();

    let config = DiffusionConfig {
        epochs,
        hidden_widths: vec![64, 64],
        sampler_steps: 300,
        ..DiffusionConfig::default()
    };
    let model = train_score_with_progress(&data, &config, 7, |epoch, loss| {
        if epoch % 100 == 0 {
            println!("epoch {epoch:>4}  loss {:.4}", loss / data.n() as f64);
        }
    })?;

    // The model is plain JSON and loads back bit for bit.
    let model = ScoreModel::from_json(&model.to_json()?)?;
    for z in [[-1.0, -1.0], [0.0, 0.5], [1.5, 1.5]] {
        let draws = sample_repeated(&model, &z, 400, config.reverse_schedule(), 3, &[])?;
        let xs = draws.column(0);
        let mean = xs.mean().unwrap_or(f64::NAN);
        let sd = xs.std(1.0);
        println!(
            "z = {z:?}: sample mean {mean:+.3} (true {:+.3}), sd {sd:.3} (true 1)",
            (z[0] + z[1]) / 2.0
        );
    }
    Ok(())
}
