//! The dense network and Adam on their own: fit y = sin(3x) by full-batch
//! mean squared error.
//!
//! `cargo run --release --example adam_regression`

use cdcit::nn::{adam_step, AdamState, DenseNetwork, OutputActivation};
use cdcit::rng::stream;
use ndarray::Array2;

fn main() -> cdcit::Result<()> {
    let n = 200;
    let x = Array2::from_shape_fn((n, 1), |(i, _)| -1.0 + 2.0 * i as f64 / (n - 1) as f64);
    let y = x.mapv(|v| (3.0 * v).sin());
    let mut net = DenseNetwork::new(&[1, 32, 32, 1], OutputActivation::Identity, &mut stream(0, &[]))?;
    let mut adam = AdamState::new(&net, 0.01);
    for step in 0..=2000 {
        let residual = net.forward_batch(x.view())? - &y;
        if step % 400 == 0 {
            println!(
                "step {step:>4}: mse {:.5}",
                residual.mapv(|r| r * r).mean().unwrap_or(f64::NAN)
            );
        }
        let upstream = residual * (2.0 / n as f64);
        let grads = net.backward_batch(x.view(), upstream.view())?;
        adam_step(&mut net, &mut adam, &grads)?;
    }
    Ok(())
}
