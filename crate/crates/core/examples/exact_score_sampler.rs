//! The reverse-time integrator driven by an exact Gaussian score, so any
//! error left is discretization error.
//!
//! `cargo run --release --example exact_score_sampler`

use cdcit::bench::ks_against;
use cdcit::diffusion::{sample_rows, GaussianScore, ReverseSchedule};
use ndarray::{Array1, Array2, ArrayView1};
use statrs::distribution::{ContinuousCDF, Normal};

fn main() -> cdcit::Result<()> {
    let sigma2 = 0.25;
    let score = GaussianScore {
        mean: |z: ArrayView1<'_, f64>| Array1::from_elem(1, z.sum()),
        sigma2,
        d_x: 1,
        d_z: 2,
    };
    let std_normal = Normal::standard();
    let z = Array2::from_shape_fn((4000, 2), |(i, j)| if j == 0 { 0.5 } else { (i % 2) as f64 });
    for steps in [10, 50, 200, 1000] {
        let schedule = ReverseSchedule {
            terminal_time: 10.0,
            early_stop_time: 0.01,
            steps,
        };
        let x = sample_rows(&score, z.view(), schedule, 11, &[])?;
        // Half the rows target N(0.5, 0.25), the other half N(1.5, 0.25).
        let pit: Vec<f64> = x
            .column(0)
            .iter()
            .zip(z.rows())
            .map(|(v, zr)| std_normal.cdf((v - zr.sum()) / sigma2.sqrt()))
            .collect();
        let ks = ks_against(&pit, |u| u.clamp(0.0, 1.0))?;
        println!("K = {steps:>4}: KS of the probability-integral transform {ks:.4}");
    }
    Ok(())
}
