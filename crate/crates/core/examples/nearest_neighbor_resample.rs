//! 1-NN resampling: each test row keeps its (x, z) and borrows y from the
//! reference row whose z is closest.
//!
//! `cargo run --release --example nearest_neighbor_resample`

use cdcit::knn::one_nn_resample;
use cdcit::Dataset;
use ndarray::array;

fn main() -> cdcit::Result<()> {
    let reference = Dataset::new(
        array![[1.0], [2.0], [3.0]],
        array![[10.0], [20.0], [30.0]],
        array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
    )?;
    let queries = Dataset::new(
        array![[5.0], [6.0], [7.0]],
        array![[50.0], [60.0], [70.0]],
        array![[0.2, 0.1], [0.9, 0.2], [0.5, 0.5]],
    )?;
    let swapped = one_nn_resample(&reference, &queries)?;
    for i in 0..swapped.n() {
        println!(
            "x {:.1}  z {:?}  y {:.1} -> {:.1}",
            swapped.x()[[i, 0]],
            swapped.z().row(i).to_vec(),
            queries.y()[[i, 0]],
            swapped.y()[[i, 0]]
        );
    }
    // The last query is equidistant from all three rows; index 0 wins.
    Ok(())
}
