//! 1-nearest-neighbour conditional resampling of Y.
//!
//! Distances are unscaled squared Euclidean over every Z coordinate; ties go
//! to the smallest reference row. There is no randomness in this module.

use ndarray::ArrayView2;

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Exhaustive 1-NN index over a reference set of conditioning vectors.
pub struct NeighborIndex<'a> {
    reference: ArrayView2<'a, f64>,
}

impl<'a> NeighborIndex<'a> {
    pub fn new(reference: ArrayView2<'a, f64>) -> Result<Self> {
        if reference.nrows() == 0 {
            return Err(Error::input("nearest-neighbour reference set is empty"));
        }
        Ok(NeighborIndex { reference })
    }

    pub fn dim(&self) -> usize {
        self.reference.ncols()
    }

    /// Row of the reference set closest to `query`.
    pub fn nearest(&self, query: &[f64]) -> usize {
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (i, row) in self.reference.rows().into_iter().enumerate() {
            let mut dist = 0.0;
            for (a, b) in row.iter().zip(query) {
                let d = a - b;
                dist += d * d;
                if dist >= best_dist {
                    break;
                }
            }
            if dist < best_dist {
                best_dist = dist;
                best = i;
            }
        }
        best
    }
}

/// For each row `(x, y, z)` of `v2`, emit `(x, y', z)` where `y'` belongs to
/// the row of `v1` whose `z'` is nearest to `z`. Output order follows `v2`.
pub fn one_nn_resample(v1: &Dataset, v2: &Dataset) -> Result<Dataset> {
    if v1.is_empty() {
        return Err(Error::input("1-NN resampling needs a nonempty reference half"));
    }
    if !v1.same_dims(v2) {
        return Err(Error::shape(format!(
            "reference half is ({}, {}, {}) wide, query half ({}, {}, {})",
            v1.d_x(),
            v1.d_y(),
            v1.d_z(),
            v2.d_x(),
            v2.d_y(),
            v2.d_z()
        )));
    }
    let neighbors = nearest_rows(v1.z(), v2.z())?;
    let y = v1.y().select(ndarray::Axis(0), &neighbors);
    v2.with_y(y)
}

/// Index of the nearest reference row for each query row.
pub fn nearest_rows(reference: ArrayView2<'_, f64>, queries: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    let index = NeighborIndex::new(reference)?;
    if index.dim() != queries.ncols() {
        return Err(Error::shape("query and reference widths differ"));
    }
    Ok(queries
        .rows()
        .into_iter()
        .map(|q| match q.as_slice() {
            Some(s) => index.nearest(s),
            None => index.nearest(&q.to_vec()),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::{array, Array2};
    use proptest::prelude::*;
    use rand::Rng;

    /// Plain O(n^2) scan with no early exit, the oracle for the index.
    fn brute_force(reference: &Array2<f64>, query: &[f64]) -> usize {
        let dists: Vec<f64> = reference
            .rows()
            .into_iter()
            .map(|r| r.iter().zip(query).map(|(a, b)| (a - b).powi(2)).sum())
            .collect();
        let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        dists.iter().position(|&d| d == min).unwrap()
    }

    fn ds(x: Array2<f64>, y: Array2<f64>, z: Array2<f64>) -> Dataset {
        Dataset::new(x, y, z).unwrap()
    }

    #[test]
    fn nearest_z_supplies_y() {
        let v1 = ds(array![[1.0], [2.0]], array![[10.0], [20.0]], array![[0.0], [1.0]]);
        let v2 = ds(array![[5.0]], array![[50.0]], array![[0.2]]);
        let out = one_nn_resample(&v1, &v2).unwrap();
        assert_eq!(out.x(), array![[5.0]]);
        assert_eq!(out.y(), array![[10.0]]);
        assert_eq!(out.z(), array![[0.2]]);
    }

    #[test]
    fn exact_match_adopts_that_row() {
        let v1 = ds(
            array![[1.0], [2.0], [3.0]],
            array![[10.0], [20.0], [30.0]],
            array![[0.0], [1.0], [2.0]],
        );
        let v2 = ds(array![[0.0]], array![[0.0]], array![[2.0]]);
        assert_eq!(one_nn_resample(&v1, &v2).unwrap().y(), array![[30.0]]);
    }

    #[test]
    fn ties_go_to_the_smallest_index() {
        let reference = array![[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]];
        let query = [0.0, 0.0];
        let index = NeighborIndex::new(reference.view()).unwrap();
        assert_eq!(index.nearest(&query), brute_force(&reference, &query));
        assert_eq!(index.nearest(&query), 0);
        let v1 = ds(array![[0.0], [0.0], [0.0]], array![[7.0], [8.0], [9.0]], reference);
        let v2 = ds(array![[0.0]], array![[0.0]], array![[0.0, 0.0]]);
        assert_eq!(one_nn_resample(&v1, &v2).unwrap().y(), array![[7.0]]);
    }

    #[test]
    fn empty_reference_and_shape_mismatch() {
        let empty = ds(Array2::zeros((0, 1)), Array2::zeros((0, 1)), Array2::zeros((0, 2)));
        let v2 = ds(array![[0.0]], array![[0.0]], array![[0.0, 1.0]]);
        assert!(matches!(one_nn_resample(&empty, &v2), Err(Error::Input(_))));
        let narrow = ds(array![[0.0]], array![[0.0]], array![[0.0]]);
        assert!(matches!(one_nn_resample(&narrow, &v2), Err(Error::Shape(_))));
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = stream(77, &[]);
        for _ in 0..100 {
            let n = rng.random_range(1..=200);
            let q = rng.random_range(1..=50);
            let d = rng.random_range(1..=20);
            // A coarse grid makes exact ties common.
            let mut draw = |rows| Array2::from_shape_simple_fn((rows, d), || rng.random_range(-2i32..=2) as f64);
            let reference = draw(n);
            let queries = draw(q);
            let got = nearest_rows(reference.view(), queries.view()).unwrap();
            for (i, row) in queries.rows().into_iter().enumerate() {
                assert_eq!(got[i], brute_force(&reference, &row.to_vec()));
            }
        }
    }

    proptest! {
        #[test]
        fn only_y_changes(seed in 0u64..500) {
            let mut rng = stream(seed, &[]);
            let n = rng.random_range(1..30);
            let mut block = |c| Array2::from_shape_simple_fn((n, c), || rng.random_range(-1.0..1.0));
            let v1 = ds(block(2), block(1), block(3));
            let v2 = ds(block(2), block(1), block(3));
            let out = one_nn_resample(&v1, &v2).unwrap();
            prop_assert_eq!(out.x(), v2.x());
            prop_assert_eq!(out.z(), v2.z());
            prop_assert_eq!(out.n(), v2.n());
        }
    }
}
