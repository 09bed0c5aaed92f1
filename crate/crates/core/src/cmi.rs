//! Classifier-based estimate of I(X; Y | Z).
//!
//! The data are halved; the second half keeps its joint rows (label 1) and
//! a 1-NN resampled copy of it stands in for draws from p(x, z) p(y | z)
//! (label 0). A logistic classifier trained on 2/3 of each labeled set turns
//! predicted probabilities into likelihood ratios `a / (1 - a)`, which feed
//! the Donsker–Varadhan form
//! `mean(log L(W_f)) - log(mean(L(W_g)))` over the held-out third.

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::knn::one_nn_resample;
use crate::nn::{adam_step, sigmoid, AdamState, DenseNetwork, OutputActivation};
use crate::rng::{stream, tag};

/// Smallest dataset for which both held-out partitions are nonempty.
pub const MIN_ROWS: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmiConfig {
    /// Predicted probabilities are clamped to `[clip, 1 - clip]`.
    pub probability_clip: f64,
    pub hidden_widths: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for CmiConfig {
    fn default() -> Self {
        CmiConfig {
            probability_clip: 1e-3,
            hidden_widths: vec![64, 64],
            epochs: 300,
            learning_rate: 0.01,
        }
    }
}

impl CmiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.probability_clip > 0.0 && self.probability_clip < 0.5) {
            return Err(Error::domain(format!(
                "probability clip must lie in (0, 0.5), got {}",
                self.probability_clip
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::domain("classifier learning rate must be positive"));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::domain("classifier widths must be positive"));
        }
        Ok(())
    }

    /// Largest possible |estimate| under this clip.
    pub fn estimate_bound(&self) -> f64 {
        2.0 * ((1.0 - self.probability_clip) / self.probability_clip).ln()
    }
}

/// Feature rows `(x, y, z)` with 0/1 labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub features: Array2<f64>,
    pub labels: Array1<f64>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Output of [`build_labeled_sets`].
#[derive(Debug, Clone)]
pub struct LabeledSplit {
    pub train: LabeledSet,
    /// Held-out joint rows (label 1).
    pub test_f: Array2<f64>,
    /// Held-out resampled rows (label 0).
    pub test_g: Array2<f64>,
    /// Rows in each half.
    pub half: usize,
    /// Positions (into the input) of the two halves after shuffling.
    pub v1_rows: Vec<usize>,
    pub v2_rows: Vec<usize>,
}

/// Shuffles, halves, 1-NN resamples, labels and splits each labeled set
/// 2:1 into train and test. With `m = floor(n/2)` rows per half, each test
/// partition keeps the last `floor(m/3)` rows and training gets the rest.
pub fn build_labeled_sets(v: &Dataset, seed: u64) -> Result<LabeledSplit> {
    if v.n() < MIN_ROWS {
        return Err(Error::input(format!(
            "CMI estimation needs at least {MIN_ROWS} rows, got {}",
            v.n()
        )));
    }
    let mut order: Vec<usize> = (0..v.n()).collect();
    order.shuffle(&mut stream(seed, &[tag::CMI, 1]));
    let half = v.n() / 2;
    let v1_rows = order[..half].to_vec();
    let v2_rows = order[half..2 * half].to_vec();
    let v1 = v.select_rows(&v1_rows);
    let v2 = v.select_rows(&v2_rows);
    let resampled = one_nn_resample(&v1, &v2)?;

    let test_len = half / 3;
    let train_len = half - test_len;
    let joint = v2.features();
    let product = resampled.features();
    let train_features = concatenate(
        Axis(0),
        &[
            joint.slice(ndarray::s![..train_len, ..]),
            product.slice(ndarray::s![..train_len, ..]),
        ],
    )
    .expect("same widths");
    let mut labels = Array1::zeros(2 * train_len);
    labels.slice_mut(ndarray::s![..train_len]).fill(1.0);
    Ok(LabeledSplit {
        train: LabeledSet {
            features: train_features,
            labels,
        },
        test_f: joint.slice(ndarray::s![train_len.., ..]).to_owned(),
        test_g: product.slice(ndarray::s![train_len.., ..]).to_owned(),
        half,
        v1_rows,
        v2_rows,
    })
}

/// Mean binary cross-entropy of a logistic classifier, computed from logits.
pub fn bce_from_logits(logits: ArrayView2<'_, f64>, labels: &Array1<f64>) -> f64 {
    let n = labels.len().max(1) as f64;
    logits
        .column(0)
        .iter()
        .zip(labels)
        .map(|(&s, &l)| {
            // log(1 + e^s) - l s, computed stably
            let softplus = if s > 0.0 {
                s + (-s).exp().ln_1p()
            } else {
                s.exp().ln_1p()
            };
            softplus - l * s
        })
        .sum::<f64>()
        / n
}

/// Full-batch Adam on the binary cross-entropy. Returns the classifier and
/// its final training loss.
pub fn train_classifier(train: &LabeledSet, config: &CmiConfig, seed: u64) -> Result<(DenseNetwork, f64)> {
    config.validate()?;
    let positives = train.labels.iter().filter(|&&l| l == 1.0).count();
    if positives == 0 || positives == train.len() {
        return Err(Error::input("classifier training set contains a single class"));
    }
    if train.labels.iter().any(|&l| l != 0.0 && l != 1.0) {
        return Err(Error::input("labels must be 0 or 1"));
    }
    let mut dims = vec![train.features.ncols()];
    dims.extend(&config.hidden_widths);
    dims.push(1);
    let mut rng = stream(seed, &[tag::CMI, 2]);
    let mut net = DenseNetwork::new(&dims, OutputActivation::Sigmoid, &mut rng)?;
    let mut adam = AdamState::new(&net, config.learning_rate);
    let inv_n = 1.0 / train.len() as f64;
    let mut loss = f64::NAN;
    for epoch in 0..config.epochs {
        let trace = net.forward_trace(train.features.view())?;
        loss = bce_from_logits(trace.pre_output.view(), &train.labels);
        if !loss.is_finite() {
            return Err(Error::numeric(format!("classifier loss diverged at epoch {epoch}")));
        }
        let mut delta = trace.output.clone();
        Zip::from(delta.column_mut(0))
            .and(&train.labels)
            .for_each(|d, &l| *d = (*d - l) * inv_n);
        let grads = net.backward_pre_output(&trace, delta);
        adam_step(&mut net, &mut adam, &grads)?;
    }
    if config.epochs == 0 || !loss.is_finite() {
        let logits = net.forward_trace(train.features.view())?.pre_output;
        loss = bce_from_logits(logits.view(), &train.labels);
    }
    Ok((net, loss))
}

/// `a / (1 - a)` with `a` clamped to `[clip, 1 - clip]`.
pub fn clipped_ratio(alpha: f64, clip: f64) -> f64 {
    let a = alpha.clamp(clip, 1.0 - clip);
    a / (1.0 - a)
}

pub fn likelihood_ratio(classifier: &DenseNetwork, w: &[f64], clip: f64) -> Result<f64> {
    let alpha = classifier.forward(w)?[0];
    Ok(clipped_ratio(alpha, clip))
}

pub fn likelihood_ratios(classifier: &DenseNetwork, features: ArrayView2<'_, f64>, clip: f64) -> Result<Vec<f64>> {
    let logits = classifier_logits(classifier, features)?;
    Ok(logits.iter().map(|&s| clipped_ratio(sigmoid(s), clip)).collect())
}

fn classifier_logits(classifier: &DenseNetwork, features: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    Ok(classifier.forward_trace(features)?.pre_output.column(0).to_owned())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmiEstimate {
    pub value: f64,
    /// Rows per held-out partition.
    pub d: usize,
    pub mean_log_ratio_f: f64,
    pub mean_ratio_g: f64,
    pub classifier_train_loss: f64,
}

/// Combines held-out ratios into the Donsker–Varadhan estimate.
pub fn dv_estimate(ratios_f: &[f64], ratios_g: &[f64]) -> Result<(f64, f64, f64)> {
    if ratios_f.is_empty() || ratios_g.is_empty() {
        return Err(Error::input("both held-out partitions must be nonempty"));
    }
    if ratios_f.iter().chain(ratios_g).any(|&r| !(r > 0.0) || !r.is_finite()) {
        return Err(Error::numeric("likelihood ratios must be positive and finite"));
    }
    let mean_log_f = ratios_f.iter().map(|r| r.ln()).sum::<f64>() / ratios_f.len() as f64;
    let mean_g = ratios_g.iter().sum::<f64>() / ratios_g.len() as f64;
    Ok((mean_log_f - mean_g.ln(), mean_log_f, mean_g))
}

/// Classifier-based CMI estimate; a pure function of `(v, config, seed)`.
pub fn estimate_cmi(v: &Dataset, config: &CmiConfig, seed: u64) -> Result<CmiEstimate> {
    config.validate()?;
    let split = build_labeled_sets(v, seed)?;
    let (classifier, train_loss) = train_classifier(&split.train, config, seed)?;
    let d = split.half / 3;
    let test_f = split.test_f.slice(ndarray::s![..d, ..]);
    let test_g = split.test_g.slice(ndarray::s![..d, ..]);
    let ratios_f = likelihood_ratios(&classifier, test_f, config.probability_clip)?;
    let ratios_g = likelihood_ratios(&classifier, test_g, config.probability_clip)?;
    let (value, mean_log_ratio_f, mean_ratio_g) = dv_estimate(&ratios_f, &ratios_g)?;
    Ok(CmiEstimate {
        value,
        d,
        mean_log_ratio_f,
        mean_ratio_g,
        classifier_train_loss: train_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_block(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = stream(seed, &[]);
        Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
    }

    fn toy(n: usize, seed: u64) -> Dataset {
        Dataset::new(
            gaussian_block(n, 1, seed),
            gaussian_block(n, 1, seed + 1),
            gaussian_block(n, 2, seed + 2),
        )
        .unwrap()
    }

    #[test]
    fn split_sizes_for_twelve_rows() {
        let split = build_labeled_sets(&toy(12, 0), 3).unwrap();
        assert_eq!(split.half, 6);
        assert_eq!(split.train.len(), 8);
        assert_eq!(split.train.labels.sum(), 4.0);
        assert_eq!(split.test_f.nrows(), 2);
        assert_eq!(split.test_g.nrows(), 2);
    }

    #[test]
    fn too_few_rows_is_an_input_error() {
        assert!(matches!(build_labeled_sets(&toy(11, 0), 0), Err(Error::Input(_))));
    }

    #[test]
    fn same_seed_same_partitions() {
        let v = toy(40, 5);
        let a = build_labeled_sets(&v, 9).unwrap();
        let b = build_labeled_sets(&v, 9).unwrap();
        assert_eq!(a.v1_rows, b.v1_rows);
        assert_eq!(a.train, b.train);
        assert_eq!(a.test_g, b.test_g);
        let c = build_labeled_sets(&v, 10).unwrap();
        assert_ne!(a.v1_rows, c.v1_rows);
    }

    #[test]
    fn test_partitions_come_from_the_expected_halves() {
        let v = toy(60, 2);
        let split = build_labeled_sets(&v, 4).unwrap();
        let feats = v.features();
        let v1z: Vec<Vec<f64>> = split.v1_rows.iter().map(|&r| v.z().row(r).to_vec()).collect();
        let train_len = split.half - split.half / 3;
        for (k, row) in split.test_f.rows().into_iter().enumerate() {
            let src = split.v2_rows[train_len + k];
            assert_eq!(row, feats.row(src));
        }
        for (k, row) in split.test_g.rows().into_iter().enumerate() {
            let src = split.v2_rows[train_len + k];
            // x and z from the V2 row, y from its exhaustive nearest neighbour in V1.
            assert_eq!(row[0], v.x()[[src, 0]]);
            assert_eq!(row.slice(ndarray::s![2..]), v.z().row(src));
            let zq = v.z().row(src).to_vec();
            let dists: Vec<f64> = v1z
                .iter()
                .map(|z| z.iter().zip(&zq).map(|(a, b)| (a - b).powi(2)).sum())
                .collect();
            let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            let nn = dists.iter().position(|&d| d == min).unwrap();
            assert_eq!(row[1], v.y()[[split.v1_rows[nn], 0]]);
        }
    }

    #[test]
    fn single_class_training_is_rejected() {
        let set = LabeledSet {
            features: array![[0.0], [1.0]],
            labels: array![1.0, 1.0],
        };
        assert!(matches!(
            train_classifier(&set, &CmiConfig::default(), 0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn zero_epochs_returns_the_initial_network() {
        let set = LabeledSet {
            features: array![[0.0], [1.0]],
            labels: array![1.0, 0.0],
        };
        let cfg = CmiConfig {
            epochs: 0,
            ..Default::default()
        };
        let (net, _) = train_classifier(&set, &cfg, 7).unwrap();
        let fresh = DenseNetwork::new(
            &[1, 64, 64, 1],
            OutputActivation::Sigmoid,
            &mut stream(7, &[tag::CMI, 2]),
        )
        .unwrap();
        assert_eq!(net, fresh);
    }

    #[test]
    fn indistinguishable_classes_give_half_probabilities() {
        // The default classifier memorizes small samples; 4000 rows per
        // class keep held-out probabilities near one half.
        let n = 4000;
        let features = gaussian_block(2 * n, 3, 21);
        let mut labels = Array1::zeros(2 * n);
        labels.slice_mut(ndarray::s![..n]).fill(1.0);
        let (net, _) = train_classifier(&LabeledSet { features, labels }, &CmiConfig::default(), 1).unwrap();
        let held_out = gaussian_block(500, 3, 22);
        let probs = net.forward_batch(held_out.view()).unwrap();
        let dev = probs.iter().map(|p| (p - 0.5).abs()).sum::<f64>() / probs.len() as f64;
        assert!(dev <= 0.1, "mean |a - 0.5| = {dev}");
    }

    #[test]
    fn separated_classes_are_classified() {
        let mut rng = stream(31, &[]);
        let mut make = |n: usize| {
            let mut feats = Array2::zeros((2 * n, 1));
            let mut labels = Array1::zeros(2 * n);
            for i in 0..2 * n {
                let pos = i < n;
                let e: f64 = StandardNormal.sample(&mut rng);
                feats[[i, 0]] = if pos { 10.0 } else { -10.0 } + e;
                labels[i] = if pos { 1.0 } else { 0.0 };
            }
            LabeledSet {
                features: feats,
                labels,
            }
        };
        let train = make(100);
        let test = make(200);
        let (net, _) = train_classifier(&train, &CmiConfig::default(), 2).unwrap();
        let probs = net.forward_batch(test.features.view()).unwrap();
        let correct = probs
            .column(0)
            .iter()
            .zip(&test.labels)
            .filter(|(p, l)| (**p > 0.5) == (**l == 1.0))
            .count();
        assert!(correct as f64 / test.len() as f64 >= 0.99);
    }

    #[test]
    fn ratio_clamping() {
        assert_eq!(clipped_ratio(0.5, 1e-3), 1.0);
        assert!((clipped_ratio(1.0, 1e-3) - 999.0).abs() < 1e-9);
        assert!((clipped_ratio(0.8, 1e-3) - 4.0).abs() < 1e-12);
        assert!((clipped_ratio(0.0, 1e-3) - 1.0 / 999.0).abs() < 1e-12);
    }

    #[test]
    fn dv_formula_on_hand_fed_ratios() {
        let e = std::f64::consts::E;
        let (v, f, g) = dv_estimate(&[e, e, e], &[1.0, 1.0, 1.0]).unwrap();
        assert!((v - 1.0).abs() < 1e-15 && (f - 1.0).abs() < 1e-15 && g == 1.0);
        let (v, _, _) = dv_estimate(&[1.0; 4], &[1.0; 4]).unwrap();
        assert_eq!(v, 0.0);
        assert!(dv_estimate(&[], &[1.0]).is_err());
    }

    #[test]
    fn dv_formula_recovers_gaussian_kl_with_exact_ratio() {
        // f = N(1, 1), g = N(0, 1): log f/g = w - 1/2, KL = 1/2.
        let mut rng = stream(41, &[]);
        let m = 200_000;
        let rf: Vec<f64> = (0..m)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                (1.0 + e - 0.5).exp()
            })
            .collect();
        let rg: Vec<f64> = (0..m)
            .map(|_| {
                let w: f64 = StandardNormal.sample(&mut rng);
                (w - 0.5).exp()
            })
            .collect();
        let (v, _, _) = dv_estimate(&rf, &rg).unwrap();
        assert!((v - 0.5).abs() < 0.02, "{v}");
    }

    #[test]
    fn estimate_satisfies_identity_and_clip_bound() {
        let cfg = CmiConfig {
            epochs: 60,
            hidden_widths: vec![16],
            ..Default::default()
        };
        for seed in 0..4 {
            let mut rng = stream(seed, &[]);
            let n = rng.random_range(12..80);
            let est = estimate_cmi(&toy(n, seed * 10), &cfg, seed).unwrap();
            assert_eq!(est.value, est.mean_log_ratio_f - est.mean_ratio_g.ln());
            assert!(est.mean_ratio_g > 0.0);
            assert!(est.value.abs() <= cfg.estimate_bound());
            assert_eq!(est.d, (n / 2) / 3);
        }
    }
}
