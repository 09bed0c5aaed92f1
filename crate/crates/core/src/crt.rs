//! Conditional randomization test with a CMI statistic.
//!
//! The observed statistic is computed on the test data; each of the B null
//! statistics replaces the X block with fresh draws from a conditional
//! sampler for X given Z, keeping Y and Z untouched.

use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cmi::{estimate_cmi, CmiConfig, MIN_ROWS};
use crate::data::Dataset;
use crate::diffusion::{sample_rows, train_score, DiffusionConfig, ReverseSchedule, ScoreFunction, ScoreModel};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream, tag};
use crate::synthetic::ConditionalLaw;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    LearnedDiffusion,
    /// Draws from the true conditional law. Only meaningful for synthetic
    /// data; from the command line it means `X | Z ~ N(mean(Z), 1)`.
    AnalyticGaussianOracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestConfig {
    /// Number of null repetitions B.
    pub repetitions: usize,
    pub alpha: f64,
    pub seed: u64,
    pub diffusion: DiffusionConfig,
    pub cmi: CmiConfig,
    pub sampler_kind: SamplerKind,
}

impl Default for TestConfig {
    fn default() -> Self {
        TestConfig {
            repetitions: 100,
            alpha: 0.05,
            seed: 0,
            diffusion: DiffusionConfig::default(),
            cmi: CmiConfig::default(),
            sampler_kind: SamplerKind::LearnedDiffusion,
        }
    }
}

impl TestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::domain("B must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::domain(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        self.diffusion.validate()?;
        self.cmi.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub sampler_training: f64,
    pub observed_statistic: f64,
    pub null_statistics: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub p_value: f64,
    pub reject: bool,
    pub alpha: f64,
    pub b: usize,
    pub cmi_observed: f64,
    pub cmi_null: Vec<f64>,
    pub seed: u64,
    pub config: TestConfig,
    pub timings: Timings,
}

/// `(1 + #{null >= observed}) / (1 + B)`.
pub fn p_value(observed: f64, null: &[f64]) -> Result<f64> {
    if null.is_empty() {
        return Err(Error::input("at least one null statistic is required"));
    }
    let exceed = null.iter().filter(|&&s| s >= observed).count();
    Ok((1 + exceed) as f64 / (1 + null.len()) as f64)
}

/// Draws one X per row of `z` for null repetition `b`. Row `i` must depend
/// only on `(seed, b, i)` and its own conditioning vector.
pub trait ConditionalSampler: Sync {
    fn d_x(&self) -> usize;
    fn draw(&self, z: ArrayView2<'_, f64>, seed: u64, b: u64) -> Result<Array2<f64>>;
}

/// Euler–Maruyama draws from a trained score model.
pub struct DiffusionSampler<'a> {
    pub model: &'a ScoreModel,
    pub steps: usize,
}

impl ConditionalSampler for DiffusionSampler<'_> {
    fn d_x(&self) -> usize {
        self.model.d_x()
    }

    fn draw(&self, z: ArrayView2<'_, f64>, seed: u64, b: u64) -> Result<Array2<f64>> {
        sample_rows(
            self.model,
            z,
            ReverseSchedule::for_model(self.model, self.steps),
            seed,
            &[b],
        )
    }
}

/// Exact draws from a known conditional law.
pub struct OracleSampler<'a> {
    pub law: &'a ConditionalLaw,
}

impl ConditionalSampler for OracleSampler<'_> {
    fn d_x(&self) -> usize {
        self.law.d_x()
    }

    fn draw(&self, z: ArrayView2<'_, f64>, seed: u64, b: u64) -> Result<Array2<f64>> {
        let d_x = self.law.d_x();
        let mut out = Array2::zeros((z.nrows(), d_x));
        for (i, (zr, mut row)) in z.rows().into_iter().zip(out.rows_mut()).enumerate() {
            let mut rng = stream(seed, &[tag::SAMPLER, b, i as u64]);
            let x = self.law.draw(zr, &mut rng);
            row.assign(&ndarray::Array1::from_vec(x));
        }
        Ok(out)
    }
}

/// Where the null sampler comes from.
pub enum SamplerSource<'a> {
    /// Train a score model on this (X, Z) set.
    Unlabeled(&'a Dataset),
    /// Reuse a trained score model.
    Model(&'a ScoreModel),
    /// Draw from the true law of X given Z.
    Oracle(&'a ConditionalLaw),
}

/// Seed of the classifier used for statistic `b` (b = 0 is the observed one).
pub fn statistic_seed(seed: u64, b: u64) -> u64 {
    derive_seed(seed, &[tag::CMI, b])
}

fn check_dims(test: &Dataset, d_x: usize, d_z: usize) -> Result<()> {
    if test.d_x() != d_x || test.d_z() != d_z {
        return Err(Error::shape(format!(
            "test data has d_x = {}, d_z = {}; sampler has d_x = {d_x}, d_z = {d_z}",
            test.d_x(),
            test.d_z()
        )));
    }
    Ok(())
}

/// Runs the full test.
pub fn run_cdcit(test: &Dataset, source: SamplerSource<'_>, config: &TestConfig) -> Result<TestResult> {
    config.validate()?;
    if test.n() < MIN_ROWS {
        return Err(Error::input(format!(
            "the test needs at least {MIN_ROWS} rows, got {}",
            test.n()
        )));
    }
    let oracle = matches!(source, SamplerSource::Oracle(_));
    if oracle != (config.sampler_kind == SamplerKind::AnalyticGaussianOracle) {
        return Err(Error::domain("sampler kind does not match the sampler source"));
    }
    let start = Instant::now();
    let trained;
    let (sampler, training): (Box<dyn ConditionalSampler + '_>, f64) = match source {
        SamplerSource::Unlabeled(unlabeled) => {
            check_dims(test, unlabeled.d_x(), unlabeled.d_z())?;
            let t0 = Instant::now();
            trained = train_score(unlabeled, &config.diffusion, config.seed)?;
            let secs = t0.elapsed().as_secs_f64();
            (
                Box::new(DiffusionSampler {
                    model: &trained,
                    steps: config.diffusion.sampler_steps,
                }),
                secs,
            )
        }
        SamplerSource::Model(model) => {
            check_dims(test, model.d_x(), model.d_z())?;
            (
                Box::new(DiffusionSampler {
                    model,
                    steps: config.diffusion.sampler_steps,
                }),
                0.0,
            )
        }
        SamplerSource::Oracle(law) => {
            if test.d_x() != law.d_x() {
                return Err(Error::shape("oracle law and test data disagree on d_x"));
            }
            (Box::new(OracleSampler { law }), 0.0)
        }
    };
    let t0 = Instant::now();
    let observed = estimate_cmi(test, &config.cmi, statistic_seed(config.seed, 0))?.value;
    let observed_secs = t0.elapsed().as_secs_f64();

    let t0 = Instant::now();
    let null = (1..=config.repetitions as u64)
        .into_par_iter()
        .map(|b| null_statistic(test, sampler.as_ref(), config, b))
        .collect::<Result<Vec<f64>>>()?;
    let null_secs = t0.elapsed().as_secs_f64();

    let p = p_value(observed, &null)?;
    Ok(TestResult {
        p_value: p,
        reject: p < config.alpha,
        alpha: config.alpha,
        b: config.repetitions,
        cmi_observed: observed,
        cmi_null: null,
        seed: config.seed,
        config: config.clone(),
        timings: Timings {
            sampler_training: training,
            observed_statistic: observed_secs,
            null_statistics: null_secs,
            total: start.elapsed().as_secs_f64(),
        },
    })
}

fn with_repetition(err: Error, b: u64) -> Error {
    match err {
        Error::Numeric(m) => Error::Numeric(format!("null repetition {b}: {m}")),
        Error::Shape(m) => Error::Shape(format!("null repetition {b}: {m}")),
        Error::Input(m) => Error::Input(format!("null repetition {b}: {m}")),
        Error::Domain(m) => Error::Domain(format!("null repetition {b}: {m}")),
        other => other,
    }
}

/// The null dataset for repetition `b`: sampler draws in the X block, Y and
/// Z taken verbatim from `test`.
pub fn null_dataset(test: &Dataset, sampler: &dyn ConditionalSampler, seed: u64, b: u64) -> Result<Dataset> {
    let x = sampler.draw(test.z(), seed, b).map_err(|e| with_repetition(e, b))?;
    test.with_x(x).map_err(|e| with_repetition(e, b))
}

fn null_statistic(test: &Dataset, sampler: &dyn ConditionalSampler, config: &TestConfig, b: u64) -> Result<f64> {
    let null = null_dataset(test, sampler, config.seed, b)?;
    estimate_cmi(&null, &config.cmi, statistic_seed(config.seed, b))
        .map(|e| e.value)
        .map_err(|e| with_repetition(e, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::gen_gaussian_oracle;
    use proptest::prelude::*;

    fn quick_config(b: usize, seed: u64) -> TestConfig {
        TestConfig {
            repetitions: b,
            seed,
            sampler_kind: SamplerKind::AnalyticGaussianOracle,
            cmi: CmiConfig {
                hidden_widths: vec![8],
                epochs: 20,
                ..CmiConfig::default()
            },
            ..TestConfig::default()
        }
    }

    #[test]
    fn p_value_examples() {
        let none = vec![0.0; 100];
        assert!((p_value(1.0, &none).unwrap() - 1.0 / 101.0).abs() < 1e-15);
        let all = vec![2.0; 100];
        assert_eq!(p_value(1.0, &all).unwrap(), 1.0);
        let mut four = vec![0.0; 100];
        four[..4].fill(1.0);
        assert_eq!(p_value(1.0, &four).unwrap(), 5.0 / 101.0);
        assert!(matches!(p_value(1.0, &[]), Err(Error::Input(_))));
    }

    #[test]
    fn single_repetition_has_two_point_support() {
        let g = gen_gaussian_oracle(2, 60, 0.0, 1).unwrap();
        for seed in 0..5 {
            let r = run_cdcit(&g.data, SamplerSource::Oracle(&g.law), &quick_config(1, seed)).unwrap();
            assert!(r.p_value == 0.5 || r.p_value == 1.0);
        }
    }

    #[test]
    fn identical_seeds_identical_results() {
        let g = gen_gaussian_oracle(2, 60, 0.4, 2).unwrap();
        let cfg = quick_config(6, 9);
        let mut a = run_cdcit(&g.data, SamplerSource::Oracle(&g.law), &cfg).unwrap();
        let mut b = run_cdcit(&g.data, SamplerSource::Oracle(&g.law), &cfg).unwrap();
        a.timings = b.timings.clone();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        b.timings.total += 1.0;
        assert_ne!(a, b);
    }

    #[test]
    fn null_blocks_keep_y_and_z() {
        let g = gen_gaussian_oracle(3, 40, 0.0, 3).unwrap();
        let sampler = OracleSampler { law: &g.law };
        let first = null_dataset(&g.data, &sampler, 5, 1).unwrap();
        let second = null_dataset(&g.data, &sampler, 5, 2).unwrap();
        assert_eq!(first.y(), g.data.y());
        assert_eq!(first.z(), g.data.z());
        assert_eq!(second.y(), g.data.y());
        assert_ne!(first.x(), second.x());
        assert_eq!(first, null_dataset(&g.data, &sampler, 5, 1).unwrap());
    }

    #[test]
    fn dimension_mismatch_is_a_shape_error() {
        let g = gen_gaussian_oracle(3, 40, 0.0, 3).unwrap();
        let other = gen_gaussian_oracle(2, 40, 0.0, 3).unwrap();
        let cfg = TestConfig {
            diffusion: DiffusionConfig {
                epochs: 1,
                hidden_widths: vec![4],
                ..DiffusionConfig::default()
            },
            sampler_kind: SamplerKind::LearnedDiffusion,
            ..quick_config(2, 0)
        };
        let err = run_cdcit(&g.data, SamplerSource::Unlabeled(&other.data.to_unlabeled()), &cfg).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let g = gen_gaussian_oracle(1, 40, 0.0, 3).unwrap();
        let mut cfg = quick_config(0, 0);
        assert!(run_cdcit(&g.data, SamplerSource::Oracle(&g.law), &cfg).is_err());
        cfg.repetitions = 3;
        cfg.alpha = 1.0;
        assert!(run_cdcit(&g.data, SamplerSource::Oracle(&g.law), &cfg).is_err());
        cfg.alpha = 0.05;
        cfg.sampler_kind = SamplerKind::LearnedDiffusion;
        assert!(matches!(
            run_cdcit(&g.data, SamplerSource::Oracle(&g.law), &cfg),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn learned_sampler_runs_end_to_end() {
        let g = gen_gaussian_oracle(2, 120, 0.0, 4).unwrap();
        let unlabeled = gen_gaussian_oracle(2, 100, 0.0, 5).unwrap().data.to_unlabeled();
        let cfg = TestConfig {
            diffusion: DiffusionConfig {
                epochs: 5,
                sampler_steps: 10,
                hidden_widths: vec![8],
                ..DiffusionConfig::default()
            },
            sampler_kind: SamplerKind::LearnedDiffusion,
            ..quick_config(4, 1)
        };
        let r = run_cdcit(&g.data, SamplerSource::Unlabeled(&unlabeled), &cfg).unwrap();
        assert_eq!(r.cmi_null.len(), 4);
        assert_eq!(r.p_value, p_value(r.cmi_observed, &r.cmi_null).unwrap());
    }

    proptest! {
        #[test]
        fn p_value_lies_on_the_grid(null in prop::collection::vec(-1.0f64..1.0, 1..60), obs in -1.2f64..1.2) {
            let p = p_value(obs, &null).unwrap();
            let k = p * (1 + null.len()) as f64 - 1.0;
            prop_assert!((k - k.round()).abs() < 1e-9);
            prop_assert!(p > 0.0 && p <= 1.0);
        }

        #[test]
        fn p_value_is_monotone_in_the_observed_statistic(null in prop::collection::vec(-1.0f64..1.0, 1..60), obs in -1.2f64..1.2, drop in 0.0f64..1.0) {
            prop_assert!(p_value(obs - drop, &null).unwrap() >= p_value(obs, &null).unwrap());
        }

        #[test]
        fn reject_iff_below_alpha(seed in 0u64..4) {
            let g = gen_gaussian_oracle(1, 30, 0.9, seed).unwrap();
            let r = run_cdcit(&g.data, SamplerSource::Oracle(&g.law), &quick_config(3, seed)).unwrap();
            prop_assert_eq!(r.reject, r.p_value < r.alpha);
        }
    }
}
