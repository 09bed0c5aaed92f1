//! Experiment harness: rejection-rate sweeps, the conditional-quantile
//! comparison, and small distributional diagnostics.

use std::time::Instant;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crt::{run_cdcit, SamplerKind, SamplerSource, TestConfig};
use crate::diffusion::{sample_repeated, train_score, DiffusionConfig, ReverseSchedule, ScoreModel};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream, tag};
use crate::synthetic::{generate, Hypothesis, ModelId, Scenario, ScenarioSpec};

/// Named size presets for sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Fast,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(Profile::Fast),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::Usage(format!("unknown profile `{s}` (expected fast or paper)"))),
        }
    }
}

impl Profile {
    pub fn trials(self) -> usize {
        match self {
            Profile::Fast => 50,
            Profile::Paper => 100,
        }
    }

    /// Null repetitions B.
    pub fn repetitions(self) -> usize {
        match self {
            Profile::Fast => 50,
            Profile::Paper => 100,
        }
    }

    /// Reverse-SDE steps K.
    pub fn sampler_steps(self) -> usize {
        match self {
            Profile::Fast => 200,
            Profile::Paper => 1000,
        }
    }

    /// Repetitions of the quantile comparison.
    pub fn quantile_reps(self) -> usize {
        match self {
            Profile::Fast => 20,
            Profile::Paper => 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub spec: ScenarioSpec,
    pub p_value: f64,
    pub reject: bool,
    pub cmi_observed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub scenario: Scenario,
    pub train_size: usize,
    pub test_size: usize,
    pub alpha: f64,
    pub seed: u64,
    pub config: TestConfig,
    pub trials: Vec<TrialRecord>,
    pub rejection_rate: f64,
    /// `sqrt(r (1 - r) / trials)`.
    pub standard_error: f64,
    /// Wall-clock seconds per trial.
    pub timings: Vec<f64>,
}

/// Fraction of p-values strictly below `alpha`.
pub fn rejection_rate(p_values: &[f64], alpha: f64) -> f64 {
    p_values.iter().filter(|&&p| p < alpha).count() as f64 / p_values.len() as f64
}

/// Seed of trial `t` under master seed `seed`.
pub fn trial_seed(seed: u64, t: usize) -> u64 {
    derive_seed(seed, &[tag::TRIAL, t as u64])
}

/// Runs `trials` independent tests. Each trial draws `train_size + test_size`
/// rows; the first `train_size` train the sampler (ignored by the oracle
/// sampler) and the next `test_size` are tested.
pub fn run_trials(
    scenario: &Scenario,
    trials: usize,
    config: &TestConfig,
    train_size: usize,
    test_size: usize,
    seed: u64,
) -> Result<TrialReport> {
    run_trials_with_progress(scenario, trials, config, train_size, test_size, seed, |_| {})
}

pub fn run_trials_with_progress<F>(
    scenario: &Scenario,
    trials: usize,
    config: &TestConfig,
    train_size: usize,
    test_size: usize,
    seed: u64,
    progress: F,
) -> Result<TrialReport>
where
    F: Fn(&TrialRecord) + Sync,
{
    if trials == 0 {
        return Err(Error::Usage("--trials must be at least 1".into()));
    }
    scenario.validate()?;
    if scenario.model.is_sampler_model() {
        return Err(Error::Usage(format!("{} has no Y block to test", scenario.model)));
    }
    let learned = config.sampler_kind == SamplerKind::LearnedDiffusion;
    if learned && train_size == 0 {
        return Err(Error::input("the learned sampler needs a nonempty training split"));
    }
    let outcomes = (0..trials)
        .into_par_iter()
        .map(|t| {
            let start = Instant::now();
            let s = trial_seed(seed, t);
            let total = if learned { train_size + test_size } else { test_size };
            let g = generate(scenario, total, s)?;
            let offset = total - test_size;
            let test = g.data.slice_rows(offset, total);
            let trial_config = TestConfig {
                seed: s,
                ..config.clone()
            };
            let result = if learned {
                let unlabeled = g.data.slice_rows(0, offset).to_unlabeled();
                run_cdcit(&test, SamplerSource::Unlabeled(&unlabeled), &trial_config)?
            } else {
                run_cdcit(&test, SamplerSource::Oracle(&g.law), &trial_config)?
            };
            let record = TrialRecord {
                index: t,
                spec: g.scenario,
                p_value: result.p_value,
                reject: result.reject,
                cmi_observed: result.cmi_observed,
            };
            progress(&record);
            Ok((record, start.elapsed().as_secs_f64()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (records, timings): (Vec<_>, Vec<_>) = outcomes.into_iter().unzip();
    let ps: Vec<f64> = records.iter().map(|r| r.p_value).collect();
    let rate = rejection_rate(&ps, config.alpha);
    Ok(TrialReport {
        scenario: scenario.clone(),
        train_size: if learned { train_size } else { 0 },
        test_size,
        alpha: config.alpha,
        seed,
        config: config.clone(),
        trials: records,
        rejection_rate: rate,
        standard_error: (rate * (1.0 - rate) / trials as f64).sqrt(),
        timings,
    })
}

/// Quantile levels of the sampler comparison.
pub const TAUS: [f64; 5] = [0.05, 0.25, 0.50, 0.75, 0.95];

/// Linear-interpolation quantile: position `h = (m - 1) tau + 1` in the
/// sorted sample (1-based), interpolated between neighbours.
pub fn empirical_quantile(samples: &[f64], tau: f64) -> Result<f64> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, tau)
}

/// As [`empirical_quantile`] on already sorted input.
pub fn quantile_sorted(sorted: &[f64], tau: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::input("quantile of an empty sample"));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::domain(format!("quantile level must lie in [0, 1], got {tau}")));
    }
    let h = (sorted.len() - 1) as f64 * tau;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Which sampler supplies the conditional draws in the quantile comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantileSampler {
    /// Score model trained on the model's draws.
    Diffusion,
    /// Draws from the true conditional law.
    Perfect,
    /// Unconditional draws of X, ignoring z.
    Marginal,
}

impl std::str::FromStr for QuantileSampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diffusion" => Ok(QuantileSampler::Diffusion),
            "perfect" => Ok(QuantileSampler::Perfect),
            "marginal" => Ok(QuantileSampler::Marginal),
            _ => Err(Error::Usage(format!("unknown sampler `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileConfig {
    pub repetitions: usize,
    pub samples_per_rep: usize,
    /// Rows used to train the diffusion sampler.
    pub train_size: usize,
    /// Draws from the true conditional law that define the reference quantiles.
    pub reference_draws: usize,
    pub diffusion: DiffusionConfig,
}

impl Default for QuantileConfig {
    fn default() -> Self {
        QuantileConfig {
            repetitions: 100,
            samples_per_rep: 500,
            train_size: 500,
            reference_draws: 1_000_000,
            diffusion: DiffusionConfig::low_dimensional(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileRow {
    pub tau: f64,
    pub mse: f64,
    /// Standard deviation of the squared errors over repetitions.
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileReport {
    pub model: ModelId,
    pub sampler: QuantileSampler,
    pub repetitions: usize,
    pub seed: u64,
    pub config: QuantileConfig,
    pub rows: Vec<QuantileRow>,
}

/// One repetition's conditioning vector and generated draws.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileDraws {
    pub z: Vec<f64>,
    pub samples: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct QuantileRun {
    pub report: QuantileReport,
    pub draws: Vec<QuantileDraws>,
    /// The trained score model, for the diffusion sampler.
    pub model: Option<ScoreModel>,
}

/// Sample mean and sample standard deviation (divisor `m - 1`).
pub fn mean_and_sd(values: &[f64]) -> (f64, f64) {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, var.sqrt())
}

/// Squared-error comparison of conditional quantiles for M1, M2 or M3.
pub fn quantile_mse(
    model: ModelId,
    sampler: QuantileSampler,
    config: &QuantileConfig,
    seed: u64,
) -> Result<QuantileRun> {
    if !model.is_sampler_model() {
        return Err(Error::Usage(format!(
            "quantile comparison supports m1, m2, m3; got {model}"
        )));
    }
    if config.repetitions == 0 || config.samples_per_rep == 0 || config.reference_draws == 0 {
        return Err(Error::input(
            "repetitions, samples and reference draws must be positive",
        ));
    }
    let scenario = Scenario::new(model, Hypothesis::H0, 0);
    let training = generate(
        &scenario,
        config.train_size.max(1),
        derive_seed(seed, &[tag::QUANTILE, 0]),
    )?;
    let law = training.law.clone();
    let score = match sampler {
        QuantileSampler::Diffusion => Some(train_score(&training.data, &config.diffusion, seed)?),
        _ => None,
    };
    let per_rep = (0..config.repetitions)
        .into_par_iter()
        .map(|rep| {
            let rep_seed = derive_seed(seed, &[tag::QUANTILE, 1, rep as u64]);
            let z = generate(&scenario, 1, rep_seed)?.data.z().row(0).to_owned();
            let mut rng = stream(rep_seed, &[tag::QUANTILE, 2]);
            let mut reference: Vec<f64> = (0..config.reference_draws)
                .map(|_| law.draw(z.view(), &mut rng)[0])
                .collect();
            reference.sort_by(f64::total_cmp);
            let samples: Vec<f64> = match sampler {
                QuantileSampler::Diffusion => {
                    let m = score.as_ref().expect("trained");
                    let schedule = ReverseSchedule::for_model(m, config.diffusion.sampler_steps);
                    sample_repeated(
                        m,
                        z.as_slice().expect("contiguous"),
                        config.samples_per_rep,
                        schedule,
                        seed,
                        &[tag::QUANTILE, rep as u64],
                    )?
                    .column(0)
                    .to_vec()
                }
                QuantileSampler::Perfect => {
                    let mut rng = stream(rep_seed, &[tag::QUANTILE, 3]);
                    (0..config.samples_per_rep)
                        .map(|_| law.draw(z.view(), &mut rng)[0])
                        .collect()
                }
                QuantileSampler::Marginal => generate(
                    &scenario,
                    config.samples_per_rep,
                    derive_seed(rep_seed, &[tag::QUANTILE, 4]),
                )?
                .data
                .x()
                .column(0)
                .to_vec(),
            };
            let mut sorted = samples.clone();
            sorted.sort_by(f64::total_cmp);
            let errors = TAUS
                .iter()
                .map(|&tau| Ok((quantile_sorted(&sorted, tau)? - quantile_sorted(&reference, tau)?).powi(2)))
                .collect::<Result<Vec<f64>>>()?;
            Ok((QuantileDraws { z: z.to_vec(), samples }, errors))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = TAUS
        .iter()
        .enumerate()
        .map(|(k, &tau)| {
            let errs: Vec<f64> = per_rep.iter().map(|(_, e)| e[k]).collect();
            let (mse, sd) = mean_and_sd(&errs);
            QuantileRow { tau, mse, sd }
        })
        .collect();
    Ok(QuantileRun {
        report: QuantileReport {
            model,
            sampler,
            repetitions: config.repetitions,
            seed,
            config: config.clone(),
            rows,
        },
        draws: per_rep.into_iter().map(|(d, _)| d).collect(),
        model: score,
    })
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::input("KS distance needs two nonempty samples"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// One-sample KS statistic against a continuous CDF.
pub fn ks_against<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::input("KS distance of an empty sample"));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() as f64;
    Ok(s.iter().enumerate().fold(0.0, |d: f64, (k, &v)| {
        let f = cdf(v);
        d.max(((k + 1) as f64 / m - f).abs()).max((f - k as f64 / m).abs())
    }))
}

/// Silverman's rule `1.06 sd m^(-1/5)`.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::input("a density estimate needs at least two samples"));
    }
    let (_, sd) = mean_and_sd(samples);
    if !(sd > 0.0) {
        return Err(Error::domain("constant samples give a degenerate bandwidth"));
    }
    Ok(1.06 * sd * (samples.len() as f64).powf(-0.2))
}

/// Gaussian-kernel density estimate at each evaluation point, returned as
/// `(point, density)` pairs.
pub fn gaussian_kde(samples: &[f64], points: &[f64]) -> Result<Vec<(f64, f64)>> {
    let h = silverman_bandwidth(samples)?;
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let s = Array1::from_vec(samples.to_vec());
    Ok(points
        .iter()
        .map(|&p| {
            let dens = s.iter().map(|&v| (-0.5 * ((p - v) / h).powi(2)).exp()).sum::<f64>() * norm;
            (p, dens)
        })
        .collect())
}

/// Evenly spaced grid of `count` points on `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count < 2 {
        return vec![lo];
    }
    let step = (hi - lo) / (count - 1) as f64;
    (0..count).map(|k| lo + k as f64 * step).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cmi::CmiConfig;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(m: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, &[]);
        (0..m).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn normal_pdf(x: f64) -> f64 {
        (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(empirical_quantile(&[1.0, 2.0, 3.0], 0.5).unwrap(), 2.0);
        let v = [4.0, -1.0, 9.0, 2.5];
        assert_eq!(empirical_quantile(&v, 0.0).unwrap(), -1.0);
        assert_eq!(empirical_quantile(&v, 1.0).unwrap(), 9.0);
        assert!(matches!(empirical_quantile(&[], 0.5), Err(Error::Input(_))));
    }

    #[test]
    fn quantile_matches_hand_interpolation() {
        let mut rng = stream(12, &[]);
        let v: Vec<f64> = (0..10).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut s = v.clone();
        // Insertion sort, independent of the library path.
        for i in 1..s.len() {
            let mut j = i;
            while j > 0 && s[j - 1] > s[j] {
                s.swap(j - 1, j);
                j -= 1;
            }
        }
        for tau in [0.05, 0.25, 0.5, 0.75, 0.95, 0.33] {
            let h: f64 = 9.0 * tau + 1.0;
            let k = h.floor() as usize;
            let want = if k >= 10 {
                s[9]
            } else {
                s[k - 1] + (h - k as f64) * (s[k] - s[k - 1])
            };
            assert!((empirical_quantile(&v, tau).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn ks_examples() {
        let a = normals(100, 1);
        assert_eq!(ks_distance(&a, &a).unwrap(), 0.0);
        let low: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let high: Vec<f64> = (0..30).map(|i| 100.0 + i as f64).collect();
        assert_eq!(ks_distance(&low, &high).unwrap(), 1.0);
        assert!(ks_distance(&[], &a).is_err());
    }

    #[test]
    fn ks_of_two_normal_samples_is_small() {
        let below = (0..100)
            .filter(|&s| ks_distance(&normals(5000, 2 * s), &normals(5000, 2 * s + 1)).unwrap() < 0.05)
            .count();
        assert!(below >= 95, "{below} of 100");
    }

    #[test]
    fn kde_is_normalized_symmetric_and_accurate() {
        let s = normals(5000, 4);
        let grid = linspace(-8.0, 8.0, 1601);
        let dens = gaussian_kde(&s, &grid).unwrap();
        assert!(dens.iter().all(|&(_, d)| d >= 0.0));
        let area: f64 = dens
            .windows(2)
            .map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0))
            .sum();
        assert!((area - 1.0).abs() <= 0.02, "area {area}");
        let on = linspace(-3.0, 3.0, 61);
        let est = gaussian_kde(&s, &on).unwrap();
        let worst = est.iter().map(|&(x, d)| (d - normal_pdf(x)).abs()).fold(0.0, f64::max);
        assert!(worst <= 0.05, "max deviation {worst}");

        let sym = [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0];
        let pts = [-1.3, 1.3, -0.2, 0.2];
        let d = gaussian_kde(&sym, &pts).unwrap();
        assert!((d[0].1 - d[1].1).abs() < 1e-15 && (d[2].1 - d[3].1).abs() < 1e-15);
        assert!(matches!(gaussian_kde(&[1.0, 1.0, 1.0], &pts), Err(Error::Domain(_))));
        assert!(gaussian_kde(&[1.0], &pts).is_err());
    }

    fn oracle_config(b: usize) -> TestConfig {
        TestConfig {
            repetitions: b,
            sampler_kind: SamplerKind::AnalyticGaussianOracle,
            cmi: CmiConfig {
                hidden_widths: vec![8],
                epochs: 10,
                ..CmiConfig::default()
            },
            ..TestConfig::default()
        }
    }

    #[test]
    fn single_trial_rate_is_zero_or_one() {
        let sc = Scenario::new(ModelId::GaussianOracle, Hypothesis::H0, 2);
        let r = run_trials(&sc, 1, &oracle_config(5), 0, 60, 3).unwrap();
        assert!(r.rejection_rate == 0.0 || r.rejection_rate == 1.0);
        assert!(matches!(
            run_trials(&sc, 0, &oracle_config(5), 0, 60, 3),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn trial_report_is_reproducible() {
        let sc = Scenario::new(ModelId::Postnonlinear, Hypothesis::H1, 3);
        let mut a = run_trials(&sc, 3, &oracle_config(4), 0, 40, 8).unwrap();
        let b = run_trials(&sc, 3, &oracle_config(4), 0, 40, 8).unwrap();
        a.timings = b.timings.clone();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let ps: Vec<f64> = a.trials.iter().map(|t| t.p_value).collect();
        assert_eq!(a.rejection_rate, rejection_rate(&ps, 0.05));
    }

    #[test]
    fn rejection_uses_strict_inequality() {
        assert_eq!(rejection_rate(&[0.05, 0.049, 0.5, 1.0], 0.05), 0.25);
    }

    #[test]
    fn m3_reference_median_at_zero_is_zero() {
        let law = crate::synthetic::ConditionalLaw::M3;
        let z = Array1::zeros(20);
        let mut rng = stream(5, &[]);
        let draws: Vec<f64> = (0..200_000).map(|_| law.draw(z.view(), &mut rng)[0]).collect();
        assert!(empirical_quantile(&draws, 0.5).unwrap().abs() < 0.005);
    }

    #[test]
    fn perfect_sampler_beats_the_marginal_on_m1() {
        let cfg = QuantileConfig {
            repetitions: 10,
            reference_draws: 100_000,
            ..QuantileConfig::default()
        };
        let perfect = quantile_mse(ModelId::M1, QuantileSampler::Perfect, &cfg, 2)
            .unwrap()
            .report;
        let marginal = quantile_mse(ModelId::M1, QuantileSampler::Marginal, &cfg, 2)
            .unwrap()
            .report;
        let median = |r: &QuantileReport| r.rows[2].mse;
        assert!(median(&perfect) < median(&marginal));
        assert_eq!(perfect.rows.len(), 5);
        assert!(perfect.rows.iter().all(|r| r.mse >= 0.0 && r.sd >= 0.0));
    }

    #[test]
    fn perfect_sampler_error_is_sampling_noise() {
        // M3 at any z is N(mu, 0.33^2); the median of 500 draws has variance
        // about pi/2 * 0.1089 / 500.
        let cfg = QuantileConfig {
            repetitions: 30,
            reference_draws: 200_000,
            ..QuantileConfig::default()
        };
        let r = quantile_mse(ModelId::M3, QuantileSampler::Perfect, &cfg, 4)
            .unwrap()
            .report;
        let bound = std::f64::consts::FRAC_PI_2 * 0.1089 / 500.0;
        assert!(r.rows[2].mse < 3.0 * bound, "{} vs {bound}", r.rows[2].mse);
        assert!(matches!(
            quantile_mse(ModelId::Mixed, QuantileSampler::Perfect, &cfg, 4),
            Err(Error::Usage(_))
        ));
    }
}
