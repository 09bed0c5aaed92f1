//! Conditional score models: denoising score matching on the
//! Ornstein–Uhlenbeck forward process and Euler–Maruyama integration of the
//! approximate reverse SDE.
//!
//! Forward process: `dX = -X/2 dt + dB`, with closed-form marginal
//! `X(t) = e^{-t/2} X(0) + sqrt(1 - e^{-t}) eps`. The score network sees the
//! concatenation `(x, z, t)` with `t` fed raw.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamState, DenseNetwork, Gradients, NetworkDocument, OutputActivation};
use crate::rng::{stream, tag, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeDrawMode {
    /// One diffusion time per optimization step, shared by the whole batch.
    SharedPerStep,
    /// An independent diffusion time for every sample.
    PerSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub terminal_time: f64,
    pub early_stop_time: f64,
    pub sampler_steps: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub hidden_widths: Vec<usize>,
    pub time_draw_mode: TimeDrawMode,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            terminal_time: 10.0,
            early_stop_time: 0.01,
            sampler_steps: 1000,
            epochs: 1500,
            learning_rate: 0.01,
            hidden_widths: vec![128, 128, 128],
            time_draw_mode: TimeDrawMode::PerSample,
        }
    }
}

impl DiffusionConfig {
    /// Three hidden layers of 16, used for the low-dimensional M1–M3 models.
    pub fn low_dimensional() -> Self {
        DiffusionConfig {
            hidden_widths: vec![16, 16, 16],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.early_stop_time > 0.0 && self.early_stop_time < self.terminal_time) {
            return Err(Error::domain(format!(
                "need 0 < t_min < T, got t_min = {}, T = {}",
                self.early_stop_time, self.terminal_time
            )));
        }
        if !self.terminal_time.is_finite() {
            return Err(Error::domain("terminal time must be finite"));
        }
        if self.sampler_steps == 0 {
            return Err(Error::domain("sampler needs at least one step"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::domain("learning rate must be positive"));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::domain("hidden widths must be positive"));
        }
        Ok(())
    }

    pub fn reverse_schedule(&self) -> ReverseSchedule {
        ReverseSchedule {
            terminal_time: self.terminal_time,
            early_stop_time: self.early_stop_time,
            steps: self.sampler_steps,
        }
    }
}

/// `e^{-t/2} x0 + sqrt(1 - e^{-t}) noise`.
pub fn forward_marginal(x0: &[f64], t: f64, noise: &[f64]) -> Result<Vec<f64>> {
    if !(t >= 0.0) {
        return Err(Error::domain(format!("diffusion time must be non-negative, got {t}")));
    }
    if x0.len() != noise.len() {
        return Err(Error::shape("x0 and noise lengths differ"));
    }
    let (mean_coef, sd) = marginal_coefficients(t);
    Ok(x0.iter().zip(noise).map(|(x, e)| mean_coef * x + sd * e).collect())
}

fn marginal_coefficients(t: f64) -> (f64, f64) {
    ((-0.5 * t).exp(), (-(-t).exp_m1()).sqrt())
}

/// `grad log p_t(x | z)` when `X(0) | Z ~ N(mu, sigma2 I)`:
/// `-(x - e^{-t/2} mu) / (e^{-t} sigma2 + 1 - e^{-t})`.
pub fn analytic_gaussian_score(mu: &[f64], sigma2: f64, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    if !(sigma2 > 0.0) {
        return Err(Error::domain("variance must be positive"));
    }
    if !(t >= 0.0) {
        return Err(Error::domain("diffusion time must be non-negative"));
    }
    if mu.len() != x.len() {
        return Err(Error::shape("mu and x lengths differ"));
    }
    let decay = (-t).exp();
    let var_t = decay * sigma2 - (-t).exp_m1();
    let mean_coef = (-0.5 * t).exp();
    Ok(x.iter()
        .zip(mu)
        .map(|(xi, mi)| -(xi - mean_coef * mi) / var_t)
        .collect())
}

/// Anything that can evaluate a conditional score for a batch of rows.
pub trait ScoreFunction: Sync {
    fn d_x(&self) -> usize;
    fn d_z(&self) -> usize;
    /// Row `i` of the result is `s(x_i, z_i, t)`.
    fn score_batch(&self, x: ArrayView2<'_, f64>, z: ArrayView2<'_, f64>, t: f64) -> Result<Array2<f64>>;
}

/// Exact score of a conditionally Gaussian target `N(mean(z), sigma2 I)`.
pub struct GaussianScore<F> {
    pub mean: F,
    pub sigma2: f64,
    pub d_x: usize,
    pub d_z: usize,
}

impl<F> ScoreFunction for GaussianScore<F>
where
    F: Fn(ArrayView1<'_, f64>) -> Array1<f64> + Sync,
{
    fn d_x(&self) -> usize {
        self.d_x
    }

    fn d_z(&self) -> usize {
        self.d_z
    }

    fn score_batch(&self, x: ArrayView2<'_, f64>, z: ArrayView2<'_, f64>, t: f64) -> Result<Array2<f64>> {
        let mut out = Array2::zeros(x.raw_dim());
        for ((xr, zr), mut o) in x.rows().into_iter().zip(z.rows()).zip(out.rows_mut()) {
            let mu = (self.mean)(zr);
            let score = analytic_gaussian_score(mu.as_slice().expect("contiguous"), self.sigma2, t, &xr.to_vec())?;
            o.assign(&Array1::from_vec(score));
        }
        Ok(out)
    }
}

/// Trained conditional score network with the schedule it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel {
    network: DenseNetwork,
    d_x: usize,
    d_z: usize,
    schedule: DiffusionConfig,
}

impl ScoreModel {
    pub fn new(network: DenseNetwork, d_x: usize, d_z: usize, schedule: DiffusionConfig) -> Result<Self> {
        if network.input_width() != d_x + d_z + 1 || network.output_width() != d_x {
            return Err(Error::shape(format!(
                "score network {} does not fit d_x = {d_x}, d_z = {d_z}",
                network
            )));
        }
        if network.output_activation() != OutputActivation::Identity {
            return Err(Error::shape("score network must have an identity output"));
        }
        schedule.validate()?;
        Ok(ScoreModel {
            network,
            d_x,
            d_z,
            schedule,
        })
    }

    /// A freshly initialized (untrained) model.
    pub fn initialize<R: Rng + ?Sized>(d_x: usize, d_z: usize, config: &DiffusionConfig, rng: &mut R) -> Result<Self> {
        let mut dims = vec![d_x + d_z + 1];
        dims.extend(&config.hidden_widths);
        dims.push(d_x);
        let network = DenseNetwork::new(&dims, OutputActivation::Identity, rng)?;
        ScoreModel::new(network, d_x, d_z, config.clone())
    }

    pub fn network(&self) -> &DenseNetwork {
        &self.network
    }

    pub fn schedule(&self) -> &DiffusionConfig {
        &self.schedule
    }

    fn network_inputs(
        &self,
        x: ArrayView2<'_, f64>,
        z: ArrayView2<'_, f64>,
        times: ArrayView1<'_, f64>,
    ) -> Array2<f64> {
        let t = times.insert_axis(Axis(1));
        concatenate(Axis(1), &[x, z, t]).expect("rows agree")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ScoreModelDocument::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ScoreModelDocument =
            serde_json::from_str(text).map_err(|e| Error::Version(format!("unreadable model document: {e}")))?;
        ScoreModel::try_from(doc)
    }
}

impl ScoreFunction for ScoreModel {
    fn d_x(&self) -> usize {
        self.d_x
    }

    fn d_z(&self) -> usize {
        self.d_z
    }

    fn score_batch(&self, x: ArrayView2<'_, f64>, z: ArrayView2<'_, f64>, t: f64) -> Result<Array2<f64>> {
        if x.ncols() != self.d_x || z.ncols() != self.d_z || x.nrows() != z.nrows() {
            return Err(Error::shape(format!(
                "score model expects x width {} and z width {}, got {} and {}",
                self.d_x,
                self.d_z,
                x.ncols(),
                z.ncols()
            )));
        }
        let times = Array1::from_elem(x.nrows(), t);
        self.network
            .forward_batch(self.network_inputs(x, z, times.view()).view())
    }
}

pub const SCORE_MODEL_FORMAT: &str = "cdcit-score-model/1";

/// Cache form: the network document plus `{d_x, d_z, T, t_min}` and the
/// training configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreModelDocument {
    pub format: String,
    pub d_x: usize,
    pub d_z: usize,
    #[serde(rename = "T")]
    pub terminal_time: f64,
    pub t_min: f64,
    pub training: DiffusionConfig,
    #[serde(flatten)]
    pub network: NetworkDocument,
}

impl From<&ScoreModel> for ScoreModelDocument {
    fn from(model: &ScoreModel) -> Self {
        ScoreModelDocument {
            format: SCORE_MODEL_FORMAT.to_string(),
            d_x: model.d_x,
            d_z: model.d_z,
            terminal_time: model.schedule.terminal_time,
            t_min: model.schedule.early_stop_time,
            training: model.schedule.clone(),
            network: model.network.clone().into(),
        }
    }
}

impl TryFrom<ScoreModelDocument> for ScoreModel {
    type Error = Error;

    fn try_from(doc: ScoreModelDocument) -> Result<Self> {
        if doc.format != SCORE_MODEL_FORMAT {
            return Err(Error::Version(format!(
                "model format `{}`, expected `{SCORE_MODEL_FORMAT}`",
                doc.format
            )));
        }
        let network = DenseNetwork::try_from(doc.network).map_err(|e| Error::Version(format!("network block: {e}")))?;
        let mut schedule = doc.training;
        schedule.terminal_time = doc.terminal_time;
        schedule.early_stop_time = doc.t_min;
        ScoreModel::new(network, doc.d_x, doc.d_z, schedule).map_err(|e| Error::Version(e.to_string()))
    }
}

/// Per-row residuals of the denoising objective
/// `s + (x_t - e^{-t/2} x0) / (1 - e^{-t})` and the summed squared loss.
pub fn denoising_residuals(
    output: ArrayView2<'_, f64>,
    x0: ArrayView2<'_, f64>,
    xt: ArrayView2<'_, f64>,
    times: ArrayView1<'_, f64>,
) -> (f64, Array2<f64>) {
    let mut residual = output.to_owned();
    for (i, mut r) in residual.rows_mut().into_iter().enumerate() {
        let t = times[i];
        let mean_coef = (-0.5 * t).exp();
        let denom = -(-t).exp_m1();
        Zip::from(&mut r)
            .and(xt.row(i))
            .and(x0.row(i))
            .for_each(|r, &xt, &x0| *r += (xt - mean_coef * x0) / denom);
    }
    let loss = residual.iter().map(|r| r * r).sum();
    (loss, residual)
}

/// Denoising score-matching loss over a batch and its parameter gradients.
/// `times[i]` and `noises` row `i` perturb sample `i`.
pub fn score_matching_loss(
    model: &ScoreModel,
    x0: ArrayView2<'_, f64>,
    z: ArrayView2<'_, f64>,
    times: ArrayView1<'_, f64>,
    noises: ArrayView2<'_, f64>,
) -> Result<(f64, Gradients)> {
    let n = x0.nrows();
    if z.nrows() != n || times.len() != n || noises.dim() != x0.dim() {
        return Err(Error::shape("batch blocks disagree in length"));
    }
    if x0.ncols() != model.d_x || z.ncols() != model.d_z {
        return Err(Error::shape("batch widths do not match the score model"));
    }
    let t_min = model.schedule.early_stop_time;
    if let Some(bad) = times.iter().find(|&&t| !(t >= t_min)) {
        return Err(Error::domain(format!("diffusion time {bad} is below t_min = {t_min}")));
    }
    let mut xt = Array2::zeros(x0.raw_dim());
    for i in 0..n {
        let (mean_coef, sd) = marginal_coefficients(times[i]);
        Zip::from(xt.row_mut(i))
            .and(x0.row(i))
            .and(noises.row(i))
            .for_each(|o, &x, &e| *o = mean_coef * x + sd * e);
    }
    let inputs = model.network_inputs(xt.view(), z, times);
    let trace = model.network.forward_trace(inputs.view())?;
    let (loss, residual) = denoising_residuals(trace.pre_output.view(), x0, xt.view(), times);
    let grads = model.network.backward_pre_output(&trace, residual * 2.0);
    Ok((loss, grads))
}

/// Trains a conditional score model on an (X, Z) set. Full-batch Adam for
/// `config.epochs` steps; a pure function of `(unlabeled, config, seed)`.
pub fn train_score(unlabeled: &Dataset, config: &DiffusionConfig, seed: u64) -> Result<ScoreModel> {
    train_score_with_progress(unlabeled, config, seed, |_, _| {})
}

pub fn train_score_with_progress(
    unlabeled: &Dataset,
    config: &DiffusionConfig,
    seed: u64,
    mut progress: impl FnMut(usize, f64),
) -> Result<ScoreModel> {
    config.validate()?;
    if unlabeled.n() < 2 {
        return Err(Error::input(format!(
            "score training needs at least 2 rows, got {}",
            unlabeled.n()
        )));
    }
    if unlabeled.d_x() == 0 {
        return Err(Error::input("score training needs at least one X column"));
    }
    let mut rng = stream(seed, &[tag::SCORE_TRAIN]);
    let mut model = ScoreModel::initialize(unlabeled.d_x(), unlabeled.d_z(), config, &mut rng)?;
    let mut adam = AdamState::new(&model.network, config.learning_rate);
    let times_dist = Uniform::new_inclusive(config.early_stop_time, config.terminal_time)
        .map_err(|e| Error::domain(e.to_string()))?;
    let n = unlabeled.n();
    let x0 = unlabeled.x();
    let z = unlabeled.z();
    for epoch in 0..config.epochs {
        let times: Array1<f64> = match config.time_draw_mode {
            TimeDrawMode::SharedPerStep => Array1::from_elem(n, times_dist.sample(&mut rng)),
            TimeDrawMode::PerSample => Array1::from_shape_simple_fn(n, || times_dist.sample(&mut rng)),
        };
        let noises = Array2::from_shape_simple_fn(x0.raw_dim(), || StandardNormal.sample(&mut rng));
        let (loss, grads) = score_matching_loss(&model, x0, z, times.view(), noises.view())?;
        if !loss.is_finite() {
            return Err(Error::numeric(format!("score loss diverged at epoch {epoch}")));
        }
        adam_step(&mut model.network, &mut adam, &grads).map_err(|e| Error::numeric(format!("epoch {epoch}: {e}")))?;
        progress(epoch, loss);
    }
    Ok(model)
}

/// Time grid for the reverse-time Euler–Maruyama integrator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReverseSchedule {
    pub terminal_time: f64,
    pub early_stop_time: f64,
    pub steps: usize,
}

impl ReverseSchedule {
    pub fn for_model(model: &ScoreModel, steps: usize) -> Self {
        ReverseSchedule {
            terminal_time: model.schedule.terminal_time,
            early_stop_time: model.schedule.early_stop_time,
            steps,
        }
    }

    pub fn step_size(&self) -> f64 {
        (self.terminal_time - self.early_stop_time) / self.steps as f64
    }
}

/// Integrates the approximate reverse SDE from `N(0, I)` over `[0, T - t_min]`
/// in `steps` equal increments, one row per conditioning vector. Row `i`
/// draws all of its Gaussian noise from `rngs[i]`.
pub fn integrate_reverse<S: ScoreFunction + ?Sized>(
    score: &S,
    z: ArrayView2<'_, f64>,
    schedule: ReverseSchedule,
    rngs: &mut [StreamRng],
) -> Result<Array2<f64>> {
    if z.ncols() != score.d_z() {
        return Err(Error::shape(format!(
            "conditioning width {}, sampler expects {}",
            z.ncols(),
            score.d_z()
        )));
    }
    if rngs.len() != z.nrows() {
        return Err(Error::shape("one random stream per row is required"));
    }
    if schedule.steps == 0 || !(schedule.early_stop_time < schedule.terminal_time) {
        return Err(Error::domain("reverse schedule needs K >= 1 and t_min < T"));
    }
    let d_x = score.d_x();
    let n = z.nrows();
    let dt = schedule.step_size();
    let sqrt_dt = dt.sqrt();
    let mut x = Array2::zeros((n, d_x));
    for (mut row, rng) in x.rows_mut().into_iter().zip(rngs.iter_mut()) {
        row.mapv_inplace(|_| StandardNormal.sample(rng));
    }
    let mut noise = Array2::<f64>::zeros((n, d_x));
    for k in 0..schedule.steps {
        let t_k = k as f64 * dt;
        let s = score.score_batch(x.view(), z, schedule.terminal_time - t_k)?;
        for (mut row, rng) in noise.rows_mut().into_iter().zip(rngs.iter_mut()) {
            row.mapv_inplace(|_| StandardNormal.sample(rng));
        }
        Zip::from(&mut x)
            .and(&s)
            .and(&noise)
            .for_each(|x, &s, &e| *x += (0.5 * *x + s) * dt + sqrt_dt * e);
    }
    if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric(format!(
            "reverse integration diverged for row {}",
            pos / d_x.max(1)
        )));
    }
    Ok(x)
}

/// Row streams keyed by `(seed, keys.., row index)`.
pub fn row_streams(seed: u64, keys: &[u64], rows: usize) -> Vec<StreamRng> {
    let mut path = Vec::with_capacity(keys.len() + 2);
    path.push(tag::SAMPLER);
    path.extend_from_slice(keys);
    path.push(0);
    (0..rows)
        .map(|i| {
            *path.last_mut().expect("nonempty") = i as u64;
            stream(seed, &path)
        })
        .collect()
}

/// One pseudo-sample per row of `z`, with row streams keyed by
/// `(seed, keys.., row)`.
pub fn sample_rows<S: ScoreFunction + ?Sized>(
    score: &S,
    z: ArrayView2<'_, f64>,
    schedule: ReverseSchedule,
    seed: u64,
    keys: &[u64],
) -> Result<Array2<f64>> {
    let mut rngs = row_streams(seed, keys, z.nrows());
    integrate_reverse(score, z, schedule, &mut rngs)
}

/// A single pseudo-sample `X | Z = z` from a trained model using `steps`
/// Euler steps.
pub fn sample(z: &[f64], model: &ScoreModel, steps: usize, seed: u64) -> Result<Vec<f64>> {
    let zrow = ArrayView2::from_shape((1, z.len()), z).map_err(|e| Error::shape(e.to_string()))?;
    let out = sample_rows(model, zrow, ReverseSchedule::for_model(model, steps), seed, &[])?;
    Ok(out.row(0).to_vec())
}

/// `draws` pseudo-samples at one conditioning vector.
pub fn sample_repeated<S: ScoreFunction + ?Sized>(
    score: &S,
    z: &[f64],
    draws: usize,
    schedule: ReverseSchedule,
    seed: u64,
    keys: &[u64],
) -> Result<Array2<f64>> {
    let zrow = ArrayView1::from(z);
    let zs = zrow
        .insert_axis(Axis(0))
        .broadcast((draws, z.len()))
        .expect("row broadcast")
        .to_owned();
    sample_rows(score, zs.view(), schedule, seed, keys)
}

/// The x-part of a pseudo-sample batch, for callers holding a wider matrix.
pub fn x_columns(block: &Array2<f64>, d_x: usize) -> Array2<f64> {
    block.slice(s![.., ..d_x]).to_owned()
}
