//! Command-line driver behind the `cdcit` binary.
//!
//! JSON artifacts embed the resolved configuration, the seed, a version
//! string and an ISO-8601 `created_at` timestamp. CSV outputs get a
//! `<file>.meta.json` sidecar with the same fields. Apart from `created_at`
//! and the `timings` fields, artifacts depend only on inputs, flags and seed.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::{Array2, Axis};
use serde::Serialize;

use crate::bench::{quantile_mse, run_trials_with_progress, Profile, QuantileConfig, QuantileSampler, TAUS};
use crate::cmi::CmiConfig;
use crate::crt::{run_cdcit, SamplerKind, SamplerSource, TestConfig};
use crate::data::Dataset;
use crate::diffusion::{
    sample_rows, train_score_with_progress, DiffusionConfig, ReverseSchedule, ScoreFunction, ScoreModel, TimeDrawMode,
};
use crate::error::{Error, Result};
use crate::synthetic::{generate, ConditionalLaw, ModelId, Scenario};

pub const VERSION: &str = env!("CDCIT_VERSION");

#[derive(Debug, Parser)]
#[command(name = "cdcit", version = VERSION, about = "Conditional independence testing with a diffusion sampler and a CMI statistic")]
pub struct Cli {
    /// Master seed.
    #[arg(long, global = true, env = "CDCIT_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (0 = all cores). Outputs do not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one conditional independence test on a CSV dataset.
    Test(TestArgs),
    /// Rejection-rate sweep on a synthetic scenario.
    Bench(BenchArgs),
    /// Conditional-quantile comparison on M1, M2 or M3.
    SamplerEval(SamplerEvalArgs),
    /// Train a score model on an (X, Z) CSV and cache it as JSON.
    TrainSampler(TrainArgs),
    /// Draw conditional samples from a cached score model.
    Sample(SampleArgs),
    /// Write a synthetic dataset to CSV.
    Generate(GenerateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DiffusionFlags {
    /// Terminal time T of the forward process.
    #[arg(long, default_value_t = 10.0)]
    pub terminal_time: f64,
    /// Early-stopping time t_min.
    #[arg(long, default_value_t = 0.01)]
    pub early_stop_time: f64,
    /// Reverse-SDE steps K [default: 1000, or the profile's value].
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 1500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub learning_rate: f64,
    /// Comma-separated hidden widths [default: 128,128,128; 16,16,16 for sampler-eval].
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// per-sample or shared-per-step.
    #[arg(long, default_value = "per-sample")]
    pub time_draw: String,
}

impl DiffusionFlags {
    fn resolve(&self, default_hidden: &[usize], profile: Option<Profile>) -> Result<DiffusionConfig> {
        let time_draw_mode = match self.time_draw.as_str() {
            "per-sample" => TimeDrawMode::PerSample,
            "shared-per-step" => TimeDrawMode::SharedPerStep,
            other => return Err(Error::Usage(format!("unknown time draw mode `{other}`"))),
        };
        let steps = self.steps.or(profile.map(Profile::sampler_steps)).unwrap_or(1000);
        let cfg = DiffusionConfig {
            terminal_time: self.terminal_time,
            early_stop_time: self.early_stop_time,
            sampler_steps: steps,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            hidden_widths: self.hidden.clone().unwrap_or_else(|| default_hidden.to_vec()),
            time_draw_mode,
        };
        cfg.validate().map_err(as_usage)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct CmiFlags {
    /// Probability clip for the likelihood ratios.
    #[arg(long, default_value_t = 1e-3)]
    pub cmi_clip: f64,
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    pub cmi_hidden: Vec<usize>,
    #[arg(long, default_value_t = 300)]
    pub cmi_epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    pub cmi_learning_rate: f64,
}

impl CmiFlags {
    fn resolve(&self) -> Result<CmiConfig> {
        let cfg = CmiConfig {
            probability_clip: self.cmi_clip,
            hidden_widths: self.cmi_hidden.clone(),
            epochs: self.cmi_epochs,
            learning_rate: self.cmi_learning_rate,
        };
        cfg.validate().map_err(as_usage)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct CrtFlags {
    /// Null repetitions B [default: 100, or the profile's value].
    #[arg(long = "b")]
    pub repetitions: Option<usize>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// learned-diffusion or analytic-gaussian-oracle.
    #[arg(long, default_value = "learned-diffusion")]
    pub sampler: String,
    /// fast or paper.
    #[arg(long)]
    pub profile: Option<String>,
    #[command(flatten)]
    pub diffusion: DiffusionFlags,
    #[command(flatten)]
    pub cmi: CmiFlags,
}

impl CrtFlags {
    fn profile(&self) -> Result<Option<Profile>> {
        self.profile.as_deref().map(str::parse).transpose()
    }

    fn resolve(&self, seed: u64) -> Result<TestConfig> {
        let profile = self.profile()?;
        let sampler_kind = match self.sampler.as_str() {
            "learned-diffusion" => SamplerKind::LearnedDiffusion,
            "analytic-gaussian-oracle" => SamplerKind::AnalyticGaussianOracle,
            other => return Err(Error::Usage(format!("unknown sampler `{other}`"))),
        };
        let cfg = TestConfig {
            repetitions: self.repetitions.or(profile.map(Profile::repetitions)).unwrap_or(100),
            alpha: self.alpha,
            seed,
            diffusion: self.diffusion.resolve(&[128, 128, 128], profile)?,
            cmi: self.cmi.resolve()?,
            sampler_kind,
        };
        cfg.validate().map_err(as_usage)?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TestArgs {
    /// Test data CSV with x, y and z columns.
    #[arg(long)]
    pub data: PathBuf,
    /// (X, Z) CSV used to train the sampler.
    #[arg(long, conflicts_with = "model")]
    pub unlabeled: Option<PathBuf>,
    /// Cached score model JSON.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Result JSON path.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub crt: CrtFlags,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// m1 | m2 | m3 | postnonlinear | mixed | multivariate | gaussian-oracle.
    #[arg(long)]
    pub scenario: String,
    #[arg(long, default_value = "h0")]
    pub hypothesis: String,
    #[arg(long, default_value_t = 10)]
    pub dz: usize,
    /// X (and Y) dimension for the multivariate scenario.
    #[arg(long, default_value_t = 1)]
    pub dx: usize,
    /// Partial correlation for the Gaussian oracle scenario.
    #[arg(long, default_value_t = 0.0)]
    pub rho: f64,
    /// Number of trials [default: 100, or the profile's value].
    #[arg(long)]
    pub trials: Option<usize>,
    /// Sampler training rows N per trial.
    #[arg(long, default_value_t = 500)]
    pub train_size: usize,
    /// Test rows n per trial.
    #[arg(long, default_value_t = 500)]
    pub test_size: usize,
    /// Report JSON path; a per-trial CSV is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub crt: CrtFlags,
}

#[derive(Debug, Args)]
pub struct SamplerEvalArgs {
    /// m1 | m2 | m3.
    #[arg(long = "model")]
    pub model_id: String,
    /// diffusion | perfect | marginal.
    #[arg(long, default_value = "diffusion")]
    pub sampler: String,
    /// fast or paper.
    #[arg(long)]
    pub profile: Option<String>,
    /// Repetitions [default: 100, or the profile's value].
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long, default_value_t = 500)]
    pub samples_per_rep: usize,
    #[arg(long, default_value_t = 1_000_000)]
    pub reference_draws: usize,
    /// Report JSON path; per-tau CSV is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Raw generated samples for external density plots.
    #[arg(long)]
    pub samples_out: Option<PathBuf>,
    #[command(flatten)]
    pub diffusion: DiffusionFlags,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// (X, Z) CSV; any y columns are ignored.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub diffusion: DiffusionFlags,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// CSV of conditioning rows with z0.. columns.
    #[arg(long)]
    pub z: PathBuf,
    /// Draws per conditioning row.
    #[arg(long, default_value_t = 1)]
    pub draws: usize,
    /// Reverse-SDE steps K [default: the model's training value].
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub scenario: String,
    #[arg(long, default_value = "h0")]
    pub hypothesis: String,
    #[arg(long, default_value_t = 10)]
    pub dz: usize,
    #[arg(long, default_value_t = 1)]
    pub dx: usize,
    #[arg(long, default_value_t = 0.0)]
    pub rho: f64,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn as_usage(e: Error) -> Error {
    match e {
        Error::Domain(m) => Error::Usage(m),
        other => other,
    }
}

/// Metadata shared by every artifact.
#[derive(Debug, Serialize)]
struct Stamp {
    version: &'static str,
    created_at: String,
}

impl Stamp {
    fn now() -> Stamp {
        Stamp {
            version: VERSION,
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        }
    }
}

#[derive(Serialize)]
struct Artifact<'a, T: Serialize> {
    #[serde(flatten)]
    body: &'a T,
    #[serde(flatten)]
    stamp: Stamp,
}

#[derive(Serialize)]
struct Sidecar<'a, C: Serialize> {
    command: &'a str,
    seed: u64,
    config: &'a C,
    #[serde(flatten)]
    stamp: Stamp,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_artifact<T: Serialize>(path: &Path, body: &T) -> Result<()> {
    let artifact = Artifact {
        body,
        stamp: Stamp::now(),
    };
    let mut text = serde_json::to_string_pretty(&artifact)?;
    text.push('\n');
    write_text(path, &text)
}

fn write_sidecar<C: Serialize>(csv_path: &Path, command: &str, seed: u64, config: &C) -> Result<()> {
    let sidecar = Sidecar {
        command,
        seed,
        config,
        stamp: Stamp::now(),
    };
    let mut text = serde_json::to_string_pretty(&sidecar)?;
    text.push('\n');
    write_text(&sidecar_path(csv_path), &text)
}

/// `<file>.meta.json` next to a CSV output.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    let mut name = csv_path.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

/// The CSV written next to a JSON report: same stem, `.csv` extension.
pub fn companion_csv(json_path: &Path) -> PathBuf {
    json_path.with_extension("csv")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

fn read_model(path: &Path) -> Result<ScoreModel> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ScoreModel::from_json(&text)
}

fn parse_scenario(name: &str, hypothesis: &str, dz: usize, dx: usize, rho: f64) -> Result<Scenario> {
    let model: ModelId = name.parse()?;
    let scenario = Scenario::new(model, hypothesis.parse()?, dz).with_d_x(dx).with_rho(rho);
    scenario.validate().map_err(as_usage)?;
    Ok(scenario)
}

/// Parses arguments and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        // A second call in one process (tests) keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    let seed = cli.seed;
    match cli.command {
        Command::Test(args) => cmd_test(args, seed),
        Command::Bench(args) => cmd_bench(args, seed),
        Command::SamplerEval(args) => cmd_sampler_eval(args, seed),
        Command::TrainSampler(args) => cmd_train_sampler(args, seed),
        Command::Sample(args) => cmd_sample(args, seed),
        Command::Generate(args) => cmd_generate(args, seed),
    }
}

fn cmd_test(args: TestArgs, seed: u64) -> Result<()> {
    let config = args.crt.resolve(seed)?;
    let data = Dataset::read_csv(&args.data)?;
    let result = match (config.sampler_kind, &args.unlabeled, &args.model) {
        (SamplerKind::AnalyticGaussianOracle, None, None) => {
            if data.d_x() != 1 {
                return Err(Error::shape("the Gaussian oracle sampler needs d_x = 1"));
            }
            run_cdcit(&data, SamplerSource::Oracle(&ConditionalLaw::GaussianMean), &config)?
        }
        (SamplerKind::AnalyticGaussianOracle, _, _) => {
            return Err(Error::Usage(
                "the oracle sampler takes neither --unlabeled nor --model".into(),
            ))
        }
        (SamplerKind::LearnedDiffusion, Some(path), None) => {
            let unlabeled = Dataset::read_csv(path)?.to_unlabeled();
            run_cdcit(&data, SamplerSource::Unlabeled(&unlabeled), &config)?
        }
        (SamplerKind::LearnedDiffusion, None, Some(path)) => {
            let model = read_model(path)?;
            run_cdcit(&data, SamplerSource::Model(&model), &config)?
        }
        _ => return Err(Error::Usage("give exactly one of --unlabeled or --model".into())),
    };
    write_artifact(&args.out, &result)?;
    eprintln!(
        "p = {:.4} ({} at alpha = {})",
        result.p_value,
        if result.reject { "reject" } else { "accept" },
        result.alpha
    );
    Ok(())
}

#[derive(Serialize)]
struct TrialRow {
    index: usize,
    seed: u64,
    functions: String,
    p_value: f64,
    reject: bool,
    cmi_observed: f64,
}

fn cmd_bench(args: BenchArgs, seed: u64) -> Result<()> {
    let scenario = parse_scenario(&args.scenario, &args.hypothesis, args.dz, args.dx, args.rho)?;
    let config = args.crt.resolve(seed)?;
    let profile = args.crt.profile()?;
    let trials = args.trials.or(profile.map(Profile::trials)).unwrap_or(100);
    if trials == 0 {
        return Err(Error::Usage("--trials must be at least 1".into()));
    }
    let report = run_trials_with_progress(&scenario, trials, &config, args.train_size, args.test_size, seed, |r| {
        eprintln!("trial {:>3}: p = {:.4}", r.index, r.p_value)
    })?;
    write_artifact(&args.out, &report)?;
    let csv_path = companion_csv(&args.out);
    let mut w = csv_writer(&csv_path)?;
    for r in &report.trials {
        let functions = r
            .spec
            .functions
            .iter()
            .map(|f| {
                serde_json::to_value(f)
                    .ok()
                    .and_then(|v| v.as_str().map(String::from))
                    .unwrap_or_default()
            })
            .collect::<Vec<_>>()
            .join(";");
        w.serialize(TrialRow {
            index: r.index,
            seed: r.spec.seed,
            functions,
            p_value: r.p_value,
            reject: r.reject,
            cmi_observed: r.cmi_observed,
        })
        .map_err(|e| csv_error(&csv_path, e))?;
    }
    w.flush().map_err(|source| Error::Io {
        path: csv_path.clone(),
        source,
    })?;
    write_sidecar(&csv_path, "bench", seed, &report.config)?;
    eprintln!(
        "rejection rate {:.3} (se {:.3}) over {} trials",
        report.rejection_rate, report.standard_error, trials
    );
    Ok(())
}

fn cmd_sampler_eval(args: SamplerEvalArgs, seed: u64) -> Result<()> {
    let model: ModelId = args.model_id.parse()?;
    if !model.is_sampler_model() {
        return Err(Error::Usage(format!("sampler-eval supports m1, m2, m3; got {model}")));
    }
    let sampler: QuantileSampler = args.sampler.parse()?;
    let profile: Option<Profile> = args.profile.as_deref().map(str::parse).transpose()?;
    let config = QuantileConfig {
        repetitions: args.reps.or(profile.map(Profile::quantile_reps)).unwrap_or(100),
        samples_per_rep: args.samples_per_rep,
        train_size: 500,
        reference_draws: args.reference_draws,
        diffusion: args.diffusion.resolve(&[16, 16, 16], profile)?,
    };
    if config.repetitions == 0 {
        return Err(Error::Usage("--reps must be at least 1".into()));
    }
    let run = quantile_mse(model, sampler, &config, seed)?;
    write_artifact(&args.out, &run.report)?;
    let csv_path = companion_csv(&args.out);
    let mut w = csv_writer(&csv_path)?;
    for row in &run.report.rows {
        w.serialize(row).map_err(|e| csv_error(&csv_path, e))?;
    }
    w.flush().map_err(|source| Error::Io {
        path: csv_path.clone(),
        source,
    })?;
    write_sidecar(&csv_path, "sampler-eval", seed, &run.report.config)?;
    if let Some(path) = &args.samples_out {
        let mut w = csv_writer(path)?;
        let d_z = run.draws.first().map_or(0, |d| d.z.len());
        let mut header = vec!["rep".to_string()];
        header.extend((0..d_z).map(|j| format!("z{j}")));
        header.push("x0".into());
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
        for (rep, d) in run.draws.iter().enumerate() {
            for x in &d.samples {
                let mut rec = vec![rep.to_string()];
                rec.extend(d.z.iter().map(|v| v.to_string()));
                rec.push(x.to_string());
                w.write_record(&rec).map_err(|e| csv_error(path, e))?;
            }
        }
        w.flush().map_err(|source| Error::Io {
            path: path.clone(),
            source,
        })?;
        write_sidecar(path, "sampler-eval", seed, &run.report.config)?;
    }
    for row in &run.report.rows {
        eprintln!("tau {:.2}: mse {:.4} (sd {:.4})", row.tau, row.mse, row.sd);
    }
    debug_assert_eq!(run.report.rows.len(), TAUS.len());
    Ok(())
}

#[derive(Serialize)]
struct ModelArtifact<'a> {
    #[serde(flatten)]
    document: crate::diffusion::ScoreModelDocument,
    seed: u64,
    source: &'a str,
}

fn cmd_train_sampler(args: TrainArgs, seed: u64) -> Result<()> {
    let config = args.diffusion.resolve(&[128, 128, 128], None)?;
    let data = Dataset::read_csv(&args.data)?.to_unlabeled();
    let every = (config.epochs / 10).max(1);
    let model = train_score_with_progress(&data, &config, seed, |epoch, loss| {
        if epoch % every == 0 {
            eprintln!("epoch {epoch:>5}: loss {:.4}", loss / data.n() as f64);
        }
    })?;
    let body = ModelArtifact {
        document: (&model).into(),
        seed,
        source: &args.data.to_string_lossy(),
    };
    write_artifact(&args.out, &body)
}

#[derive(Serialize)]
struct SampleConfig {
    model: String,
    z: String,
    draws: usize,
    steps: usize,
}

fn cmd_sample(args: SampleArgs, seed: u64) -> Result<()> {
    let model = read_model(&args.model)?;
    let z_rows = Dataset::read_csv(&args.z)?;
    if z_rows.d_z() != model.d_z() {
        return Err(Error::Version(format!(
            "model expects d_z = {}, conditioning file has {}",
            model.d_z(),
            z_rows.d_z()
        )));
    }
    if args.draws == 0 {
        return Err(Error::Usage("--draws must be at least 1".into()));
    }
    let steps = args.steps.unwrap_or(model.schedule().sampler_steps);
    if steps == 0 {
        return Err(Error::Usage("--steps must be at least 1".into()));
    }
    let k = z_rows.n();
    // Row r of the expanded block is conditioning row r / draws.
    let rows: Vec<usize> = (0..k).flat_map(|i| std::iter::repeat_n(i, args.draws)).collect();
    let z: Array2<f64> = z_rows.z().select(Axis(0), &rows);
    let x = sample_rows(&model, z.view(), ReverseSchedule::for_model(&model, steps), seed, &[])?;
    Dataset::unlabeled(x, z)?.write_csv(&args.out)?;
    let config = SampleConfig {
        model: args.model.to_string_lossy().into_owned(),
        z: args.z.to_string_lossy().into_owned(),
        draws: args.draws,
        steps,
    };
    write_sidecar(&args.out, "sample", seed, &config)?;
    eprintln!("wrote {} rows", k * args.draws);
    Ok(())
}

fn cmd_generate(args: GenerateArgs, seed: u64) -> Result<()> {
    let scenario = parse_scenario(&args.scenario, &args.hypothesis, args.dz, args.dx, args.rho)?;
    if args.n == 0 {
        return Err(Error::Usage("--n must be at least 1".into()));
    }
    let g = generate(&scenario, args.n, seed)?;
    g.data.write_csv(&args.out)?;
    write_sidecar(&args.out, "generate", seed, &g.scenario)
}
