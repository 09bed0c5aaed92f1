//! Seeded synthetic data models.
//!
//! Each generator returns the data together with the scenario it was drawn
//! from (including any randomly chosen link functions), the conditional law
//! of X given Z, and the raw noise blocks so draws can be audited.
//!
//! The `*_formula` functions evaluate a model on given draws; generators are
//! thin loops around them.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::{ColumnRole, Dataset};
use crate::error::{Error, Result};
use crate::rng::{stream, tag, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelId {
    M1,
    M2,
    M3,
    Postnonlinear,
    Mixed,
    Multivariate,
    GaussianOracle,
}

impl ModelId {
    pub const ALL: [ModelId; 7] = [
        ModelId::M1,
        ModelId::M2,
        ModelId::M3,
        ModelId::Postnonlinear,
        ModelId::Mixed,
        ModelId::Multivariate,
        ModelId::GaussianOracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelId::M1 => "m1",
            ModelId::M2 => "m2",
            ModelId::M3 => "m3",
            ModelId::Postnonlinear => "postnonlinear",
            ModelId::Mixed => "mixed",
            ModelId::Multivariate => "multivariate",
            ModelId::GaussianOracle => "gaussian-oracle",
        }
    }

    /// True for the (X, Z)-only models used in the sampler comparison.
    pub fn is_sampler_model(self) -> bool {
        matches!(self, ModelId::M1 | ModelId::M2 | ModelId::M3)
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelId::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown model `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hypothesis {
    H0,
    H1,
}

impl FromStr for Hypothesis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "h0" | "H0" => Ok(Hypothesis::H0),
            "h1" | "H1" => Ok(Hypothesis::H1),
            _ => Err(Error::Usage(format!("unknown hypothesis `{s}`"))),
        }
    }
}

/// Link functions available to the post-nonlinear and multivariate models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FunctionId {
    Identity,
    Square,
    Cube,
    Tanh,
    Cos,
}

impl FunctionId {
    pub const ALL: [FunctionId; 5] = [
        FunctionId::Identity,
        FunctionId::Square,
        FunctionId::Cube,
        FunctionId::Tanh,
        FunctionId::Cos,
    ];

    pub fn apply(self, v: f64) -> f64 {
        match self {
            FunctionId::Identity => v,
            FunctionId::Square => v * v,
            FunctionId::Cube => v * v * v,
            FunctionId::Tanh => v.tanh(),
            FunctionId::Cos => v.cos(),
        }
    }

    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> FunctionId {
        FunctionId::ALL[rng.random_range(0..FunctionId::ALL.len())]
    }
}

/// A model family before sample size, seed and link functions are fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub model: ModelId,
    pub hypothesis: Hypothesis,
    /// Only the multivariate model uses `d_x > 1`; there `d_y = d_x`.
    pub d_x: usize,
    pub d_z: usize,
    /// Partial correlation for the Gaussian oracle model.
    pub rho: f64,
}

impl Scenario {
    pub fn new(model: ModelId, hypothesis: Hypothesis, d_z: usize) -> Scenario {
        let d_z = match model {
            ModelId::M1 | ModelId::M2 => 5,
            ModelId::M3 => 20,
            _ => d_z,
        };
        Scenario {
            model,
            hypothesis,
            d_x: 1,
            d_z,
            rho: 0.0,
        }
    }

    pub fn with_d_x(mut self, d_x: usize) -> Scenario {
        self.d_x = d_x;
        self
    }

    pub fn with_rho(mut self, rho: f64) -> Scenario {
        self.rho = rho;
        self
    }

    pub fn d_y(&self) -> usize {
        match self.model {
            ModelId::M1 | ModelId::M2 | ModelId::M3 => 0,
            ModelId::Multivariate => self.d_x,
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.model {
            ModelId::M1 | ModelId::M2 | ModelId::M3 => {}
            ModelId::Mixed if self.d_z < 2 => return Err(Error::domain("mixed model needs d_z >= 2")),
            _ if self.d_z < 1 => return Err(Error::domain("d_z must be at least 1")),
            _ => {}
        }
        if self.model == ModelId::Multivariate && self.d_x < 1 {
            return Err(Error::domain("multivariate model needs d_x >= 1"));
        }
        if self.model != ModelId::Multivariate && self.d_x != 1 {
            return Err(Error::domain(format!("{} has d_x = 1", self.model)));
        }
        if self.model == ModelId::GaussianOracle && !(self.rho.abs() < 1.0) {
            return Err(Error::domain(format!("|rho| must be below 1, got {}", self.rho)));
        }
        Ok(())
    }
}

/// A fully specified draw: the family plus size, seed and sampled links.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub model: ModelId,
    pub hypothesis: Hypothesis,
    pub d_x: usize,
    pub d_y: usize,
    pub d_z: usize,
    pub n: usize,
    pub seed: u64,
    /// `[f1, f2]` for post-nonlinear, `[f, g, h]` for multivariate.
    pub functions: Vec<FunctionId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
}

/// The law of X given Z under the generating model.
#[derive(Debug, Clone, PartialEq)]
pub enum ConditionalLaw {
    M1,
    M2,
    M3,
    /// `f(zbar + 0.25 e) + extra * e_b`.
    Postnonlinear {
        f1: FunctionId,
        extra_noise: f64,
    },
    /// Mean of the first `used` coordinates plus `0.33 e`.
    Mixed {
        used: usize,
    },
    /// Columns of `a` map Z to each X coordinate; `inside` puts the noise
    /// inside the link.
    Multivariate {
        a: Array2<f64>,
        f: FunctionId,
        inside: bool,
    },
    /// `N(zbar, 1)`.
    GaussianMean,
}

impl ConditionalLaw {
    pub fn d_x(&self) -> usize {
        match self {
            ConditionalLaw::Multivariate { a, .. } => a.ncols(),
            _ => 1,
        }
    }

    /// One draw of X at `z`.
    pub fn draw<R: Rng + ?Sized>(&self, z: ArrayView1<'_, f64>, rng: &mut R) -> Vec<f64> {
        let zs = z.as_slice().map(|s| s.to_vec()).unwrap_or_else(|| z.to_vec());
        let mut e = || -> f64 { StandardNormal.sample(rng) };
        match self {
            ConditionalLaw::M1 => vec![m1_formula(&zs, e())],
            ConditionalLaw::M2 => {
                let first = rng.random_bool(0.5);
                let r = mixture_draw(first, StandardNormal.sample(rng));
                vec![m2_formula(&zs, r)]
            }
            ConditionalLaw::M3 => vec![m3_formula(&zs, e())],
            ConditionalLaw::Postnonlinear { f1, extra_noise } => {
                let zbar = mean(&zs);
                let ex = e();
                let eb = if *extra_noise != 0.0 { e() } else { 0.0 };
                vec![postnonlinear_formula(*f1, zbar, ex, extra_noise * eb)]
            }
            ConditionalLaw::Mixed { used } => vec![mixed_formula(&zs, *used, e())],
            ConditionalLaw::Multivariate { a, f, inside } => {
                let lin = a.t().dot(&z);
                lin.iter().map(|&l| multivariate_formula(*f, l, e(), *inside)).collect()
            }
            ConditionalLaw::GaussianMean => vec![mean(&zs) + e()],
        }
    }

    /// Conditional mean and variance when X | Z is Gaussian.
    pub fn gaussian_moments(&self, z: ArrayView1<'_, f64>) -> Option<(f64, f64)> {
        let zs = z.to_vec();
        match self {
            ConditionalLaw::M3 => Some((zs[..13].iter().sum::<f64>() / 13.0, 0.33 * 0.33)),
            ConditionalLaw::Mixed { used } => Some((mean(&zs[..*used]), 0.33 * 0.33)),
            ConditionalLaw::GaussianMean => Some((mean(&zs), 1.0)),
            ConditionalLaw::Postnonlinear {
                f1: FunctionId::Identity,
                extra_noise,
            } => Some((mean(&zs), 0.0625 + extra_noise * extra_noise)),
            _ => None,
        }
    }
}

/// Output of a generator.
#[derive(Debug, Clone)]
pub struct Generated {
    pub data: Dataset,
    pub scenario: ScenarioSpec,
    pub law: ConditionalLaw,
    pub noise: NoiseRecord,
    /// Closed-form I(X; Y | Z) when known.
    pub analytic_cmi: Option<f64>,
}

/// Raw standard-normal noise blocks used to build X and Y. `shared` is the
/// noise that enters both blocks, when there is one.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRecord {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub shared: Option<Array2<f64>>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn normal_block(rng: &mut StreamRng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

fn sign_block(rng: &mut StreamRng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || if rng.random_bool(0.5) { 1.0 } else { -1.0 })
}

/// `z1^2 + exp(z2 + z3/3) + z4 - z5 + 0.5 (1 + z2^2 + z5^2) e`.
pub fn m1_formula(z: &[f64], e: f64) -> f64 {
    z[0] * z[0] + (z[1] + z[2] / 3.0).exp() + z[3] - z[4] + 0.5 * (1.0 + z[1] * z[1] + z[4] * z[4]) * e
}

/// `(5 + z1^2/3 + z2^2 + ... + z5^2) exp(r)`.
pub fn m2_formula(z: &[f64], r: f64) -> f64 {
    let scale = 5.0 + z[0] * z[0] / 3.0 + z[1..5].iter().map(|v| v * v).sum::<f64>();
    scale * r.exp()
}

/// The two-component mixture: `first` selects `N(-2, 1)`, otherwise `N(2, 1)`.
pub fn mixture_draw(first: bool, e: f64) -> f64 {
    if first {
        -2.0 + e
    } else {
        2.0 + e
    }
}

/// `sum_{i<13} z_i / 13 + 0.33 e`.
pub fn m3_formula(z: &[f64], e: f64) -> f64 {
    z[..13].iter().sum::<f64>() / 13.0 + 0.33 * e
}

/// `f(zbar + 0.25 e) + shared`, where `shared` is the already scaled common
/// noise term (zero under H0).
pub fn postnonlinear_formula(f: FunctionId, zbar: f64, e: f64, shared: f64) -> f64 {
    f.apply(zbar + 0.25 * e) + shared
}

/// Mean of the first `used` coordinates plus `0.33 e`.
pub fn mixed_formula(z: &[f64], used: usize, e: f64) -> f64 {
    mean(&z[..used]) + 0.33 * e
}

/// `f(lin + 0.33 e)` when `inside`, else `f(lin) + 0.33 e`.
pub fn multivariate_formula(f: FunctionId, lin: f64, e: f64, inside: bool) -> f64 {
    if inside {
        f.apply(lin + 0.33 * e)
    } else {
        f.apply(lin) + 0.33 * e
    }
}

/// Number of leading coordinates that enter the mixed model: `floor(2 d_z / 3)`.
pub fn mixed_used(d_z: usize) -> usize {
    2 * d_z / 3
}

/// Number of continuous coordinates in the mixed model: `floor(d_z / 2)`.
pub fn mixed_continuous(d_z: usize) -> usize {
    d_z / 2
}

/// Closed-form I(X; Y | Z) of the Gaussian oracle model.
pub fn gaussian_oracle_cmi(rho: f64) -> f64 {
    0.5 * (1.0 / (1.0 - rho * rho)).ln()
}

/// Draws from any scenario.
pub fn generate(scenario: &Scenario, n: usize, seed: u64) -> Result<Generated> {
    scenario.validate()?;
    if n == 0 {
        return Err(Error::input("sample size must be at least 1"));
    }
    match scenario.model {
        ModelId::M1 => gen_m1(n, seed),
        ModelId::M2 => gen_m2(n, seed),
        ModelId::M3 => gen_m3(n, seed),
        ModelId::Postnonlinear => gen_postnonlinear(scenario.d_z, n, scenario.hypothesis, seed),
        ModelId::Mixed => gen_mixed(scenario.d_z, n, scenario.hypothesis, seed),
        ModelId::Multivariate => gen_multivariate(scenario.d_x, scenario.d_z, n, scenario.hypothesis, seed),
        ModelId::GaussianOracle => gen_gaussian_oracle(scenario.d_z, n, scenario.rho, seed),
    }
}

fn data_stream(seed: u64, model: ModelId, part: u64) -> StreamRng {
    stream(seed, &[tag::DATA, model as u64, part])
}

fn spec_for(
    model: ModelId,
    hypothesis: Hypothesis,
    d_x: usize,
    d_y: usize,
    d_z: usize,
    n: usize,
    seed: u64,
) -> ScenarioSpec {
    ScenarioSpec {
        model,
        hypothesis,
        d_x,
        d_y,
        d_z,
        n,
        seed,
        functions: Vec::new(),
        rho: None,
    }
}

fn unlabeled_model(
    model: ModelId,
    n: usize,
    seed: u64,
    z: Array2<f64>,
    eps: Array2<f64>,
    x: Array1<f64>,
    law: ConditionalLaw,
) -> Result<Generated> {
    let d_z = z.ncols();
    let data = Dataset::unlabeled(x.insert_axis(Axis(1)), z)?;
    Ok(Generated {
        data,
        scenario: spec_for(model, Hypothesis::H0, 1, 0, d_z, n, seed),
        law,
        noise: NoiseRecord {
            x: eps,
            y: Array2::zeros((n, 0)),
            shared: None,
        },
        analytic_cmi: None,
    })
}

pub fn gen_m1(n: usize, seed: u64) -> Result<Generated> {
    let mut rng = data_stream(seed, ModelId::M1, 0);
    let z = normal_block(&mut rng, n, 5);
    let eps = normal_block(&mut rng, n, 1);
    let x = Array1::from_shape_fn(n, |i| m1_formula(&z.row(i).to_vec(), eps[[i, 0]]));
    unlabeled_model(ModelId::M1, n, seed, z, eps, x, ConditionalLaw::M1)
}

/// M2. The noise record holds the mixture draws `r` rather than raw normals.
pub fn gen_m2(n: usize, seed: u64) -> Result<Generated> {
    let mut rng = data_stream(seed, ModelId::M2, 0);
    let z = normal_block(&mut rng, n, 5);
    let r = Array2::from_shape_simple_fn((n, 1), || {
        let first = rng.random_bool(0.5);
        mixture_draw(first, StandardNormal.sample(&mut rng))
    });
    let x = Array1::from_shape_fn(n, |i| m2_formula(&z.row(i).to_vec(), r[[i, 0]]));
    unlabeled_model(ModelId::M2, n, seed, z, r, x, ConditionalLaw::M2)
}

pub fn gen_m3(n: usize, seed: u64) -> Result<Generated> {
    let mut rng = data_stream(seed, ModelId::M3, 0);
    let mut z = normal_block(&mut rng, n, 20);
    let signs = sign_block(&mut rng, n, 10);
    z.slice_mut(ndarray::s![.., 10..]).assign(&signs);
    let eps = normal_block(&mut rng, n, 1);
    let x = Array1::from_shape_fn(n, |i| m3_formula(&z.row(i).to_vec(), eps[[i, 0]]));
    let mut out = unlabeled_model(ModelId::M3, n, seed, z, eps, x, ConditionalLaw::M3)?;
    let mut roles = vec![ColumnRole::Continuous; 10];
    roles.extend(vec![ColumnRole::DiscreteEncoded; 10]);
    out.data = out.data.with_z_roles(roles)?;
    Ok(out)
}

pub fn gen_postnonlinear(d_z: usize, n: usize, hypothesis: Hypothesis, seed: u64) -> Result<Generated> {
    if d_z == 0 {
        return Err(Error::domain("d_z must be at least 1"));
    }
    let mut links = data_stream(seed, ModelId::Postnonlinear, 1);
    let f1 = FunctionId::draw(&mut links);
    let f2 = FunctionId::draw(&mut links);
    let mut rng = data_stream(seed, ModelId::Postnonlinear, 0);
    let z = normal_block(&mut rng, n, d_z);
    let ex = normal_block(&mut rng, n, 1);
    let ey = normal_block(&mut rng, n, 1);
    let shared = match hypothesis {
        Hypothesis::H0 => None,
        Hypothesis::H1 => Some(normal_block(&mut rng, n, 1)),
    };
    let zbar = z.mean_axis(Axis(1)).expect("d_z >= 1");
    let common = |i: usize| shared.as_ref().map_or(0.0, |s| 0.5 * s[[i, 0]]);
    let x = Array2::from_shape_fn((n, 1), |(i, _)| {
        postnonlinear_formula(f1, zbar[i], ex[[i, 0]], common(i))
    });
    let y = Array2::from_shape_fn((n, 1), |(i, _)| {
        postnonlinear_formula(f2, zbar[i], ey[[i, 0]], common(i))
    });
    let mut scenario = spec_for(ModelId::Postnonlinear, hypothesis, 1, 1, d_z, n, seed);
    scenario.functions = vec![f1, f2];
    let extra_noise = if shared.is_some() { 0.5 } else { 0.0 };
    Ok(Generated {
        data: Dataset::new(x, y, z)?,
        scenario,
        law: ConditionalLaw::Postnonlinear { f1, extra_noise },
        noise: NoiseRecord { x: ex, y: ey, shared },
        analytic_cmi: (hypothesis == Hypothesis::H0).then_some(0.0),
    })
}

pub fn gen_mixed(d_z: usize, n: usize, hypothesis: Hypothesis, seed: u64) -> Result<Generated> {
    if d_z < 2 {
        return Err(Error::domain("mixed model needs d_z >= 2"));
    }
    let cont = mixed_continuous(d_z);
    let used = mixed_used(d_z);
    let mut rng = data_stream(seed, ModelId::Mixed, 0);
    let mut z = normal_block(&mut rng, n, d_z);
    let signs = sign_block(&mut rng, n, d_z - cont);
    z.slice_mut(ndarray::s![.., cont..]).assign(&signs);
    let (ex, ey, shared) = match hypothesis {
        Hypothesis::H0 => (normal_block(&mut rng, n, 1), normal_block(&mut rng, n, 1), None),
        Hypothesis::H1 => {
            let b = normal_block(&mut rng, n, 1);
            (b.clone(), b.clone(), Some(b))
        }
    };
    let x = Array2::from_shape_fn((n, 1), |(i, _)| mixed_formula(&z.row(i).to_vec(), used, ex[[i, 0]]));
    let y = Array2::from_shape_fn((n, 1), |(i, _)| mixed_formula(&z.row(i).to_vec(), used, ey[[i, 0]]));
    let mut roles = vec![ColumnRole::Continuous; cont];
    roles.extend(vec![ColumnRole::DiscreteEncoded; d_z - cont]);
    Ok(Generated {
        data: Dataset::new(x, y, z)?.with_z_roles(roles)?,
        scenario: spec_for(ModelId::Mixed, hypothesis, 1, 1, d_z, n, seed),
        law: ConditionalLaw::Mixed { used },
        noise: NoiseRecord { x: ex, y: ey, shared },
        analytic_cmi: (hypothesis == Hypothesis::H0).then_some(0.0),
    })
}

/// Uniform [0, 1] entries with each column scaled to unit l1 norm.
pub fn loading_matrix<R: Rng + ?Sized>(rng: &mut R, d_z: usize, cols: usize) -> Array2<f64> {
    let unit = Uniform::new(0.0, 1.0).expect("valid range");
    let mut a = Array2::from_shape_simple_fn((d_z, cols), || unit.sample(rng));
    for mut col in a.columns_mut() {
        let norm: f64 = col.iter().map(|v: &f64| v.abs()).sum();
        if norm > 0.0 {
            col /= norm;
        }
    }
    a
}

/// Multivariate X and Y with `d_y = d_x`. Under H1 the X noise enters both
/// blocks.
pub fn gen_multivariate(d_x: usize, d_z: usize, n: usize, hypothesis: Hypothesis, seed: u64) -> Result<Generated> {
    if d_x == 0 || d_z == 0 {
        return Err(Error::domain("multivariate model needs d_x, d_z >= 1"));
    }
    let mut links = data_stream(seed, ModelId::Multivariate, 1);
    let f = FunctionId::draw(&mut links);
    let g = FunctionId::draw(&mut links);
    let h = FunctionId::draw(&mut links);
    let a_x = loading_matrix(&mut links, d_z, d_x);
    let a_y = loading_matrix(&mut links, d_z, d_x);
    let mut rng = data_stream(seed, ModelId::Multivariate, 0);
    let z = normal_block(&mut rng, n, d_z);
    let ex = normal_block(&mut rng, n, d_x);
    let ey = normal_block(&mut rng, n, d_x);
    let lin_x = z.dot(&a_x);
    let lin_y = z.dot(&a_y);
    let inside = hypothesis == Hypothesis::H0;
    let (gy, ny) = match hypothesis {
        Hypothesis::H0 => (g, &ey),
        Hypothesis::H1 => (h, &ex),
    };
    let x = Array2::from_shape_fn((n, d_x), |(i, j)| {
        multivariate_formula(f, lin_x[[i, j]], ex[[i, j]], inside)
    });
    let y = Array2::from_shape_fn((n, d_x), |(i, j)| {
        multivariate_formula(gy, lin_y[[i, j]], ny[[i, j]], inside)
    });
    let mut scenario = spec_for(ModelId::Multivariate, hypothesis, d_x, d_x, d_z, n, seed);
    scenario.functions = vec![f, g, h];
    let shared = (!inside).then(|| ex.clone());
    Ok(Generated {
        data: Dataset::new(x, y, z)?,
        scenario,
        law: ConditionalLaw::Multivariate { a: a_x, f, inside },
        noise: NoiseRecord { x: ex, y: ey, shared },
        analytic_cmi: inside.then_some(0.0),
    })
}

/// `X = zbar + e_x`, `Y = zbar + rho e_x + sqrt(1 - rho^2) e_y`, so X | Z is
/// `N(zbar, 1)` and the partial correlation of X and Y given Z is `rho`.
pub fn gen_gaussian_oracle(d_z: usize, n: usize, rho: f64, seed: u64) -> Result<Generated> {
    if !(rho.abs() < 1.0) {
        return Err(Error::domain(format!("|rho| must be below 1, got {rho}")));
    }
    if d_z == 0 {
        return Err(Error::domain("d_z must be at least 1"));
    }
    let mut rng = data_stream(seed, ModelId::GaussianOracle, 0);
    let z = normal_block(&mut rng, n, d_z);
    let ex = normal_block(&mut rng, n, 1);
    let ey = normal_block(&mut rng, n, 1);
    let zbar = z.mean_axis(Axis(1)).expect("d_z >= 1");
    let c = (1.0 - rho * rho).sqrt();
    let x = Array2::from_shape_fn((n, 1), |(i, _)| zbar[i] + ex[[i, 0]]);
    let y = Array2::from_shape_fn((n, 1), |(i, _)| zbar[i] + rho * ex[[i, 0]] + c * ey[[i, 0]]);
    let hypothesis = if rho == 0.0 { Hypothesis::H0 } else { Hypothesis::H1 };
    let mut scenario = spec_for(ModelId::GaussianOracle, hypothesis, 1, 1, d_z, n, seed);
    scenario.rho = Some(rho);
    Ok(Generated {
        data: Dataset::new(x, y, z)?,
        scenario,
        law: ConditionalLaw::GaussianMean,
        noise: NoiseRecord {
            x: ex,
            y: ey,
            shared: None,
        },
        analytic_cmi: Some(gaussian_oracle_cmi(rho)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let (ma, mb) = (mean(a), mean(b));
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn m1_forced_values() {
        assert_eq!(m1_formula(&[0.0; 5], 0.0), 1.0);
        assert_eq!(m1_formula(&[1.0, 0.0, 0.0, 0.0, 0.0], 0.0), 2.0);
    }

    #[test]
    fn m1_mean_matches_direct_simulation() {
        let g = gen_m1(50_000, 3).unwrap();
        let m = g.data.x().mean().unwrap();
        // Independent simulation with its own generator.
        let mut rng = stream(99, &[]);
        let mut acc = 0.0;
        for _ in 0..50_000 {
            let z: Vec<f64> = (0..5).map(|_| StandardNormal.sample(&mut rng)).collect();
            let e: f64 = StandardNormal.sample(&mut rng);
            acc += z[0] * z[0] + (z[1] + z[2] / 3.0).exp() + z[3] - z[4] + 0.5 * (1.0 + z[1] * z[1] + z[4] * z[4]) * e;
        }
        assert!((m - acc / 50_000.0).abs() <= 0.1, "{m} vs {}", acc / 50_000.0);
    }

    #[test]
    fn m2_forced_value_and_positivity() {
        assert_eq!(m2_formula(&[0.0; 5], 0.0), 5.0);
        let g = gen_m2(50_000, 4).unwrap();
        assert!(g.data.x().iter().all(|&v| v > 0.0));
        let pos = g.noise.x.iter().filter(|&&r| r > 0.0).count() as f64 / 50_000.0;
        assert!((pos - 0.5).abs() <= 0.02, "P(r > 0) = {pos}");
    }

    #[test]
    fn m3_structure() {
        assert!((m3_formula(&[1.0; 20], 0.0) - 1.0).abs() < 1e-15);
        let g = gen_m3(50_000, 5).unwrap();
        assert!(g
            .data
            .z()
            .slice(ndarray::s![.., 10..])
            .iter()
            .all(|&v| v == 1.0 || v == -1.0));
        assert_eq!(g.data.z_roles()[9], ColumnRole::Continuous);
        assert_eq!(g.data.z_roles()[10], ColumnRole::DiscreteEncoded);
        let x = g.data.x().column(0).to_vec();
        let z20 = g.data.z().column(19).to_vec();
        assert!(corr(&x, &z20).abs() <= 0.03);
    }

    #[test]
    fn postnonlinear_forced_values() {
        assert_eq!(postnonlinear_formula(FunctionId::Cos, 0.0, 0.0, 0.0), 1.0);
        assert_eq!(postnonlinear_formula(FunctionId::Tanh, 0.25, -1.0, 0.0), 0.0);
    }

    #[test]
    fn postnonlinear_h1_shares_the_recorded_noise() {
        let g = gen_postnonlinear(5, 4000, Hypothesis::H1, 8).unwrap();
        let (f1, f2) = (g.scenario.functions[0], g.scenario.functions[1]);
        let zbar = g.data.z().mean_axis(Axis(1)).unwrap();
        let shared = g.noise.shared.as_ref().unwrap();
        let mut rx = Vec::new();
        let mut ry = Vec::new();
        for i in 0..4000 {
            let px = postnonlinear_formula(f1, zbar[i], g.noise.x[[i, 0]], 0.0);
            let py = postnonlinear_formula(f2, zbar[i], g.noise.y[[i, 0]], 0.0);
            // Regenerating with the recorded shared noise reproduces the data bit for bit.
            assert_eq!(
                g.data.x()[[i, 0]],
                postnonlinear_formula(f1, zbar[i], g.noise.x[[i, 0]], 0.5 * shared[[i, 0]])
            );
            assert_eq!(
                g.data.y()[[i, 0]],
                postnonlinear_formula(f2, zbar[i], g.noise.y[[i, 0]], 0.5 * shared[[i, 0]])
            );
            rx.push(g.data.x()[[i, 0]] - px);
            ry.push(g.data.y()[[i, 0]] - py);
        }
        assert!(corr(&rx, &ry) > 0.0);
    }

    #[test]
    fn h0_noises_are_independent_blocks() {
        let g = gen_postnonlinear(3, 200, Hypothesis::H0, 1).unwrap();
        assert!(g.noise.shared.is_none());
        assert_ne!(g.noise.x, g.noise.y);
        let m = gen_mixed(6, 200, Hypothesis::H0, 1).unwrap();
        assert!(m.noise.shared.is_none());
        assert_ne!(m.noise.x, m.noise.y);
    }

    #[test]
    fn mixed_forced_and_floor_arithmetic() {
        assert_eq!(mixed_formula(&[0.0; 20], 13, 0.0), 0.0);
        assert_eq!(mixed_used(20), 13);
        assert_eq!(mixed_continuous(20), 10);
        let g = gen_mixed(20, 100, Hypothesis::H1, 2).unwrap();
        let roles = g.data.z_roles();
        assert_eq!(roles.iter().filter(|r| **r == ColumnRole::Continuous).count(), 10);
        assert!(g.data.z().slice(ndarray::s![.., 10..]).iter().all(|&v| v.abs() == 1.0));
        // H1 uses the same noise in both blocks.
        assert_eq!(g.data.x(), g.data.y());
        assert_eq!(g.noise.shared.as_ref().unwrap(), &g.noise.x);
    }

    #[test]
    fn mixed_h0_partial_correlation_is_near_zero() {
        let g = gen_mixed(20, 20_000, Hypothesis::H0, 11).unwrap();
        // With the true mean removed, residuals are the scaled raw noises:
        // regress each block on Z by least squares and correlate residuals.
        let rx = ols_residuals(g.data.z(), g.data.x().column(0).to_owned());
        let ry = ols_residuals(g.data.z(), g.data.y().column(0).to_owned());
        assert!(corr(rx.as_slice().unwrap(), ry.as_slice().unwrap()).abs() <= 0.03);
    }

    // Normal-equation least squares with an intercept, solved by Gaussian elimination.
    fn ols_residuals(z: ndarray::ArrayView2<'_, f64>, y: Array1<f64>) -> Array1<f64> {
        let n = z.nrows();
        let p = z.ncols() + 1;
        let mut design = Array2::ones((n, p));
        design.slice_mut(ndarray::s![.., 1..]).assign(&z);
        let mut a = design.t().dot(&design);
        let mut b = design.t().dot(&y);
        for c in 0..p {
            let piv = (c..p)
                .max_by(|&i, &j| a[[i, c]].abs().total_cmp(&a[[j, c]].abs()))
                .unwrap();
            for k in 0..p {
                a.swap([c, k], [piv, k]);
            }
            b.swap(c, piv);
            for r in 0..p {
                if r != c {
                    let f = a[[r, c]] / a[[c, c]];
                    for k in 0..p {
                        a[[r, k]] -= f * a[[c, k]];
                    }
                    b[r] -= f * b[c];
                }
            }
        }
        let beta = Array1::from_shape_fn(p, |i| b[i] / a[[i, i]]);
        &y - &design.dot(&beta)
    }

    #[test]
    fn multivariate_shapes_and_normalization() {
        let g = gen_multivariate(5, 10, 50, Hypothesis::H0, 3).unwrap();
        assert_eq!((g.data.d_x(), g.data.d_y(), g.data.d_z()), (5, 5, 10));
        let ConditionalLaw::Multivariate { a, .. } = &g.law else {
            panic!()
        };
        for col in a.columns() {
            assert!((col.iter().map(|v| v.abs()).sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(multivariate_formula(FunctionId::Identity, 0.0, 0.0, true), 0.0);
        assert_eq!(multivariate_formula(FunctionId::Identity, 0.0, 0.0, false), 0.0);
        assert_eq!(g.scenario.functions.len(), 3);
    }

    #[test]
    fn multivariate_h1_reuses_x_noise() {
        let g = gen_multivariate(2, 4, 100, Hypothesis::H1, 6).unwrap();
        let h = g.scenario.functions[2];
        let mut links = data_stream(6, ModelId::Multivariate, 1);
        for _ in 0..3 {
            FunctionId::draw(&mut links);
        }
        let _ = loading_matrix(&mut links, 4, 2);
        let a_y = loading_matrix(&mut links, 4, 2);
        let lin_y = g.data.z().dot(&a_y);
        for i in 0..100 {
            for j in 0..2 {
                assert_eq!(g.data.y()[[i, j]], h.apply(lin_y[[i, j]]) + 0.33 * g.noise.x[[i, j]]);
            }
        }
    }

    #[test]
    fn gaussian_oracle_metadata_and_slope() {
        assert_eq!(gaussian_oracle_cmi(0.0), 0.0);
        assert!((gaussian_oracle_cmi(0.6) - 0.22314).abs() < 1e-5);
        assert!(matches!(gen_gaussian_oracle(2, 10, 1.0, 0), Err(Error::Domain(_))));
        let g = gen_gaussian_oracle(3, 20_000, 0.6, 9).unwrap();
        let zbar = g.data.z().mean_axis(Axis(1)).unwrap();
        let x = g.data.x().column(0).to_owned();
        let (mz, mx) = (zbar.mean().unwrap(), x.mean().unwrap());
        let slope = (&zbar - mz).dot(&(&x - mx)) / (&zbar - mz).dot(&(&zbar - mz));
        assert!((slope - 1.0).abs() <= 0.05, "slope {slope}");
        let z0 = Array1::zeros(3);
        assert_eq!(g.law.gaussian_moments(z0.view()), Some((0.0, 1.0)));
    }

    #[test]
    fn generators_are_seed_deterministic_with_declared_shapes() {
        for model in ModelId::ALL {
            let sc = Scenario::new(model, Hypothesis::H1, 6)
                .with_d_x(if model == ModelId::Multivariate { 2 } else { 1 })
                .with_rho(0.3);
            let a = generate(&sc, 40, 17).unwrap();
            let b = generate(&sc, 40, 17).unwrap();
            assert_eq!(a.data, b.data, "{model}");
            assert_eq!(a.scenario, b.scenario);
            assert_eq!(a.data.d_x(), a.scenario.d_x);
            assert_eq!(a.data.d_y(), a.scenario.d_y);
            assert_eq!(a.data.d_z(), a.scenario.d_z);
            assert_eq!(a.data.n(), 40);
            for (j, role) in a.data.z_roles().iter().enumerate() {
                if *role == ColumnRole::DiscreteEncoded {
                    assert!(a.data.z().column(j).iter().all(|v| v.abs() == 1.0));
                }
            }
            let c = generate(&sc, 40, 18).unwrap();
            assert_ne!(a.data, c.data);
        }
    }

    #[test]
    fn law_draws_match_the_generator_distribution() {
        // Conditional laws reproduce the generating formulas at a fixed z.
        let mut rng = stream(1, &[]);
        let z = Array1::from_vec(vec![0.3, -0.2, 0.5, 1.0, -1.0]);
        let draws: Vec<f64> = (0..20_000)
            .map(|_| ConditionalLaw::M1.draw(z.view(), &mut rng)[0])
            .collect();
        let centre = m1_formula(z.as_slice().unwrap(), 0.0);
        assert!((mean(&draws) - centre).abs() < 0.03);
    }

    #[test]
    fn model_names_round_trip() {
        for m in ModelId::ALL {
            assert_eq!(m.name().parse::<ModelId>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert!(matches!("m9".parse::<ModelId>(), Err(Error::Usage(_))));
    }
}
