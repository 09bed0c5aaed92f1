//! Dense ReLU networks with exact backpropagation and Adam.
//!
//! Weights are stored per layer as `(out, in)` matrices. Batched calls take
//! row-major `(batch, width)` matrices. Both the score model and the CMI
//! classifier are instances of [`DenseNetwork`].

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Identity,
    Sigmoid,
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Weight matrix and bias vector of one affine stage. Also used for
/// gradients and optimizer moments, which share the parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

impl LayerParams {
    fn zeros_like(other: &LayerParams) -> Self {
        LayerParams {
            weights: Array2::zeros(other.weights.raw_dim()),
            biases: Array1::zeros(other.biases.len()),
        }
    }

    fn congruent(&self, other: &LayerParams) -> bool {
        self.weights.dim() == other.weights.dim() && self.biases.len() == other.biases.len()
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.biases.iter()).all(|v| v.is_finite())
    }
}

/// Parameter gradients, one entry per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerParams>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNetwork) -> Self {
        Gradients {
            layers: net.layers.iter().map(LayerParams::zeros_like).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for layer in &mut self.layers {
            layer.weights *= factor;
            layer.biases *= factor;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()))
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetworkDocument", into = "NetworkDocument")]
pub struct DenseNetwork {
    layer_dims: Vec<usize>,
    layers: Vec<LayerParams>,
    output_activation: OutputActivation,
}

/// Intermediate values of a batched forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input to each layer: the raw input followed by every hidden activation.
    inputs: Vec<Array2<f64>>,
    /// Final affine output before the output activation.
    pub pre_output: Array2<f64>,
    pub output: Array2<f64>,
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 {
        return Err(Error::shape("a network needs at least an input and an output width"));
    }
    if layer_dims.contains(&0) {
        return Err(Error::shape("layer widths must be positive"));
    }
    Ok(())
}

impl DenseNetwork {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(
        layer_dims: &[usize],
        output_activation: OutputActivation,
        rng: &mut R,
    ) -> Result<Self> {
        validate_dims(layer_dims)?;
        let layers = layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
                LayerParams {
                    weights: Array2::from_shape_simple_fn((fan_out, fan_in), || dist.sample(rng)),
                    biases: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(DenseNetwork {
            layer_dims: layer_dims.to_vec(),
            layers,
            output_activation,
        })
    }

    pub fn zeros(layer_dims: &[usize], output_activation: OutputActivation) -> Result<Self> {
        validate_dims(layer_dims)?;
        let layers = layer_dims
            .windows(2)
            .map(|w| LayerParams {
                weights: Array2::zeros((w[1], w[0])),
                biases: Array1::zeros(w[1]),
            })
            .collect();
        Ok(DenseNetwork {
            layer_dims: layer_dims.to_vec(),
            layers,
            output_activation,
        })
    }

    pub fn from_layers(layers: Vec<LayerParams>, output_activation: OutputActivation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("a network needs at least one layer"));
        }
        let mut dims = vec![layers[0].weights.ncols()];
        for (i, layer) in layers.iter().enumerate() {
            let (out, inp) = layer.weights.dim();
            if inp != *dims.last().expect("nonempty") {
                return Err(Error::shape(format!(
                    "layer {i} expects width {inp}, previous layer emits {}",
                    dims.last().expect("nonempty")
                )));
            }
            if layer.biases.len() != out {
                return Err(Error::shape(format!(
                    "layer {i} bias has length {}, expected {out}",
                    layer.biases.len()
                )));
            }
            if !layer.is_finite() {
                return Err(Error::numeric(format!("layer {i} has non-finite parameters")));
            }
            dims.push(out);
        }
        validate_dims(&dims)?;
        Ok(DenseNetwork {
            layer_dims: dims,
            layers,
            output_activation,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output_activation
    }

    pub fn input_width(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_dims.last().expect("validated")
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    fn check_input(&self, width: usize) -> Result<()> {
        if width != self.input_width() {
            return Err(Error::shape(format!(
                "input width {width}, network expects {}",
                self.input_width()
            )));
        }
        Ok(())
    }

    fn apply_output(&self, pre: &Array2<f64>) -> Array2<f64> {
        match self.output_activation {
            OutputActivation::Identity => pre.clone(),
            OutputActivation::Sigmoid => pre.mapv(sigmoid),
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let batch = ArrayView2::from_shape((1, input.len()), input).map_err(|e| Error::shape(e.to_string()))?;
        Ok(self.forward_batch(batch)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(inputs.ncols())?;
        let last = self.layers.len() - 1;
        let mut act: Option<Array2<f64>> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let src = act.as_ref().map_or(inputs.view(), |a| a.view());
            let mut pre = src.dot(&layer.weights.t());
            pre += &layer.biases;
            if i < last {
                pre.mapv_inplace(|v| v.max(0.0));
            }
            act = Some(pre);
        }
        let pre = act.expect("at least one layer");
        Ok(match self.output_activation {
            OutputActivation::Identity => pre,
            OutputActivation::Sigmoid => pre.mapv_into(sigmoid),
        })
    }

    pub fn forward_trace(&self, inputs: ArrayView2<'_, f64>) -> Result<ForwardTrace> {
        self.check_input(inputs.ncols())?;
        let last = self.layers.len() - 1;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        layer_inputs.push(inputs.to_owned());
        let mut pre_output = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut pre = layer_inputs[i].dot(&layer.weights.t());
            pre += &layer.biases;
            if i < last {
                pre.mapv_inplace(|v| v.max(0.0));
                layer_inputs.push(pre);
            } else {
                pre_output = Some(pre);
            }
        }
        let pre_output = pre_output.expect("at least one layer");
        let output = self.apply_output(&pre_output);
        Ok(ForwardTrace {
            inputs: layer_inputs,
            pre_output,
            output,
        })
    }

    /// Gradients of `sum_rows(output . upstream)` with respect to every
    /// parameter, for a batch of inputs. ReLU has subgradient 0 at 0.
    pub fn backward_batch(&self, inputs: ArrayView2<'_, f64>, upstream: ArrayView2<'_, f64>) -> Result<Gradients> {
        if upstream.dim() != (inputs.nrows(), self.output_width()) {
            return Err(Error::shape(format!(
                "upstream gradient is {:?}, expected ({}, {})",
                upstream.dim(),
                inputs.nrows(),
                self.output_width()
            )));
        }
        let trace = self.forward_trace(inputs)?;
        let delta = match self.output_activation {
            OutputActivation::Identity => upstream.to_owned(),
            OutputActivation::Sigmoid => {
                let mut d = upstream.to_owned();
                Zip::from(&mut d)
                    .and(&trace.output)
                    .for_each(|g, &a| *g *= a * (1.0 - a));
                d
            }
        };
        Ok(self.backward_pre_output(&trace, delta))
    }

    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<Gradients> {
        let x = ArrayView2::from_shape((1, input.len()), input).map_err(|e| Error::shape(e.to_string()))?;
        let g = ArrayView2::from_shape((1, upstream.len()), upstream).map_err(|e| Error::shape(e.to_string()))?;
        self.backward_batch(x, g)
    }

    /// Backpropagates a gradient taken with respect to the final affine
    /// output (before the output activation).
    pub fn backward_pre_output(&self, trace: &ForwardTrace, delta_pre: Array2<f64>) -> Gradients {
        let mut grads: Vec<LayerParams> = Vec::with_capacity(self.layers.len());
        let mut delta = delta_pre;
        for i in (0..self.layers.len()).rev() {
            let input = &trace.inputs[i];
            let weights = delta.t().dot(input);
            let biases = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut next = delta.dot(&self.layers[i].weights);
                Zip::from(&mut next).and(input).for_each(|g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
                delta = next;
            }
            grads.push(LayerParams { weights, biases });
        }
        grads.reverse();
        Gradients { layers: grads }
    }

    #[cfg(test)]
    pub(crate) fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }
}

/// Adam moments and hyperparameters for one network.
#[derive(Debug, Clone)]
pub struct AdamState {
    first_moment: Vec<LayerParams>,
    second_moment: Vec<LayerParams>,
    step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(net: &DenseNetwork, learning_rate: f64) -> Self {
        AdamState {
            first_moment: net.layers.iter().map(LayerParams::zeros_like).collect(),
            second_moment: net.layers.iter().map(LayerParams::zeros_like).collect(),
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients before
/// touching any parameter.
pub fn adam_step(net: &mut DenseNetwork, state: &mut AdamState, grads: &Gradients) -> Result<()> {
    if grads.layers.len() != net.layers.len()
        || state.first_moment.len() != net.layers.len()
        || grads.layers.iter().zip(&net.layers).any(|(g, p)| !g.congruent(p))
    {
        return Err(Error::shape("gradients are not congruent with the network"));
    }
    if let Some(i) = grads.layers.iter().position(|g| !g.is_finite()) {
        return Err(Error::numeric(format!("non-finite gradient in layer {i}")));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = state.learning_rate;
    let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };
    for (((param, grad), m), v) in net
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        Zip::from(&mut param.weights)
            .and(&mut m.weights)
            .and(&mut v.weights)
            .and(&grad.weights)
            .for_each(|p, m, v, &g| update(p, m, v, g));
        Zip::from(&mut param.biases)
            .and(&mut m.biases)
            .and(&mut v.biases)
            .and(&grad.biases)
            .for_each(|p, m, v, &g| update(p, m, v, g));
    }
    Ok(())
}

/// JSON form: `{layer_dims, output_activation, weights, biases}` with
/// row-major nested weight arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkDocument {
    pub layer_dims: Vec<usize>,
    pub output_activation: OutputActivation,
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
}

impl From<DenseNetwork> for NetworkDocument {
    fn from(net: DenseNetwork) -> Self {
        NetworkDocument {
            weights: net
                .layers
                .iter()
                .map(|l| l.weights.rows().into_iter().map(|r| r.to_vec()).collect())
                .collect(),
            biases: net.layers.iter().map(|l| l.biases.to_vec()).collect(),
            layer_dims: net.layer_dims,
            output_activation: net.output_activation,
        }
    }
}

impl TryFrom<NetworkDocument> for DenseNetwork {
    type Error = Error;

    fn try_from(doc: NetworkDocument) -> Result<Self> {
        validate_dims(&doc.layer_dims)?;
        let n_layers = doc.layer_dims.len() - 1;
        if doc.weights.len() != n_layers || doc.biases.len() != n_layers {
            return Err(Error::shape(format!(
                "document lists {} weight and {} bias blocks for {n_layers} layers",
                doc.weights.len(),
                doc.biases.len()
            )));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for (i, (w, b)) in doc.weights.into_iter().zip(doc.biases).enumerate() {
            let (inp, out) = (doc.layer_dims[i], doc.layer_dims[i + 1]);
            if w.len() != out || w.iter().any(|r| r.len() != inp) {
                return Err(Error::shape(format!("weight block {i} is not {out}x{inp}")));
            }
            let flat: Vec<f64> = w.into_iter().flatten().collect();
            layers.push(LayerParams {
                weights: Array2::from_shape_vec((out, inp), flat).map_err(|e| Error::shape(e.to_string()))?,
                biases: Array1::from_vec(b),
            });
        }
        let net = DenseNetwork::from_layers(layers, doc.output_activation)?;
        if net.layer_dims != doc.layer_dims {
            return Err(Error::shape("layer_dims disagree with the weight blocks"));
        }
        Ok(net)
    }
}

impl std::fmt::Display for DenseNetwork {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let dims: Vec<String> = self.layer_dims.iter().map(|d| d.to_string()).collect();
        write!(f, "DenseNetwork[{}; {:?}]", dims.join("-"), self.output_activation)
    }
}

/// Row-vector helper used by callers that evaluate one point at a time.
pub fn row(values: ArrayView1<'_, f64>) -> ArrayView2<'_, f64> {
    values.insert_axis(Axis(0))
}
