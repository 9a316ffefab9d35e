//! A small fully-connected network with exact forward and reverse passes.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::blob::{read_f64, read_json, write_f64, write_json};
use crate::dataset::{LayerBlock, LayerDataset};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const NETWORK_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative given the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::invalid(format!("unknown activation '{other}'"))),
        }
    }
}

/// `a = act(W x + b)` with `W` stored as an `out x in` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNetwork {
    layers: Vec<DenseLayer>,
    /// Per-component `[low, high]` box of valid inputs.
    input_range: Vec<(f64, f64)>,
}

/// Activations of every layer for one input. `activations[0]` is the input
/// and the last entry holds the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub activations: Vec<Vec<f64>>,
    pub pre_activations: Vec<Vec<f64>>,
    pub probabilities: Vec<f64>,
    pub pred_class: usize,
}

impl ForwardTrace {
    pub fn logits(&self) -> &[f64] {
        self.activations.last().expect("trace has at least the input")
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl ToyNetwork {
    pub fn new(layers: Vec<DenseLayer>, input_range: Vec<(f64, f64)>) -> Result<Self> {
        let first = layers.first().ok_or(Error::Empty("network layers"))?;
        if input_range.len() != first.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "input range".into(),
                expected: first.input_dim(),
                found: input_range.len(),
            });
        }
        if input_range.iter().any(|&(a, b)| !(a < b) || !a.is_finite() || !b.is_finite()) {
            return Err(Error::invalid("input range needs finite low < high per component"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(Error::DimensionMismatch {
                    what: format!("bias of layer {i}"),
                    expected: l.output_dim(),
                    found: l.bias.len(),
                });
            }
            if i > 0 && l.input_dim() != layers[i - 1].output_dim() {
                return Err(Error::DimensionMismatch {
                    what: format!("input of layer {i}"),
                    expected: layers[i - 1].output_dim(),
                    found: l.input_dim(),
                });
            }
        }
        if layers.last().map(DenseLayer::output_dim) < Some(2) {
            return Err(Error::invalid("the output layer needs at least two classes"));
        }
        Ok(Self { layers, input_range })
    }

    /// Gaussian-initialized network with `sizes = [input, hidden..., classes]`,
    /// `hidden` activation on hidden layers and identity logits.
    pub fn random(sizes: &[usize], hidden: Activation, input_range: Vec<(f64, f64)>, seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid("network sizes need an input and an output width, all positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for (i, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = match hidden {
                Activation::Relu => (2.0 / fan_in as f64).sqrt(),
                _ => (1.0 / fan_in as f64).sqrt(),
            };
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    scale * z
                })
                .collect();
            let last = i + 2 == sizes.len();
            layers.push(DenseLayer {
                weights: Matrix::new(fan_out, fan_in, data)?,
                bias: vec![0.0; fan_out],
                activation: if last { Activation::Identity } else { hidden },
            });
        }
        Self::new(layers, input_range)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_range(&self) -> &[(f64, f64)] {
        &self.input_range
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    /// Number of representation layers including the input.
    pub fn num_representations(&self) -> usize {
        self.layers.len() + 1
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "network input".into(),
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        let mut activations = vec![x.to_vec()];
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = activations.last().expect("non-empty");
            let z: Vec<f64> = (0..layer.output_dim())
                .map(|o| crate::matrix::dot(layer.weights.row(o), input) + layer.bias[o])
                .collect();
            activations.push(z.iter().map(|&v| layer.activation.apply(v)).collect());
            pre_activations.push(z);
        }
        let probabilities = softmax(activations.last().expect("non-empty"));
        let pred_class = argmax(activations.last().expect("non-empty"));
        Ok(ForwardTrace {
            activations,
            pre_activations,
            probabilities,
            pred_class,
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(self.forward(x)?.pred_class)
    }

    /// Back-propagates direct sensitivities `upstream[l] = ∂f/∂x⁽ˡ⁾` (one
    /// entry per representation, empty meaning zero) to the input.
    pub fn backward(&self, trace: &ForwardTrace, upstream: &[Vec<f64>]) -> Result<Vec<f64>> {
        if upstream.len() != self.num_representations() {
            return Err(Error::DimensionMismatch {
                what: "upstream gradients".into(),
                expected: self.num_representations(),
                found: upstream.len(),
            });
        }
        let mut grad = vec![0.0; self.num_classes()];
        for l in (0..=self.layers.len()).rev() {
            let direct = &upstream[l];
            if !direct.is_empty() {
                if direct.len() != trace.activations[l].len() {
                    return Err(Error::DimensionMismatch {
                        what: format!("upstream gradient of layer {l}"),
                        expected: trace.activations[l].len(),
                        found: direct.len(),
                    });
                }
                for (g, d) in grad.iter_mut().zip(direct) {
                    *g += d;
                }
            }
            if l == 0 {
                break;
            }
            let layer = &self.layers[l - 1];
            let dz: Vec<f64> = grad
                .iter()
                .zip(&trace.pre_activations[l - 1])
                .zip(&trace.activations[l])
                .map(|((g, &z), &a)| g * layer.activation.derivative(z, a))
                .collect();
            let mut below = vec![0.0; layer.input_dim()];
            for (o, &d) in dz.iter().enumerate() {
                if d != 0.0 {
                    for (b, w) in below.iter_mut().zip(layer.weights.row(o)) {
                        *b += d * w;
                    }
                }
            }
            grad = below;
        }
        Ok(grad)
    }

    /// Value and input gradient of `f ∘ forward`, where `f` returns its value
    /// and its partial derivatives with respect to each representation.
    pub fn input_gradient<F>(&self, x: &[f64], f: F) -> Result<(f64, Vec<f64>)>
    where
        F: FnOnce(&ForwardTrace) -> Result<(f64, Vec<Vec<f64>>)>,
    {
        let trace = self.forward(x)?;
        let (value, upstream) = f(&trace)?;
        Ok((value, self.backward(&trace, &upstream)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 0.05,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub train_accuracy: f64,
    pub final_loss: f64,
}

/// Mini-batch SGD on the mean softmax cross-entropy.
pub fn train_toy(net: &mut ToyNetwork, data: &Matrix, labels: &[usize], config: &TrainConfig) -> Result<TrainReport> {
    let n = data.rows();
    if n == 0 {
        return Err(Error::Empty("training data"));
    }
    if labels.len() != n {
        return Err(Error::RowCountMismatch {
            what: "training labels".into(),
            expected: n,
            found: labels.len(),
        });
    }
    let m = net.num_classes();
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= m) {
        return Err(Error::LabelOutOfRange {
            sample: i,
            label: l,
            num_classes: m,
        });
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut last_finite = 0;
    let mut epoch_loss = f64::NAN;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut gw: Vec<Vec<f64>> = net.layers.iter().map(|l| vec![0.0; l.weights.as_slice().len()]).collect();
            let mut gb: Vec<Vec<f64>> = net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect();
            for &i in batch {
                let trace = net.forward(data.row(i))?;
                total += log_sum_exp(trace.logits()) - trace.logits()[labels[i]];
                let mut grad: Vec<f64> = trace.probabilities.clone();
                grad[labels[i]] -= 1.0;
                for l in (0..net.layers.len()).rev() {
                    let layer = &net.layers[l];
                    let dz: Vec<f64> = grad
                        .iter()
                        .zip(&trace.pre_activations[l])
                        .zip(&trace.activations[l + 1])
                        .map(|((g, &z), &a)| g * layer.activation.derivative(z, a))
                        .collect();
                    let input = &trace.activations[l];
                    let cols = layer.input_dim();
                    for (o, &d) in dz.iter().enumerate() {
                        gb[l][o] += d;
                        for (c, &x) in input.iter().enumerate() {
                            gw[l][o * cols + c] += d * x;
                        }
                    }
                    let mut below = vec![0.0; cols];
                    for (o, &d) in dz.iter().enumerate() {
                        for (b, w) in below.iter_mut().zip(layer.weights.row(o)) {
                            *b += d * w;
                        }
                    }
                    grad = below;
                }
            }
            let step = config.learning_rate / batch.len() as f64;
            for (l, layer) in net.layers.iter_mut().enumerate() {
                for o in 0..layer.output_dim() {
                    let row = layer.weights.row_mut(o);
                    let cols = row.len();
                    for (c, w) in row.iter_mut().enumerate() {
                        *w -= step * gw[l][o * cols + c];
                    }
                    layer.bias[o] -= step * gb[l][o];
                }
            }
        }
        epoch_loss = total / n as f64;
        let params_finite = net
            .layers
            .iter()
            .all(|l| l.weights.as_slice().iter().chain(&l.bias).all(|v| v.is_finite()));
        if !epoch_loss.is_finite() || !params_finite {
            return Err(Error::Diverged {
                last_finite_epoch: last_finite,
            });
        }
        last_finite = epoch;
    }
    let correct = (0..n)
        .map(|i| net.predict(data.row(i)).map(|p| usize::from(p == labels[i])))
        .sum::<Result<usize>>()?;
    Ok(TrainReport {
        train_accuracy: correct as f64 / n as f64,
        final_loss: epoch_loss,
    })
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// Layer representations of `data`: the input, each hidden activation and
/// the logits, quantized to single precision. Predicted labels come from the
/// full-precision forward pass.
pub fn export_representations(net: &ToyNetwork, data: &Matrix, labels: &[usize]) -> Result<LayerDataset> {
    let reps = net.num_representations();
    let mut blocks: Vec<Vec<f64>> = vec![Vec::new(); reps];
    let mut preds = Vec::with_capacity(data.rows());
    for x in data.iter_rows() {
        let trace = net.forward(x)?;
        for (b, a) in blocks.iter_mut().zip(&trace.activations) {
            b.extend(a.iter().map(|&v| quantize(v)));
        }
        preds.push(trace.pred_class);
    }
    let mut layers = Vec::with_capacity(reps);
    for (l, values) in blocks.into_iter().enumerate() {
        let dim = if l == 0 { net.input_dim() } else { net.layers[l - 1].output_dim() };
        let name = if l == 0 {
            "input".to_string()
        } else if l == reps - 1 {
            "logits".to_string()
        } else {
            format!("hidden_{l}")
        };
        layers.push(LayerBlock::new(name, Matrix::new(data.rows(), dim, values)?));
    }
    LayerDataset::new(net.num_classes(), layers, labels.to_vec(), preds)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkManifest {
    version: u32,
    layers: Vec<LayerSpec>,
    input_range: Vec<(f64, f64)>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerSpec {
    input_dim: usize,
    output_dim: usize,
    activation: Activation,
}

impl ToyNetwork {
    /// Writes `manifest.json` and one `dense_{i}.f64` blob (weights then
    /// bias) per layer.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, l) in self.layers.iter().enumerate() {
            let mut blob = l.weights.as_slice().to_vec();
            blob.extend_from_slice(&l.bias);
            write_f64(&dir.join(format!("dense_{i}.f64")), &blob)?;
        }
        let manifest = NetworkManifest {
            version: NETWORK_VERSION,
            layers: self
                .layers
                .iter()
                .map(|l| LayerSpec {
                    input_dim: l.input_dim(),
                    output_dim: l.output_dim(),
                    activation: l.activation,
                })
                .collect(),
            input_range: self.input_range.clone(),
        };
        write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn read_from(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: NetworkManifest = read_json(&dir.join("manifest.json"))?;
        if manifest.version != NETWORK_VERSION {
            return Err(Error::Version {
                expected: NETWORK_VERSION,
                found: manifest.version,
            });
        }
        let mut layers = Vec::new();
        for (i, spec) in manifest.layers.iter().enumerate() {
            let w = spec.input_dim * spec.output_dim;
            let blob = read_f64(&dir.join(format!("dense_{i}.f64")), w + spec.output_dim)?;
            layers.push(DenseLayer {
                weights: Matrix::new(spec.output_dim, spec.input_dim, blob[..w].to_vec())?,
                bias: blob[w..].to_vec(),
                activation: spec.activation,
            });
        }
        Self::new(layers, manifest.input_range)
    }
}
