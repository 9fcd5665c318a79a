//! Small dense networks over flat parameter vectors, with hand-written
//! backpropagation.
//!
//! Parameters are stored layer by layer; each layer is a row-major
//! `outputs x inputs` weight block followed by `outputs` biases.

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_at_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Layer {
    inputs: usize,
    outputs: usize,
    activation: Activation,
}

impl Layer {
    fn num_params(&self) -> usize {
        self.outputs * (self.inputs + 1)
    }
}

/// Layout of a multi-layer perceptron.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Layer outputs of one forward pass, input included.
#[derive(Debug, Clone)]
pub struct Trace {
    activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace holds the input")
    }
}

impl Mlp {
    /// `layers` lists `(width, activation)` for every layer after the input.
    pub fn new(input: usize, layers: &[(usize, Activation)]) -> Self {
        let mut inputs = input;
        let layers = layers
            .iter()
            .map(|&(outputs, activation)| {
                let layer = Layer {
                    inputs,
                    outputs,
                    activation,
                };
                inputs = outputs;
                layer
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    /// Uniform fan-in initialisation with zero biases. The last layer's
    /// weights are additionally scaled by `output_scale`.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, output_scale: f64) -> Vec<f64> {
        let mut params = Vec::with_capacity(self.num_params());
        let last = self.layers.len().saturating_sub(1);
        for (k, layer) in self.layers.iter().enumerate() {
            let bound = 1.0 / (layer.inputs as f64).sqrt();
            let scale = if k == last { output_scale } else { 1.0 };
            for _ in 0..layer.outputs * layer.inputs {
                params.push(scale * rng.random_range(-bound..bound));
            }
            params.extend(std::iter::repeat_n(0.0, layer.outputs));
        }
        params
    }

    pub fn forward(&self, params: &[f64], input: &[f64]) -> Trace {
        debug_assert_eq!(params.len(), self.num_params());
        debug_assert_eq!(input.len(), self.input_dim());
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_vec());
        let mut offset = 0;
        for layer in &self.layers {
            let x = activations.last().unwrap();
            let weights = &params[offset..offset + layer.outputs * layer.inputs];
            let biases =
                &params[offset + layer.outputs * layer.inputs..offset + layer.num_params()];
            let y: Vec<f64> = weights
                .chunks_exact(layer.inputs)
                .zip(biases)
                .map(|(row, b)| {
                    let z = row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b;
                    layer.activation.apply(z)
                })
                .collect();
            activations.push(y);
            offset += layer.num_params();
        }
        Trace { activations }
    }

    /// Accumulates `d loss / d params` into `grad_params` and returns
    /// `d loss / d input`.
    pub fn backward(
        &self,
        params: &[f64],
        trace: &Trace,
        grad_output: &[f64],
        grad_params: &mut [f64],
    ) -> Vec<f64> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut offset = 0;
        for layer in &self.layers {
            offsets.push(offset);
            offset += layer.num_params();
        }

        let mut grad = grad_output.to_vec();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let x = &trace.activations[k];
            let y = &trace.activations[k + 1];
            let delta: Vec<f64> = grad
                .iter()
                .zip(y)
                .map(|(g, yi)| g * layer.activation.derivative_at_output(*yi))
                .collect();

            let base = offsets[k];
            let n_w = layer.outputs * layer.inputs;
            let mut grad_input = vec![0.0; layer.inputs];
            for (o, d) in delta.iter().enumerate() {
                let row = base + o * layer.inputs;
                for i in 0..layer.inputs {
                    grad_params[row + i] += d * x[i];
                    grad_input[i] += d * params[row + i];
                }
                grad_params[base + n_w + o] += d;
            }
            grad = grad_input;
        }
        grad
    }
}

/// Gradient-ascent-with-momentum optimiser with global norm clipping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Momentum {
    velocity: Vec<f64>,
    pub lr: f64,
    pub momentum: f64,
    pub grad_clip: f64,
}

impl Momentum {
    pub fn new(num_params: usize, lr: f64, momentum: f64, grad_clip: f64) -> Self {
        Self {
            velocity: vec![0.0; num_params],
            lr,
            momentum,
            grad_clip,
        }
    }

    /// Moves `params` along `grad` (ascent). Pass the negated gradient to
    /// minimise.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = if self.grad_clip > 0.0 && norm > self.grad_clip {
            self.grad_clip / norm
        } else {
            1.0
        };
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v + scale * g;
            *p += self.lr * *v;
        }
    }
}
