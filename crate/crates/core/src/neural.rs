//! Dense relu networks with hand-written forward/backward passes and Adam.

use std::path::Path;

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng;

pub const HIDDEN_GAIN: f64 = std::f64::consts::SQRT_2;
pub const OUTPUT_GAIN: f64 = 0.01;

#[derive(Debug, thiserror::Error)]
pub enum NeuralError {
    #[error("input has {got} columns, network expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("gradient has shape {got:?}, expected {expected:?}")]
    GradShape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("invalid layer widths {0:?}")]
    Widths(Vec<usize>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One affine layer; `weight` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Layer {
        Layer {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    fn sq_norm(&self) -> f64 {
        self.weight.iter().map(|v| v * v).sum::<f64>()
            + self.bias.iter().map(|v| v * v).sum::<f64>()
    }

    fn scale(&mut self, s: f64) {
        self.weight *= s;
        self.bias *= s;
    }
}

/// Feed-forward network: relu on hidden layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    widths: Vec<usize>,
    pub layers: Vec<Layer>,
}

/// Activations saved by [`DenseNet::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    hidden_pre: Vec<Array2<f64>>,
}

/// Gradients for every layer plus the per-sample input gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub layers: Vec<Layer>,
    pub input: Array2<f64>,
}

impl GradBundle {
    pub fn zeros_for(net: &DenseNet, batch: usize) -> Self {
        GradBundle {
            layers: net.layers.iter().map(Layer::zeros_like).collect(),
            input: Array2::zeros((batch, net.input_dim())),
        }
    }

    pub fn param_sq_norm(&self) -> f64 {
        self.layers.iter().map(Layer::sq_norm).sum()
    }

    pub fn scale_params(&mut self, s: f64) {
        for l in &mut self.layers {
            l.scale(s);
        }
    }

    /// Adds `s * other` to the parameter gradients (input gradients untouched).
    pub fn add_scaled(&mut self, other: &GradBundle, s: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(s, &b.weight);
            a.bias.scaled_add(s, &b.bias);
        }
    }

    pub fn params_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut rng::Rng) -> Array2<f64> {
    // Orthonormalize along the shorter dimension with modified Gram-Schmidt.
    let (n_vec, len) = if rows >= cols {
        (cols, rows)
    } else {
        (rows, cols)
    };
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(n_vec);
    while vecs.len() < n_vec {
        let mut v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        for u in &vecs {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-10 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        vecs.push(v);
    }
    let mut w = Array2::zeros((rows, cols));
    for (k, v) in vecs.iter().enumerate() {
        for (i, &a) in v.iter().enumerate() {
            if rows >= cols {
                w[[i, k]] = gain * a;
            } else {
                w[[k, i]] = gain * a;
            }
        }
    }
    w
}

fn relu_mask(pre: &Array2<f64>, grad: &mut Array2<f64>) {
    Zip::from(grad).and(pre).for_each(|g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
}

impl DenseNet {
    /// Orthogonal init (gain sqrt 2 on hidden layers, 0.01 on the output), zero biases.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self, NeuralError> {
        Self::init_with_gains(widths, seed, HIDDEN_GAIN, OUTPUT_GAIN)
    }

    pub fn init_with_gains(
        widths: &[usize],
        seed: u64,
        hidden_gain: f64,
        output_gain: f64,
    ) -> Result<Self, NeuralError> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(NeuralError::Widths(widths.to_vec()));
        }
        let mut r = rng::seeded(seed);
        let n_layers = widths.len() - 1;
        let layers = (0..n_layers)
            .map(|k| {
                let gain = if k + 1 == n_layers {
                    output_gain
                } else {
                    hidden_gain
                };
                Layer {
                    weight: orthogonal(widths[k + 1], widths[k], gain, &mut r),
                    bias: Array1::zeros(widths[k + 1]),
                }
            })
            .collect();
        Ok(DenseNet {
            widths: widths.to_vec(),
            layers,
        })
    }

    /// Builds a network from explicit layers; shapes must chain.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self, NeuralError> {
        let Some(first) = layers.first() else {
            return Err(NeuralError::Widths(vec![]));
        };
        let mut widths = vec![first.weight.ncols()];
        for l in &layers {
            if l.weight.ncols() != *widths.last().unwrap() || l.bias.len() != l.weight.nrows() {
                return Err(NeuralError::Widths(widths));
            }
            widths.push(l.weight.nrows());
        }
        Ok(DenseNet { widths, layers })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn params_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn forward(
        &self,
        inputs: &Array2<f64>,
    ) -> Result<(Array2<f64>, ForwardCache), NeuralError> {
        if inputs.ncols() != self.input_dim() {
            return Err(NeuralError::InputDim {
                expected: self.input_dim(),
                got: inputs.ncols(),
            });
        }
        let n_layers = self.layers.len();
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(n_layers),
            hidden_pre: Vec::with_capacity(n_layers - 1),
        };
        let mut h = inputs.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight.t());
            z += &layer.bias;
            cache.inputs.push(h);
            if k + 1 < n_layers {
                let act = z.mapv(|v| v.max(0.0));
                cache.hidden_pre.push(z);
                h = act;
            } else {
                h = z;
            }
        }
        Ok((h, cache))
    }

    /// Forward pass without keeping a cache.
    pub fn predict(&self, inputs: &Array2<f64>) -> Result<Array2<f64>, NeuralError> {
        if inputs.ncols() != self.input_dim() {
            return Err(NeuralError::InputDim {
                expected: self.input_dim(),
                got: inputs.ncols(),
            });
        }
        let n_layers = self.layers.len();
        let mut h = inputs.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight.t());
            z += &layer.bias;
            if k + 1 < n_layers {
                z.mapv_inplace(|v| v.max(0.0));
            }
            h = z;
        }
        Ok(h)
    }

    /// Gradients of `sum(output_grads * outputs)` with respect to parameters and inputs.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grads: &Array2<f64>,
    ) -> Result<GradBundle, NeuralError> {
        self.backprop(&cache.inputs, &cache.hidden_pre, output_grads, true)
    }

    /// Parameter gradients of `sum_i w_i * (d_i . grad_x out(x_i))` for a scalar-output net.
    ///
    /// `directions` holds one input-space vector `d_i` per sample and `weights`
    /// the per-sample output weights `w_i` (shape `n x 1`). With the relu
    /// pattern held fixed the input gradient is linear in the weights, so this
    /// is a backward pass through the tangent network driven by `d_i`. Bias
    /// gradients are identically zero.
    pub fn input_grad_param_grads(
        &self,
        cache: &ForwardCache,
        directions: &Array2<f64>,
        weights: &Array2<f64>,
    ) -> Result<GradBundle, NeuralError> {
        let n = cache.inputs[0].nrows();
        if directions.dim() != (n, self.input_dim()) {
            return Err(NeuralError::GradShape {
                expected: (n, self.input_dim()),
                got: directions.dim(),
            });
        }
        let n_layers = self.layers.len();
        let mut tangents = Vec::with_capacity(n_layers);
        let mut t = directions.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = t.dot(&layer.weight.t());
            tangents.push(t);
            if k + 1 < n_layers {
                let mut masked = z;
                relu_mask(&cache.hidden_pre[k], &mut masked);
                t = masked;
            } else {
                t = z;
            }
        }
        self.backprop(&tangents, &cache.hidden_pre, weights, false)
    }

    fn backprop(
        &self,
        inputs: &[Array2<f64>],
        hidden_pre: &[Array2<f64>],
        output_grads: &Array2<f64>,
        with_bias: bool,
    ) -> Result<GradBundle, NeuralError> {
        let n = inputs[0].nrows();
        if output_grads.dim() != (n, self.output_dim()) {
            return Err(NeuralError::GradShape {
                expected: (n, self.output_dim()),
                got: output_grads.dim(),
            });
        }
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        let mut g = output_grads.clone();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let weight = g.t().dot(&inputs[k]);
            let bias = if with_bias {
                g.sum_axis(Axis(0))
            } else {
                Array1::zeros(layer.bias.len())
            };
            grads.push(Layer { weight, bias });
            let mut gin = g.dot(&layer.weight);
            if k > 0 {
                relu_mask(&hidden_pre[k - 1], &mut gin);
            }
            g = gin;
        }
        grads.reverse();
        Ok(GradBundle {
            layers: grads,
            input: g,
        })
    }

    /// Flattened parameters: each layer's weight (row-major) then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<(), NeuralError> {
        if flat.len() != self.param_count() {
            return Err(NeuralError::Checkpoint(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            widths: self.widths.clone(),
            params: self.flat_params(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, NeuralError> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(NeuralError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let mut net = DenseNet::init(&ck.widths, 0)?;
        net.set_flat_params(&ck.params)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<(), NeuralError> {
        let text = serde_json::to_string(&self.to_checkpoint())
            .map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NeuralError> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(&ck)
    }
}

pub const CHECKPOINT_FORMAT: &str = "dail-densenet";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON checkpoint container.
///
/// `params` lists, for each layer in order, the `out x in` weight matrix in
/// row-major order followed by the `out` biases. Floats are written in
/// shortest round-trip form, so save/load is lossless.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub widths: Vec<usize>,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Layer>,
    v: Vec<Layer>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(net: &DenseNet, lr: f64) -> Self {
        AdamState {
            m: net.layers.iter().map(Layer::zeros_like).collect(),
            v: net.layers.iter().map(Layer::zeros_like).collect(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Bias-corrected Adam update with the given gradients (no clipping).
    pub fn apply(&mut self, net: &mut DenseNet, grads: &GradBundle) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (lr, eps) = (self.lr, self.eps);
        for (((p, g), m), v) in net
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            };
            Zip::from(&mut p.weight)
                .and(&g.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .for_each(|p, &g, m, v| update(p, g, m, v));
            Zip::from(&mut p.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
    }
}

/// Scales all bundles jointly so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [&mut GradBundle], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.param_sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_params(s);
        }
    }
    norm
}

/// Clips `grads` to `max_grad_norm` and applies one Adam update.
pub fn adam_step(net: &mut DenseNet, adam: &mut AdamState, grads: &GradBundle, max_grad_norm: f64) {
    let mut g = grads.clone();
    clip_global_norm(&mut [&mut g], max_grad_norm);
    adam.apply(net, &g);
}
