//! Multilayer perceptron with a hand-written backward pass.
//!
//! The backward pass returns the per-layer deltas rather than dense weight
//! gradients: the gradient of layer `i` is always `outer(delta_i, q_{i-1})`,
//! where `q_{i-1}` is the layer's input. Layer 0 is the encoding layer and its
//! input is the placeholder-filled sample.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GilError, Result};
use crate::linalg::{outer, Activation, Loss, Matrix, Vector};
use crate::seeded_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `out x in`
    pub w: Matrix,
    pub b: Vector,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        DenseLayer { w: Matrix::zeros(outputs, inputs), b: Vector::zeros(outputs), activation }
    }

    pub fn glorot(inputs: usize, outputs: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        DenseLayer { w: glorot_uniform(outputs, inputs, rng), b: Vector::zeros(outputs), activation }
    }

    pub fn inputs(&self) -> usize {
        self.w.cols()
    }

    pub fn outputs(&self) -> usize {
        self.w.rows()
    }

    pub fn pre_activation(&self, q: &[f64]) -> Vector {
        let mut z = self.w.matvec(q);
        z.axpy(1.0, &self.b);
        z
    }
}

/// `Uniform(-sqrt(6 / (fan_in + fan_out)), +sqrt(6 / (fan_in + fan_out)))`
pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub layers: Vec<DenseLayer>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpForwardCache {
    /// `q[0]` is the input, `q[i + 1]` the output of layer `i`.
    pub q: Vec<Vector>,
    /// Pre-activations `z[i] = W_i q[i] + b_i`.
    pub z: Vec<Vector>,
}

impl MlpForwardCache {
    pub fn input(&self) -> &Vector {
        &self.q[0]
    }

    /// Output of the encoding layer.
    pub fn features(&self) -> &Vector {
        &self.q[1]
    }

    pub fn output(&self) -> &Vector {
        self.q.last().expect("cache always holds the input")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpGradients {
    /// `deltas[i] = dE/dz[i]`; also the bias gradient of layer `i`.
    pub deltas: Vec<Vector>,
    /// `dE/dq[0]`
    pub input_grad: Vector,
}

impl MlpGradients {
    /// Dense weight gradient of layer `i`, `outer(delta_i, q_i)`.
    pub fn weight_gradient(&self, i: usize, cache: &MlpForwardCache) -> Matrix {
        outer(&self.deltas[i], &cache.q[i])
    }

    pub fn bias_gradient(&self, i: usize) -> &Vector {
        &self.deltas[i]
    }
}

impl MlpModel {
    /// Glorot-uniform weights, zero biases. `layer_dims` lists the input width
    /// followed by each layer's width; `activations` has one entry per layer.
    pub fn new(layer_dims: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        if layer_dims.len() < 3 {
            return Err(GilError::config(format!(
                "an MLP needs an input, an encoding layer and at least one inference layer; got dims {layer_dims:?}"
            )));
        }
        if activations.len() != layer_dims.len() - 1 {
            return Err(GilError::config(format!(
                "{} layers need {} activations, got {}",
                layer_dims.len() - 1,
                layer_dims.len() - 1,
                activations.len()
            )));
        }
        if layer_dims.contains(&0) {
            return Err(GilError::config("layer widths must be positive"));
        }
        let mut rng = seeded_rng(seed, 0x3107);
        let layers = layer_dims
            .windows(2)
            .zip(activations)
            .map(|(w, &act)| DenseLayer::glorot(w[0], w[1], act, &mut rng))
            .collect();
        Ok(MlpModel { layers })
    }

    /// Hidden layers share `hidden` activation; the last layer uses `output`.
    pub fn with_hidden(layer_dims: &[usize], hidden: Activation, output: Activation, seed: u64) -> Result<Self> {
        let n = layer_dims.len().saturating_sub(1);
        let mut acts = vec![hidden; n.saturating_sub(1)];
        acts.push(output);
        Self::new(layer_dims, &acts, seed)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs())
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[0].outputs()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(|l| l.outputs()));
        d
    }

    pub fn output_activation(&self) -> Activation {
        self.layers.last().expect("non-empty").activation
    }

    pub fn forward(&self, x: &[f64]) -> MlpForwardCache {
        assert!(
            x.iter().all(|v| v.is_finite()),
            "mlp forward: input contains non-finite values; substitute the placeholder first"
        );
        assert_eq!(x.len(), self.input_dim(), "mlp forward: input length");
        let mut q = Vec::with_capacity(self.layers.len() + 1);
        let mut z = Vec::with_capacity(self.layers.len());
        q.push(Vector::from(x));
        for layer in &self.layers {
            let pre = layer.pre_activation(q.last().unwrap());
            q.push(layer.activation.apply(&pre));
            z.push(pre);
        }
        MlpForwardCache { q, z }
    }

    pub fn predict(&self, x: &[f64]) -> Vector {
        self.forward(x).q.pop().unwrap()
    }

    fn check_cache(&self, cache: &MlpForwardCache) {
        let k = self.layers.len();
        let fits = cache.z.len() == k
            && cache.q.len() == k + 1
            && self.layers.iter().enumerate().all(|(i, l)| cache.q[i].len() == l.inputs() && cache.z[i].len() == l.outputs());
        assert!(fits, "mlp backward: cache does not belong to this model");
    }

    /// Backward pass for loss `E(y_hat, y)`.
    pub fn backward(&self, cache: &MlpForwardCache, y: &[f64], loss: Loss) -> MlpGradients {
        self.check_cache(cache);
        let k = self.layers.len();
        let out_delta = loss.output_delta(self.layers[k - 1].activation, &cache.z[k - 1], cache.output(), y);
        self.backward_from_delta(cache, out_delta)
    }

    /// Backward pass given `dE/dy_hat` directly.
    pub fn backward_from_output_grad(&self, cache: &MlpForwardCache, grad: &[f64]) -> MlpGradients {
        self.check_cache(cache);
        let k = self.layers.len();
        let out_delta = self.layers[k - 1].activation.backprop(&cache.z[k - 1], cache.output(), grad);
        self.backward_from_delta(cache, out_delta)
    }

    /// Backward pass from `dE/dz` of the output layer.
    pub fn backward_from_delta(&self, cache: &MlpForwardCache, out_delta: Vector) -> MlpGradients {
        self.check_cache(cache);
        let k = self.layers.len();
        assert_eq!(out_delta.len(), self.output_dim(), "mlp backward: output delta length");
        let mut deltas = vec![Vector::default(); k];
        deltas[k - 1] = out_delta;
        for i in (0..k - 1).rev() {
            let upstream = self.layers[i + 1].w.matvec_t(&deltas[i + 1]);
            deltas[i] = self.layers[i].activation.backprop(&cache.z[i], &cache.q[i + 1], &upstream);
        }
        let input_grad = self.layers[0].w.matvec_t(&deltas[0]);
        MlpGradients { deltas, input_grad }
    }

    pub fn loss(&self, x: &[f64], y: &[f64], loss: Loss) -> f64 {
        loss.value(&self.predict(x), y)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.as_slice().len() + l.b.len()).sum()
    }

    /// Parameter tensors in optimizer slot order: `w_0, b_0, w_1, b_1, ...`.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.w.as_mut_slice());
            out.push(l.b.as_mut_slice());
        }
        out
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            out.push(l.w.as_slice());
            out.push(l.b.as_slice());
        }
        out
    }

    pub fn slot_sizes(&self) -> Vec<usize> {
        self.params().iter().map(|p| p.len()).collect()
    }

    /// `self <- tau * other + (1 - tau) * self`
    pub fn soft_update_from(&mut self, other: &MlpModel, tau: f64) {
        for (dst, src) in self.params_mut().into_iter().zip(other.params()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = tau * s + (1.0 - tau) * *d;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

/// Dense gradient accumulator mirroring an [`MlpModel`]'s parameter slots.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGradBuffer {
    pub w: Vec<Matrix>,
    pub b: Vec<Vector>,
}

impl MlpGradBuffer {
    pub fn zeros_like(model: &MlpModel) -> Self {
        MlpGradBuffer {
            w: model.layers.iter().map(|l| Matrix::zeros(l.outputs(), l.inputs())).collect(),
            b: model.layers.iter().map(|l| Vector::zeros(l.outputs())).collect(),
        }
    }

    pub fn clear(&mut self) {
        for w in &mut self.w {
            w.as_mut_slice().fill(0.0);
        }
        for b in &mut self.b {
            b.fill(0.0);
        }
    }

    /// Add `scale * grads`. When `encoding_input` is given it replaces `q_0`
    /// in the encoding-layer outer product.
    pub fn accumulate(
        &mut self,
        grads: &MlpGradients,
        cache: &MlpForwardCache,
        scale: f64,
        encoding_input: Option<&[f64]>,
    ) {
        for (i, delta) in grads.deltas.iter().enumerate() {
            let q: &[f64] = match (i, encoding_input) {
                (0, Some(v)) => v,
                _ => &cache.q[i],
            };
            self.w[i].add_outer(scale, delta, q);
            self.b[i].axpy(scale, delta);
        }
    }

    pub fn slots(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.w.len());
        for (w, b) in self.w.iter().zip(&self.b) {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.slots().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}
