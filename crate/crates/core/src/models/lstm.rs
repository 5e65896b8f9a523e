//! Single-layer LSTM encoder with a dense output layer, trained by full
//! backpropagation through time.
//!
//! Forward recurrence:
//!
//! ```text
//! o_t = sigmoid(W_o x_t + U_o h_{t-1} + b_o)
//! i_t = sigmoid(W_i x_t + U_i h_{t-1} + b_i)
//! g_t = tanh   (W_g x_t + U_g h_{t-1} + b_g)
//! f_t = sigmoid(W_f x_t + U_f h_{t-1} + b_f)
//! c_t = f_t * c_{t-1} + i_t * g_t
//! h_t = o_t * tanh(c_t)
//! y   = act(W_out h_T + b_out)
//! ```
//!
//! The input-weight gradient of every gate is a sum of per-step outer
//! products `sum_t outer(delta_t, x_t)`; recurrent weights and biases are
//! returned as dense gradients.

use serde::{Deserialize, Serialize};

use crate::error::{GilError, Result};
use crate::linalg::{outer, sigmoid, Activation, Loss, Matrix, Vector};
use crate::models::mlp::{glorot_uniform, DenseLayer};
use crate::seeded_rng;

pub const FORGET_BIAS_INIT: f64 = 1.0;

/// Gate order used by every per-gate array.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Output = 0,
    Input = 1,
    Cell = 2,
    Forget = 3,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Output, Gate::Input, Gate::Cell, Gate::Forget];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    /// `e x d`
    pub w: Matrix,
    /// `e x e`
    pub u: Matrix,
    pub b: Vector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmModel {
    /// Indexed by [`Gate`].
    pub gates: Vec<GateParams>,
    pub out: DenseLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmStepCache {
    pub x: Vector,
    pub o: Vector,
    pub i: Vector,
    pub g: Vector,
    pub f: Vector,
    pub c: Vector,
    pub h: Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmForwardCache {
    pub steps: Vec<LstmStepCache>,
    pub out_z: Vector,
    pub y_hat: Vector,
}

impl LstmForwardCache {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn final_hidden(&self) -> &Vector {
        &self.steps.last().expect("horizon >= 1").h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmGradients {
    /// `gate_deltas[k][t]` for gate `k` at step `t`.
    pub gate_deltas: Vec<Vec<Vector>>,
    pub u: Vec<Matrix>,
    pub b: Vec<Vector>,
    pub out_w: Matrix,
    pub out_b: Vector,
}

impl LstmGradients {
    /// `sum_t outer(delta^k_t, x_t)`
    pub fn input_weight_gradient(&self, gate: Gate, cache: &LstmForwardCache) -> Matrix {
        let deltas = &self.gate_deltas[gate as usize];
        let mut g = Matrix::zeros(deltas[0].len(), cache.steps[0].x.len());
        for (d, step) in deltas.iter().zip(&cache.steps) {
            g.add_outer(1.0, d, &step.x);
        }
        g
    }

    /// The factor pair for one step: `(delta^k_t, x_t)`.
    pub fn step_factor<'a>(&'a self, gate: Gate, t: usize, cache: &'a LstmForwardCache) -> (&'a Vector, &'a Vector) {
        (&self.gate_deltas[gate as usize][t], &cache.steps[t].x)
    }
}

impl LstmModel {
    pub fn new(d: usize, hidden: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if d == 0 || hidden == 0 || num_classes < 2 {
            return Err(GilError::config(format!(
                "lstm needs positive input/hidden sizes and >= 2 classes, got d={d} e={hidden} classes={num_classes}"
            )));
        }
        let mut rng = seeded_rng(seed, 0x1572);
        let gates = Gate::ALL
            .iter()
            .map(|&g| GateParams {
                w: glorot_uniform(hidden, d, &mut rng),
                u: glorot_uniform(hidden, hidden, &mut rng),
                b: Vector::filled(hidden, if g == Gate::Forget { FORGET_BIAS_INIT } else { 0.0 }),
            })
            .collect();
        let out = DenseLayer::glorot(hidden, num_classes, Activation::Softmax, &mut rng);
        Ok(LstmModel { gates, out })
    }

    pub fn input_dim(&self) -> usize {
        self.gates[0].w.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.gates[0].w.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.out.outputs()
    }

    fn gate_pre(&self, k: usize, x: &[f64], h_prev: &[f64]) -> Vector {
        let p = &self.gates[k];
        let mut z = p.w.matvec(x);
        z.axpy(1.0, &p.u.matvec(h_prev));
        z.axpy(1.0, &p.b);
        z
    }

    pub fn forward<'a>(&self, inputs: impl IntoIterator<Item = &'a [f64]>) -> LstmForwardCache {
        let e = self.hidden_dim();
        let mut h = Vector::zeros(e);
        let mut c = Vector::zeros(e);
        let mut steps = Vec::new();
        for x in inputs {
            assert_eq!(x.len(), self.input_dim(), "lstm forward: step length");
            assert!(x.iter().all(|v| v.is_finite()), "lstm forward: non-finite input");
            let o = self.gate_pre(Gate::Output as usize, x, &h).map(sigmoid);
            let i = self.gate_pre(Gate::Input as usize, x, &h).map(sigmoid);
            let g = self.gate_pre(Gate::Cell as usize, x, &h).map(f64::tanh);
            let f = self.gate_pre(Gate::Forget as usize, x, &h).map(sigmoid);
            let c_new = Vector((0..e).map(|k| f[k] * c[k] + i[k] * g[k]).collect());
            let h_new = Vector((0..e).map(|k| o[k] * c_new[k].tanh()).collect());
            steps.push(LstmStepCache { x: Vector::from(x), o, i, g, f, c: c_new.clone(), h: h_new.clone() });
            c = c_new;
            h = h_new;
        }
        assert!(!steps.is_empty(), "lstm forward: empty sequence");
        let out_z = self.out.pre_activation(&h);
        let y_hat = self.out.activation.apply(&out_z);
        LstmForwardCache { steps, out_z, y_hat }
    }

    pub fn predict<'a>(&self, inputs: impl IntoIterator<Item = &'a [f64]>) -> Vector {
        self.forward(inputs).y_hat
    }

    pub fn backward(&self, cache: &LstmForwardCache, y: &[f64], loss: Loss) -> LstmGradients {
        let delta_out = loss.output_delta(self.out.activation, &cache.out_z, &cache.y_hat, y);
        self.backward_from_delta(cache, delta_out)
    }

    pub fn backward_from_delta(&self, cache: &LstmForwardCache, delta_out: Vector) -> LstmGradients {
        let e = self.hidden_dim();
        let horizon = cache.horizon();
        let out_w = outer(&delta_out, cache.final_hidden());
        let out_b = delta_out.clone();

        let mut gate_deltas = vec![vec![Vector::default(); horizon]; 4];
        let mut u: Vec<Matrix> = (0..4).map(|_| Matrix::zeros(e, e)).collect();
        let mut b: Vec<Vector> = (0..4).map(|_| Vector::zeros(e)).collect();

        let zeros = Vector::zeros(e);
        let mut dh = self.out.w.matvec_t(&delta_out);
        let mut dc_next = Vector::zeros(e);
        for t in (0..horizon).rev() {
            let s = &cache.steps[t];
            let (c_prev, h_prev) = if t == 0 { (&zeros, &zeros) } else { (&cache.steps[t - 1].c, &cache.steps[t - 1].h) };
            let mut d_o = Vector::zeros(e);
            let mut d_i = Vector::zeros(e);
            let mut d_g = Vector::zeros(e);
            let mut d_f = Vector::zeros(e);
            let mut dc_carry = Vector::zeros(e);
            for k in 0..e {
                let tc = s.c[k].tanh();
                let dc = dh[k] * s.o[k] * (1.0 - tc * tc) + dc_next[k];
                d_o[k] = dh[k] * tc * s.o[k] * (1.0 - s.o[k]);
                d_i[k] = dc * s.g[k] * s.i[k] * (1.0 - s.i[k]);
                d_g[k] = dc * s.i[k] * (1.0 - s.g[k] * s.g[k]);
                d_f[k] = dc * c_prev[k] * s.f[k] * (1.0 - s.f[k]);
                dc_carry[k] = dc * s.f[k];
            }
            let mut dh_prev = Vector::zeros(e);
            for (k, delta) in [d_o, d_i, d_g, d_f].into_iter().enumerate() {
                u[k].add_outer(1.0, &delta, h_prev);
                b[k].axpy(1.0, &delta);
                dh_prev.axpy(1.0, &self.gates[k].u.matvec_t(&delta));
                gate_deltas[k][t] = delta;
            }
            dh = dh_prev;
            dc_next = dc_carry;
        }
        LstmGradients { gate_deltas, u, b, out_w, out_b }
    }

    /// Parameter slots: `W_o, W_i, W_g, W_f, U_o.., b_o.., W_out, b_out`.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut ws = Vec::new();
        let mut us = Vec::new();
        let mut bs = Vec::new();
        for g in &mut self.gates {
            ws.push(g.w.as_mut_slice());
            us.push(g.u.as_mut_slice());
            bs.push(g.b.as_mut_slice());
        }
        let mut out = ws;
        out.extend(us);
        out.extend(bs);
        out.push(self.out.w.as_mut_slice());
        out.push(self.out.b.as_mut_slice());
        out
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.gates.iter().map(|g| g.w.as_slice()).collect();
        out.extend(self.gates.iter().map(|g| g.u.as_slice()));
        out.extend(self.gates.iter().map(|g| g.b.as_slice()));
        out.push(self.out.w.as_slice());
        out.push(self.out.b.as_slice());
        out
    }

    pub fn slot_sizes(&self) -> Vec<usize> {
        self.params().iter().map(|p| p.len()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

/// Dense gradient accumulator in [`LstmModel::params`] slot order.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmGradBuffer {
    pub w: Vec<Matrix>,
    pub u: Vec<Matrix>,
    pub b: Vec<Vector>,
    pub out_w: Matrix,
    pub out_b: Vector,
}

impl LstmGradBuffer {
    pub fn zeros_like(model: &LstmModel) -> Self {
        let (e, d) = (model.hidden_dim(), model.input_dim());
        LstmGradBuffer {
            w: (0..4).map(|_| Matrix::zeros(e, d)).collect(),
            u: (0..4).map(|_| Matrix::zeros(e, e)).collect(),
            b: (0..4).map(|_| Vector::zeros(e)).collect(),
            out_w: Matrix::zeros(model.output_dim(), e),
            out_b: Vector::zeros(model.output_dim()),
        }
    }

    /// Add `scale * grads`. When given, `encoding_inputs[t]` replaces `x_t`
    /// in the input-weight outer products.
    pub fn accumulate(
        &mut self,
        grads: &LstmGradients,
        cache: &LstmForwardCache,
        scale: f64,
        encoding_inputs: Option<&[Vector]>,
    ) {
        for k in 0..4 {
            for (t, delta) in grads.gate_deltas[k].iter().enumerate() {
                let x: &[f64] = match encoding_inputs {
                    Some(v) => &v[t],
                    None => &cache.steps[t].x,
                };
                self.w[k].add_outer(scale, delta, x);
            }
            self.u[k].axpy(scale, &grads.u[k]);
            self.b[k].axpy(scale, &grads.b[k]);
        }
        self.out_w.axpy(scale, &grads.out_w);
        self.out_b.axpy(scale, &grads.out_b);
    }

    pub fn slots(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.w.iter().map(|m| m.as_slice()).collect();
        out.extend(self.u.iter().map(|m| m.as_slice()));
        out.extend(self.b.iter().map(|v| v.as_slice()));
        out.push(self.out_w.as_slice());
        out.push(self.out_b.as_slice());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_model(d: usize, e: usize, k: usize) -> LstmModel {
        let mut m = LstmModel::new(d, e, k, 0).unwrap();
        for p in m.params_mut() {
            p.fill(0.0);
        }
        m
    }

    #[test]
    fn init_shapes_and_forget_bias() {
        let m = LstmModel::new(14, 32, 2, 3).unwrap();
        for g in &m.gates {
            assert_eq!(g.w.shape(), (32, 14));
            assert_eq!(g.u.shape(), (32, 32));
        }
        assert!(m.gates[Gate::Forget as usize].b.iter().all(|&v| v == 1.0));
        assert!(m.gates[Gate::Input as usize].b.iter().all(|&v| v == 0.0));
        assert_eq!(m, LstmModel::new(14, 32, 2, 3).unwrap());
        assert_ne!(m, LstmModel::new(14, 32, 2, 4).unwrap());
    }

    #[test]
    fn zero_weights_zero_input_closed_form() {
        let m = zero_model(3, 4, 2);
        let xs = vec![vec![0.0; 3]; 3];
        let c = m.forward(xs.iter().map(|v| v.as_slice()));
        for s in &c.steps {
            assert!(s.o.iter().chain(s.i.iter()).chain(s.f.iter()).all(|&v| v == 0.5));
            assert!(s.g.iter().chain(s.c.iter()).chain(s.h.iter()).all(|&v| v == 0.0));
        }
        assert_eq!(c.y_hat, Vector(vec![0.5, 0.5]));
    }

    fn hand_model() -> LstmModel {
        // d = 2, e = 2, identity-ish weights with distinct scales per gate
        let mut m = zero_model(2, 2, 2);
        let scales = [0.5, -0.3, 0.8, 0.2];
        for (k, g) in m.gates.iter_mut().enumerate() {
            g.w = Matrix::from_rows(&[vec![scales[k], 0.1], vec![-0.2, scales[k]]]);
            g.b = Vector(vec![0.05 * k as f64, -0.05]);
        }
        m.out.w = Matrix::from_rows(&[vec![1.0, -1.0], vec![-0.5, 0.7]]);
        m
    }

    #[test]
    fn single_step_matches_hand_derivation() {
        let m = hand_model();
        let x = [0.4, -0.6];
        let c = m.forward([&x[..]]);
        let pre = |k: usize| -> Vec<f64> {
            let g = &m.gates[k];
            (0..2).map(|r| g.w.get(r, 0) * x[0] + g.w.get(r, 1) * x[1] + g.b[r]).collect()
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let (po, pi, pg, pf) = (pre(0), pre(1), pre(2), pre(3));
        let y = Vector::one_hot(2, 1);
        let grads = m.backward(&c, &y, Loss::CrossEntropy);
        let dh = m.out.w.matvec_t(&c.y_hat.sub(&y));
        for r in 0..2 {
            let (o, i, g) = (sig(po[r]), sig(pi[r]), pg[r].tanh());
            assert!((c.steps[0].f[r] - sig(pf[r])).abs() < 1e-15);
            let cell = i * g; // c_0 = 0
            let h = o * cell.tanh();
            assert!((c.steps[0].h[r] - h).abs() < 1e-15);
            let dc = dh[r] * o * (1.0 - cell.tanh().powi(2));
            let want = [
                dh[r] * cell.tanh() * o * (1.0 - o),
                dc * g * i * (1.0 - i),
                dc * i * (1.0 - g * g),
                0.0, // c_{t-1} = 0 at the first step
            ];
            for k in 0..4 {
                assert!((grads.gate_deltas[k][0][r] - want[k]).abs() < 1e-10, "gate {k} row {r}");
            }
        }
        // a single step has no recurrent gradient because h_0 = 0
        assert!(grads.u.iter().all(|u| u.max_abs() == 0.0));
    }

    #[test]
    fn backward_is_side_effect_free() {
        let m = LstmModel::new(3, 4, 2, 8).unwrap();
        let xs = [vec![0.1, 0.2, 0.3], vec![-0.4, 0.0, 1.0]];
        let c = m.forward(xs.iter().map(|v| v.as_slice()));
        let y = Vector::one_hot(2, 0);
        assert_eq!(m.backward(&c, &y, Loss::CrossEntropy), m.backward(&c, &y, Loss::CrossEntropy));
    }

    #[test]
    fn factorized_sum_equals_dense_accumulation() {
        let m = LstmModel::new(3, 4, 2, 8).unwrap();
        let xs = [vec![0.1, 0.2, 0.3], vec![-0.4, 0.0, 1.0], vec![0.7, -0.2, 0.05]];
        let c = m.forward(xs.iter().map(|v| v.as_slice()));
        let g = m.backward(&c, &Vector::one_hot(2, 1), Loss::CrossEntropy);
        for gate in Gate::ALL {
            let total = g.input_weight_gradient(gate, &c);
            let mut manual = Matrix::zeros(4, 3);
            for t in 0..3 {
                let (d, x) = g.step_factor(gate, t, &c);
                manual.axpy(1.0, &outer(d, x));
            }
            assert!((0..12).all(|i| (total.as_slice()[i] - manual.as_slice()[i]).abs() < 1e-15));
        }
    }

    fn naive_forward(m: &LstmModel, xs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let e = m.hidden_dim();
        let (mut h, mut c) = (vec![0.0; e], vec![0.0; e]);
        let act = |k: usize, x: &[f64], h: &[f64]| -> Vec<f64> {
            let g = &m.gates[k];
            (0..e)
                .map(|r| {
                    let mut z = g.b[r];
                    for j in 0..x.len() {
                        z += g.w.get(r, j) * x[j];
                    }
                    for j in 0..e {
                        z += g.u.get(r, j) * h[j];
                    }
                    if k == 2 { z.tanh() } else { 1.0 / (1.0 + (-z).exp()) }
                })
                .collect()
        };
        for x in xs {
            let (o, i, g, f) = (act(0, x, &h), act(1, x, &h), act(2, x, &h), act(3, x, &h));
            for r in 0..e {
                c[r] = f[r] * c[r] + i[r] * g[r];
            }
            h = (0..e).map(|r| o[r] * c[r].tanh()).collect();
        }
        let logits: Vec<f64> = (0..m.output_dim())
            .map(|k| m.out.b[k] + (0..e).map(|j| m.out.w.get(k, j) * h[j]).sum::<f64>())
            .collect();
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        (h, logits.iter().map(|l| (l - mx).exp() / z).collect())
    }

    #[test]
    fn forward_matches_naive_reimplementation() {
        use rand::Rng;
        let mut rng = seeded_rng(21, 0);
        for seed in 0..10 {
            let (d, e, t) = (rng.random_range(1..8), rng.random_range(1..8), rng.random_range(1..6));
            let m = LstmModel::new(d, e, 3, seed).unwrap();
            let xs: Vec<Vec<f64>> = (0..t).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let c = m.forward(xs.iter().map(|v| v.as_slice()));
            let (h, y) = naive_forward(&m, &xs);
            assert!(h.iter().zip(c.final_hidden().iter()).all(|(a, b)| (a - b).abs() < 1e-12));
            assert!(y.iter().zip(c.y_hat.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }
}
