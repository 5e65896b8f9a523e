//! SGD and Adam over flat parameter slots, plus the importance weighting of
//! the encoding-layer gradient.

use serde::{Deserialize, Serialize};

use crate::error::{GilError, Result};
use crate::linalg::{outer, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// `None` disables decay.
    pub decay_steps: Option<u64>,
    pub decay_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Scale the encoding update after Adam's preconditioning instead of
    /// weighting the raw gradient.
    pub importance_after_precondition: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            decay_steps: Some(500),
            decay_rate: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            importance_after_precondition: false,
        }
    }
}

impl OptimConfig {
    pub fn sgd(lr: f64) -> Self {
        OptimConfig { kind: OptimizerKind::Sgd, lr, decay_steps: None, ..Default::default() }
    }

    pub fn adam(lr: f64) -> Self {
        OptimConfig { kind: OptimizerKind::Adam, lr, decay_steps: None, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(GilError::config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.decay_steps == Some(0) {
            return Err(GilError::config("decay_steps must be positive"));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(GilError::config(format!("decay_rate must lie in (0, 1], got {}", self.decay_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(GilError::config("adam betas must lie in [0, 1) and eps must be positive"));
        }
        Ok(())
    }
}

/// Per-column scaling of one parameter slot holding a row-major matrix.
#[derive(Clone, Copy, Debug)]
pub struct ColumnScale<'a> {
    pub slot: usize,
    pub cols: usize,
    pub scale: &'a [f64],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Optimizer {
    pub fn new(config: OptimConfig, slot_sizes: &[usize]) -> Self {
        let zeros = || slot_sizes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        let (m, v) = match config.kind {
            OptimizerKind::Adam => (zeros(), zeros()),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Optimizer { config, m, v, t: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Learning rate for the next step.
    pub fn current_lr(&self) -> f64 {
        match self.config.decay_steps {
            Some(steps) => self.config.lr * self.config.decay_rate.powf(self.t as f64 / steps as f64),
            None => self.config.lr,
        }
    }

    pub fn first_moment(&self, slot: usize) -> &[f64] {
        &self.m[slot]
    }

    pub fn second_moment(&self, slot: usize) -> &[f64] {
        &self.v[slot]
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]]) {
        self.step_scaled(params, grads, &[])
    }

    /// One update. Each `post_scale` entry multiplies the final per-entry
    /// update of its slot column-wise, which is how importance is applied
    /// after preconditioning.
    pub fn step_scaled(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]], post_scale: &[ColumnScale<'_>]) {
        assert_eq!(params.len(), grads.len(), "optimizer: slot count");
        let lr = self.current_lr();
        self.t += 1;
        let t = self.t as i32;
        let c = &self.config;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        for (s, (p, g)) in params.into_iter().zip(grads).enumerate() {
            assert_eq!(p.len(), g.len(), "optimizer: slot {s} length");
            let col = post_scale.iter().find(|cs| cs.slot == s);
            let factor = |k: usize| col.map_or(1.0, |cs| cs.scale[k % cs.cols]);
            match c.kind {
                OptimizerKind::Sgd => {
                    for k in 0..p.len() {
                        p[k] -= lr * (g[k] * factor(k));
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[s], &mut self.v[s]);
                    assert_eq!(m.len(), p.len(), "optimizer: slot {s} does not match its moments");
                    for k in 0..p.len() {
                        m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                        v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                        let m_hat = m[k] / bc1;
                        let v_hat = v[k] / bc2;
                        p[k] -= lr * (m_hat / (v_hat.sqrt() + c.eps) * factor(k));
                    }
                }
            }
        }
    }
}

fn check_importance(a: &[f64]) -> Result<()> {
    match a.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(j) => Err(GilError::Contract(format!("importance entry {j} = {} lies outside [0, 1]", a[j]))),
        None => Ok(()),
    }
}

/// `x_filled * a`, after checking `a` lies in `[0, 1]`.
pub fn weighted_input(x_filled: &[f64], a: &[f64]) -> Result<Vec<f64>> {
    if x_filled.len() != a.len() {
        return Err(GilError::Contract(format!(
            "importance length {} does not match input length {}",
            a.len(),
            x_filled.len()
        )));
    }
    check_importance(a)?;
    Ok(x_filled.iter().zip(a).map(|(x, w)| x * w).collect())
}

/// Importance-weighted encoding gradient `outer(delta, x_filled * a)`.
pub fn apply_importance(delta: &[f64], x_filled: &[f64], a: &[f64]) -> Result<Matrix> {
    Ok(outer(delta, &weighted_input(x_filled, a)?))
}
