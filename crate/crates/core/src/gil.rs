//! Training loops: importance-weighted training driven by the actor-critic
//! (`gil`), the mask heuristic (`gil_h`), the feature-separation reward
//! (`gil_d`), the input-weighting ablation and impute-then-train baselines.
//!
//! One iteration on a batch:
//! 1. forward and backward every sample under the current weights;
//! 2. choose importance vectors (actions);
//! 3. step the encoding weights on `outer(delta, x_filled * a)` and every
//!    other slot on its plain gradient, in a single optimizer step;
//! 4. when the actor-critic is active, re-run the forward pass under the
//!    new weights, reward each action with the negated loss and feed the
//!    resulting transitions to the actor-critic.

use std::borrow::Cow;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datasets::{BalancedBatchStream, BatchStream, Dataset, Sample, SequenceDataset, SequenceSample, Step};
use crate::error::{GilError, Result};
use crate::linalg::{Activation, Loss, Vector};
use crate::metrics::{self, EvalResult};
use crate::models::{LstmGradBuffer, LstmModel, MlpGradBuffer, MlpModel};
use crate::optim::{weighted_input, ColumnScale, OptimConfig, Optimizer};
use crate::rl::{ActorCritic, GilState, RlConfig, Transition};
use crate::seeded_rng;

const LOSS: Loss = Loss::CrossEntropy;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Gil,
    GilH,
    GilD,
    AblationInput,
    Baseline,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Gil => "gil",
            Variant::GilH => "gil_h",
            Variant::GilD => "gil_d",
            Variant::AblationInput => "ablation_input",
            Variant::Baseline => "baseline",
        }
    }

    fn uses_actor_critic(self) -> bool {
        matches!(self, Variant::Gil | Variant::GilD)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Imputer {
    Zero,
    Mean,
    CarryForward,
    /// Column mean plus Gaussian noise; a deliberately poor imputer.
    NoiseMean,
}

impl Imputer {
    pub fn name(self) -> &'static str {
        match self {
            Imputer::Zero => "zero",
            Imputer::Mean => "mean",
            Imputer::CarryForward => "carry_forward",
            Imputer::NoiseMean => "noise_mean",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Mlp {
        hidden: Vec<usize>,
        #[serde(default = "default_activation")]
        activation: Activation,
    },
    Lstm {
        hidden: usize,
    },
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Mlp { hidden: vec![64, 64], activation: Activation::Relu }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    /// One action per sample (per time step for sequences).
    PerSample,
    /// One action per batch, from the first sample's values and mask with
    /// batch-mean features and predictions.
    PerBatch,
}

/// Replace the behavioral policy by a fixed rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForcedAction {
    Ones,
    Mask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Used by the baseline only.
    pub imputer: Imputer,
    pub model: ModelSpec,
    pub max_iter: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub rl: RlConfig,
    /// Weight of the feature-separation term in the `gil_d` reward.
    pub gil_d_coef: f64,
    pub placeholder: f64,
    pub seed: u64,
    pub action_mode: ActionMode,
    pub eval_every: usize,
    /// Balanced positive/negative batches (always on for `gil_d`).
    pub balanced_batches: bool,
    /// Noise level of the `noise_mean` imputer.
    pub noise_std: f64,
    pub forced_action: Option<ForcedAction>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Gil,
            imputer: Imputer::Zero,
            model: ModelSpec::default(),
            max_iter: 1000,
            batch_size: 128,
            optim: OptimConfig::default(),
            rl: RlConfig::default(),
            gil_d_coef: 0.1,
            placeholder: 0.0,
            seed: 0,
            action_mode: ActionMode::PerSample,
            eval_every: 100,
            balanced_batches: false,
            noise_std: 1.0,
            forced_action: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.variant.uses_actor_critic() || self.variant == Variant::AblationInput {
            self.rl.validate()?;
        }
        if self.max_iter == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(GilError::config("max_iter, batch_size and eval_every must be positive"));
        }
        if !self.placeholder.is_finite() {
            return Err(GilError::config("placeholder must be finite"));
        }
        if self.variant == Variant::GilD {
            if self.gil_d_coef < 0.0 || !self.gil_d_coef.is_finite() {
                return Err(GilError::config(format!("gil_d_coef must be non-negative, got {}", self.gil_d_coef)));
            }
            if !self.batch_size.is_multiple_of(4) {
                return Err(GilError::config(format!("gil_d needs a batch size divisible by 4, got {}", self.batch_size)));
            }
        }
        if let ModelSpec::Mlp { hidden, .. } = &self.model {
            if hidden.is_empty() || hidden.contains(&0) {
                return Err(GilError::config("mlp needs at least one non-empty hidden layer"));
            }
        }
        if let ModelSpec::Lstm { hidden: 0 } = self.model {
            return Err(GilError::config("lstm hidden size must be positive"));
        }
        if self.imputer == Imputer::NoiseMean && self.noise_std < 0.0 {
            return Err(GilError::config("noise_std must be non-negative"));
        }
        Ok(())
    }

    fn balanced(&self) -> bool {
        self.balanced_batches || self.variant == Variant::GilD
    }
}

/// Mean squared difference of two equally shaped row blocks.
fn block_mse(a: &[Vector], b: &[Vector]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (ra, rb) in a.iter().zip(b) {
        for (x, y) in ra.iter().zip(rb.iter()) {
            sum += (x - y) * (x - y);
            n += 1;
        }
    }
    sum / n as f64
}

/// Feature-separation term over a balanced batch whose first half holds
/// positive-class features and second half negative-class features:
/// cross-class distances of matching quarters minus within-class distances.
pub fn gil_d_distance(features: &[Vector]) -> Result<f64> {
    let b = features.len();
    if b == 0 || !b.is_multiple_of(4) {
        return Err(GilError::Contract(format!("feature batch of {b} rows cannot be split into quarters")));
    }
    let q = b / 4;
    let (pos, neg) = features.split_at(b / 2);
    Ok(block_mse(&pos[..q], &neg[..q]) + block_mse(&pos[q..], &neg[q..])
        - block_mse(&pos[..q], &pos[q..])
        - block_mse(&neg[..q], &neg[q..]))
}

// ---------------------------------------------------------------------------
// imputation

fn noise_rng(seed: u64) -> ChaCha8Rng {
    seeded_rng(seed, 0x1a9e)
}

/// Fill missing entries. `means` are the column means to use (normally
/// from the training split). The mask is kept so the result still records
/// which entries were imputed.
pub fn impute(ds: &Dataset, imputer: Imputer, means: &Vector, noise_std: f64, seed: u64) -> Result<Dataset> {
    if imputer == Imputer::CarryForward {
        return Err(GilError::config("carry_forward imputation needs sequence data"));
    }
    let mut rng = noise_rng(seed);
    let noise = Normal::new(0.0, noise_std.max(0.0)).map_err(|e| GilError::config(e.to_string()))?;
    let samples = ds
        .samples
        .iter()
        .map(|s| {
            let x_filled = (0..ds.d)
                .map(|j| {
                    if s.m[j] != 0.0 {
                        return s.x[j];
                    }
                    match imputer {
                        Imputer::Zero => 0.0,
                        Imputer::Mean => means[j],
                        Imputer::NoiseMean => means[j] + noise.sample(&mut rng),
                        Imputer::CarryForward => unreachable!(),
                    }
                })
                .collect();
            Sample { x: s.x.clone(), m: s.m.clone(), x_filled: Vector(x_filled), y: s.y }
        })
        .collect();
    Ok(Dataset { samples, ..Dataset::new(Vec::new(), ds.num_classes, ds.placeholder) }.with_shape_of(ds))
}

pub fn impute_sequences(
    ds: &SequenceDataset,
    imputer: Imputer,
    means: &Vector,
    noise_std: f64,
    seed: u64,
) -> Result<SequenceDataset> {
    let mut rng = noise_rng(seed);
    let noise = Normal::new(0.0, noise_std.max(0.0)).map_err(|e| GilError::config(e.to_string()))?;
    let samples = ds
        .samples
        .iter()
        .map(|seq| {
            let mut last: Vec<Option<f64>> = vec![None; ds.d];
            let steps = seq
                .steps
                .iter()
                .map(|st| {
                    let x_filled = (0..ds.d)
                        .map(|j| {
                            if st.m[j] != 0.0 {
                                last[j] = Some(st.x[j]);
                                return st.x[j];
                            }
                            match imputer {
                                Imputer::Zero => 0.0,
                                Imputer::Mean => means[j],
                                Imputer::NoiseMean => means[j] + noise.sample(&mut rng),
                                Imputer::CarryForward => last[j].unwrap_or(means[j]),
                            }
                        })
                        .collect();
                    Step { x: st.x.clone(), m: st.m.clone(), x_filled: Vector(x_filled) }
                })
                .collect();
            SequenceSample { steps, y: seq.y }
        })
        .collect();
    let mut out = SequenceDataset::new(samples, ds.num_classes, ds.placeholder);
    out.column_means = ds.column_means.clone();
    Ok(out)
}

trait WithShape {
    fn with_shape_of(self, ds: &Dataset) -> Dataset;
}

impl WithShape for Dataset {
    fn with_shape_of(mut self, ds: &Dataset) -> Dataset {
        self.d = ds.d;
        self.column_means = ds.column_means.clone();
        self
    }
}

fn sequences_with_placeholder(ds: &SequenceDataset, placeholder: f64) -> SequenceDataset {
    let samples = ds
        .samples
        .iter()
        .map(|s| SequenceSample { steps: s.steps.iter().map(|t| Step::from_raw(t.x.0.clone(), placeholder)).collect(), y: s.y })
        .collect();
    SequenceDataset::new(samples, ds.num_classes, placeholder)
}

// ---------------------------------------------------------------------------
// trained predictors

#[derive(Clone, Debug, PartialEq)]
pub enum Network {
    Mlp(MlpModel),
    Lstm(LstmModel),
}

/// A trained network plus, for the input-weighting ablation, the network
/// producing the input weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictor {
    pub network: Network,
    pub input_gate: Option<MlpModel>,
}

impl Predictor {
    pub fn predict(&self, s: &Sample) -> Vector {
        match &self.network {
            Network::Mlp(m) => match &self.input_gate {
                Some(g) => {
                    let h = g.predict(&s.x_filled);
                    m.predict(&hadamard_vec(&s.x_filled, &h))
                }
                None => m.predict(&s.x_filled),
            },
            Network::Lstm(_) => panic!("predict: tabular sample given to an lstm"),
        }
    }

    pub fn predict_sequence(&self, s: &SequenceSample) -> Vector {
        match &self.network {
            Network::Lstm(m) => m.predict(s.steps.iter().map(|t| t.x_filled.as_slice())),
            Network::Mlp(_) => panic!("predict_sequence: sequence given to an mlp"),
        }
    }

    pub fn evaluate(&self, ds: &Dataset) -> Result<EvalResult> {
        let probs: Vec<Vector> = ds.samples.iter().map(|s| self.predict(s)).collect();
        metrics::evaluate(&probs, &ds.labels())
    }

    pub fn evaluate_sequences(&self, ds: &SequenceDataset) -> Result<EvalResult> {
        let probs: Vec<Vector> = ds.samples.iter().map(|s| self.predict_sequence(s)).collect();
        metrics::evaluate(&probs, &ds.labels())
    }
}

fn hadamard_vec(a: &[f64], b: &[f64]) -> Vector {
    Vector(a.iter().zip(b).map(|(x, y)| x * y).collect())
}

// ---------------------------------------------------------------------------
// reports

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub iteration: usize,
    /// Mean pre-update batch loss since the previous evaluation point.
    pub train_loss: f64,
    pub eval: EvalResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: Variant,
    pub seed: u64,
    pub iterations: usize,
    pub points: Vec<EvalPoint>,
    pub final_eval: EvalResult,
    pub best_eval: EvalResult,
    pub best_iteration: usize,
    /// Missing fraction of the training inputs.
    pub missing_rate: f64,
    /// Mean pre-update batch loss per iteration.
    pub losses: Vec<f64>,
    /// Mean reward per iteration; empty without the actor-critic.
    pub rewards: Vec<f64>,
    pub wall_clock_secs: f64,
}

pub struct TrainOutcome {
    pub predictor: Predictor,
    /// Network state at the best evaluation point.
    pub best: Predictor,
    pub actor_critic: Option<ActorCritic>,
    pub report: TrainReport,
}

/// Per-iteration diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInfo {
    pub loss: f64,
    pub reward: Option<f64>,
    pub distance: Option<f64>,
    pub td_error: Option<f64>,
}

struct Stopwatch {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Stopwatch {
    fn start() -> Self {
        Stopwatch {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    fn secs(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.start.elapsed().as_secs_f64();
        #[cfg(target_arch = "wasm32")]
        return 0.0;
    }
}

// ---------------------------------------------------------------------------
// shared machinery

enum Batches {
    Plain(BatchStream),
    Balanced(BalancedBatchStream),
}

impl Batches {
    fn new(labels: &[usize], num_classes: usize, cfg: &TrainConfig) -> Result<Self> {
        if cfg.balanced() {
            Ok(Batches::Balanced(BalancedBatchStream::new(labels, num_classes, cfg.batch_size, cfg.seed)?))
        } else {
            Ok(Batches::Plain(BatchStream::new(labels.len(), cfg.batch_size, cfg.seed)?))
        }
    }

    fn next(&mut self) -> Vec<usize> {
        match self {
            Batches::Plain(b) => b.next_batch(),
            Batches::Balanced(b) => b.next_batch(),
        }
    }
}

/// Action source plus the transition bookkeeping of the actor-critic.
pub struct RlDriver {
    pub actor_critic: ActorCritic,
    rng: ChaCha8Rng,
    forced: Option<ForcedAction>,
    pending: Option<(GilState, Vector, f64)>,
}

impl RlDriver {
    fn new(state_dim: usize, d: usize, cfg: &TrainConfig) -> Result<Self> {
        Ok(RlDriver {
            actor_critic: ActorCritic::new(state_dim, d, cfg.rl.clone(), cfg.seed)?,
            rng: seeded_rng(cfg.seed, 0x9011),
            forced: cfg.forced_action,
            pending: None,
        })
    }

    fn act(&mut self, s: &GilState) -> Vector {
        match self.forced {
            Some(ForcedAction::Ones) => Vector::ones(s.m.len()),
            Some(ForcedAction::Mask) => s.m.clone(),
            None => self.actor_critic.behavioral(s, &mut self.rng).0,
        }
    }

    /// Train on `(pre[k], a[k], r[k], post[k + 1])`, first closing the
    /// transition left open by the previous iteration with `pre[0]`. The
    /// last slot stays open until the next call.
    fn learn(&mut self, pre: Vec<GilState>, actions: Vec<Vector>, rewards: Vec<f64>, post: Vec<GilState>) -> Result<f64> {
        let mut td = Vec::with_capacity(pre.len());
        if let Some((s, a, r)) = self.pending.take() {
            td.push(self.actor_critic.update(Transition { s, a, r, s_next: pre[0].clone() })?.td_error);
        }
        let k = pre.len();
        let mut post = post.into_iter().skip(1);
        let mut last = None;
        for (i, ((s, a), r)) in pre.into_iter().zip(actions).zip(rewards).enumerate() {
            if i + 1 == k {
                last = Some((s, a, r));
            } else {
                let s_next = post.next().expect("post state per slot");
                td.push(self.actor_critic.update(Transition { s, a, r, s_next })?.td_error);
            }
        }
        self.pending = last;
        Ok(if td.is_empty() { 0.0 } else { td.iter().sum::<f64>() / td.len() as f64 })
    }
}

fn mean_vectors<'a>(vs: impl Iterator<Item = &'a Vector>) -> Vector {
    let mut sum: Option<Vector> = None;
    let mut n = 0.0;
    for v in vs {
        match sum.as_mut() {
            Some(s) => s.axpy(1.0, v),
            None => sum = Some(v.clone()),
        }
        n += 1.0;
    }
    sum.expect("non-empty batch").scale(1.0 / n)
}

fn column_mean(actions: &[Vector]) -> Vector {
    mean_vectors(actions.iter())
}

fn check_finite(iteration: usize, loss: f64, ok: bool) -> Result<()> {
    if !loss.is_finite() || !ok {
        return Err(GilError::Divergence { iteration, message: format!("batch loss {loss}, parameters finite: {ok}") });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// MLP trainer

/// Step-wise MLP trainer; [`train`] drives it to completion.
pub struct MlpTrainer<'a> {
    cfg: &'a TrainConfig,
    data: Cow<'a, Dataset>,
    pub model: MlpModel,
    opt: Optimizer,
    /// Input-weighting network of the ablation and its optimizer.
    pub gate: Option<(MlpModel, Optimizer)>,
    pub rl: Option<RlDriver>,
    batches: Batches,
    grad: MlpGradBuffer,
    iteration: usize,
}

impl<'a> MlpTrainer<'a> {
    /// `data` must already hold the inputs the variant trains on (imputed
    /// values for the baseline, placeholder-filled values otherwise).
    pub fn new(data: &'a Dataset, cfg: &'a TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let ModelSpec::Mlp { hidden, activation } = &cfg.model else {
            return Err(GilError::config("MlpTrainer needs an mlp model spec"));
        };
        if data.num_classes < 2 {
            return Err(GilError::config("classification needs at least two classes"));
        }
        if cfg.variant == Variant::GilD && data.num_classes != 2 {
            return Err(GilError::config(format!("gil_d needs binary labels, got {} classes", data.num_classes)));
        }
        let data = if cfg.variant != Variant::Baseline && data.placeholder != cfg.placeholder {
            Cow::Owned(data.with_placeholder(cfg.placeholder))
        } else {
            Cow::Borrowed(data)
        };
        let mut dims = vec![data.d];
        dims.extend(hidden);
        dims.push(data.num_classes);
        let model = MlpModel::with_hidden(&dims, *activation, Activation::Softmax, cfg.seed)?;
        let opt = Optimizer::new(cfg.optim.clone(), &model.slot_sizes());
        let gate = if cfg.variant == Variant::AblationInput {
            let mut gdims = vec![data.d];
            gdims.extend(&cfg.rl.hidden);
            gdims.push(data.d);
            let g = MlpModel::with_hidden(&gdims, Activation::Relu, Activation::Sigmoid, cfg.seed ^ 0x6a7e)?;
            let o = Optimizer::new(cfg.optim.clone(), &g.slot_sizes());
            Some((g, o))
        } else {
            None
        };
        let rl = if cfg.variant.uses_actor_critic() {
            let state_dim = GilState::dim(data.d, model.feature_dim(), data.num_classes);
            Some(RlDriver::new(state_dim, data.d, cfg)?)
        } else {
            None
        };
        let batches = Batches::new(&data.labels(), data.num_classes, cfg)?;
        let grad = MlpGradBuffer::zeros_like(&model);
        Ok(MlpTrainer { cfg, data, model, opt, gate, rl, batches, grad, iteration: 0 })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn predictor(&self) -> Predictor {
        Predictor { network: Network::Mlp(self.model.clone()), input_gate: self.gate.as_ref().map(|g| g.0.clone()) }
    }

    fn state(s: &Sample, zeta: &Vector, y_hat: &Vector) -> GilState {
        GilState { x_filled: s.x_filled.clone(), m: s.m.clone(), zeta: zeta.clone(), y_hat: y_hat.clone() }
    }

    pub fn step(&mut self) -> Result<StepInfo> {
        let idx = self.batches.next();
        let n = idx.len() as f64;
        let variant = self.cfg.variant;
        let c = self.data.num_classes;

        // 1. forward and backward under the current weights
        let mut gate_caches = Vec::new();
        let mut caches = Vec::with_capacity(idx.len());
        let mut grads = Vec::with_capacity(idx.len());
        let mut loss_sum = 0.0;
        for &i in &idx {
            let s = &self.data.samples[i];
            let cache = match &self.gate {
                Some((g, _)) if self.cfg.forced_action.is_none() => {
                    let gc = g.forward(&s.x_filled);
                    let cache = self.model.forward(&hadamard_vec(&s.x_filled, gc.output()));
                    gate_caches.push(gc);
                    cache
                }
                _ => self.model.forward(&s.x_filled),
            };
            let y = Vector::one_hot(c, s.y);
            loss_sum += LOSS.value(cache.output(), &y);
            grads.push(self.model.backward(&cache, &y, LOSS));
            caches.push(cache);
        }
        let loss = loss_sum / n;

        // 2. actions
        let per_batch = self.cfg.action_mode == ActionMode::PerBatch;
        let mut pre_states = Vec::new();
        let actions: Option<Vec<Vector>> = match variant {
            Variant::Baseline | Variant::AblationInput => None,
            Variant::GilH => Some(idx.iter().map(|&i| self.data.samples[i].m.clone()).collect()),
            Variant::Gil | Variant::GilD => {
                let driver = self.rl.as_mut().expect("actor-critic present");
                if per_batch {
                    let st = {
                        let first = &self.data.samples[idx[0]];
                        GilState {
                            x_filled: first.x_filled.clone(),
                            m: first.m.clone(),
                            zeta: mean_vectors(caches.iter().map(|c| c.features())),
                            y_hat: mean_vectors(caches.iter().map(|c| c.output())),
                        }
                    };
                    let a = driver.act(&st);
                    pre_states.push(st);
                    Some(vec![a; idx.len()])
                } else {
                    let mut acts = Vec::with_capacity(idx.len());
                    for (k, &i) in idx.iter().enumerate() {
                        let st = Self::state(&self.data.samples[i], caches[k].features(), caches[k].output());
                        acts.push(driver.act(&st));
                        pre_states.push(st);
                    }
                    Some(acts)
                }
            }
        };

        // 3. one optimizer step; only the encoding slot sees the importance
        let after = self.cfg.optim.importance_after_precondition;
        self.grad.clear();
        for (k, &i) in idx.iter().enumerate() {
            let weighted = match (&actions, after) {
                (Some(a), false) => Some(weighted_input(&self.data.samples[i].x_filled, &a[k])?),
                _ => None,
            };
            self.grad.accumulate(&grads[k], &caches[k], 1.0 / n, weighted.as_deref());
        }
        let mean_action = match (&actions, after) {
            (Some(a), true) => Some(column_mean(a)),
            _ => None,
        };
        let scales: Vec<ColumnScale> = mean_action
            .iter()
            .map(|a| ColumnScale { slot: 0, cols: self.data.d, scale: a })
            .collect();
        if let Some((g, gopt)) = self.gate.as_mut().filter(|_| !gate_caches.is_empty()) {
            // dE/dh = x * dE/du with u = x * h
            let mut gbuf = MlpGradBuffer::zeros_like(g);
            for (k, &i) in idx.iter().enumerate() {
                let x = &self.data.samples[i].x_filled;
                let up = hadamard_vec(x, &grads[k].input_grad);
                let gg = g.backward_from_output_grad(&gate_caches[k], &up);
                gbuf.accumulate(&gg, &gate_caches[k], 1.0 / n, None);
            }
            gopt.step(g.params_mut(), &gbuf.slots());
        }
        self.opt.step_scaled(self.model.params_mut(), &self.grad.slots(), &scales);
        self.iteration += 1;
        check_finite(self.iteration, loss, self.model.is_finite())?;

        // 4. rewards under the updated weights and actor-critic training
        let mut info = StepInfo { loss, reward: None, distance: None, td_error: None };
        if let (Some(driver), Some(actions)) = (self.rl.as_mut(), actions) {
            let post: Vec<_> = idx.iter().map(|&i| self.model.forward(&self.data.samples[i].x_filled)).collect();
            let post_losses: Vec<f64> = idx
                .iter()
                .zip(&post)
                .map(|(&i, pc)| LOSS.value(pc.output(), &Vector::one_hot(c, self.data.samples[i].y)))
                .collect();
            let bonus = if variant == Variant::GilD {
                let feats: Vec<Vector> = post.iter().map(|pc| pc.features().clone()).collect();
                let dist = gil_d_distance(&feats)?;
                info.distance = Some(dist);
                self.cfg.gil_d_coef * dist
            } else {
                0.0
            };
            let (rewards, acts, post_states) = if per_batch {
                let r = -(post_losses.iter().sum::<f64>() / n) + bonus;
                let first = &self.data.samples[idx[0]];
                let st = GilState {
                    x_filled: first.x_filled.clone(),
                    m: first.m.clone(),
                    zeta: mean_vectors(post.iter().map(|pc| pc.features())),
                    y_hat: mean_vectors(post.iter().map(|pc| pc.output())),
                };
                (vec![r], vec![actions[0].clone()], vec![st])
            } else {
                let rewards: Vec<f64> = post_losses.iter().map(|l| -l + bonus).collect();
                let states = idx
                    .iter()
                    .zip(&post)
                    .map(|(&i, pc)| Self::state(&self.data.samples[i], pc.features(), pc.output()))
                    .collect();
                (rewards, actions, states)
            };
            info.reward = Some(rewards.iter().sum::<f64>() / rewards.len() as f64);
            info.td_error = Some(driver.learn(pre_states, acts, rewards, post_states)?);
        }
        Ok(info)
    }
}

// ---------------------------------------------------------------------------
// LSTM trainer

pub struct LstmTrainer<'a> {
    cfg: &'a TrainConfig,
    data: Cow<'a, SequenceDataset>,
    pub model: LstmModel,
    opt: Optimizer,
    pub rl: Option<RlDriver>,
    batches: Batches,
    iteration: usize,
}

impl<'a> LstmTrainer<'a> {
    pub fn new(data: &'a SequenceDataset, cfg: &'a TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let ModelSpec::Lstm { hidden } = cfg.model else {
            return Err(GilError::config("LstmTrainer needs an lstm model spec"));
        };
        if cfg.variant == Variant::AblationInput {
            return Err(GilError::config("the input-weighting ablation is implemented for mlp models only"));
        }
        if cfg.variant == Variant::GilD && data.num_classes != 2 {
            return Err(GilError::config(format!("gil_d needs binary labels, got {} classes", data.num_classes)));
        }
        let data = if cfg.variant != Variant::Baseline && data.placeholder != cfg.placeholder {
            Cow::Owned(sequences_with_placeholder(data, cfg.placeholder))
        } else {
            Cow::Borrowed(data)
        };
        let model = LstmModel::new(data.d, hidden, data.num_classes, cfg.seed)?;
        let opt = Optimizer::new(cfg.optim.clone(), &model.slot_sizes());
        let rl = if cfg.variant.uses_actor_critic() {
            Some(RlDriver::new(GilState::dim(data.d, hidden, data.num_classes), data.d, cfg)?)
        } else {
            None
        };
        let batches = Batches::new(&data.labels(), data.num_classes, cfg)?;
        Ok(LstmTrainer { cfg, data, model, opt, rl, batches, iteration: 0 })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn predictor(&self) -> Predictor {
        Predictor { network: Network::Lstm(self.model.clone()), input_gate: None }
    }

    fn forward(&self, s: &SequenceSample) -> crate::models::LstmForwardCache {
        self.model.forward(s.steps.iter().map(|t| t.x_filled.as_slice()))
    }

    fn step_state(st: &Step, h: &Vector, y_hat: &Vector) -> GilState {
        GilState { x_filled: st.x_filled.clone(), m: st.m.clone(), zeta: h.clone(), y_hat: y_hat.clone() }
    }

    /// Per-batch states, one per time step of the longest sequence.
    fn batch_states(&self, idx: &[usize], caches: &[crate::models::LstmForwardCache]) -> Vec<GilState> {
        let horizon = caches.iter().map(|c| c.horizon()).max().unwrap_or(0);
        let first = &self.data.samples[idx[0]];
        let y_hat = mean_vectors(caches.iter().map(|c| &c.y_hat));
        (0..horizon)
            .map(|t| {
                let st = &first.steps[t.min(first.horizon() - 1)];
                let h = mean_vectors(caches.iter().filter(|c| c.horizon() > t).map(|c| &c.steps[t].h));
                GilState { x_filled: st.x_filled.clone(), m: st.m.clone(), zeta: h, y_hat: y_hat.clone() }
            })
            .collect()
    }

    pub fn step(&mut self) -> Result<StepInfo> {
        let idx = self.batches.next();
        let n = idx.len() as f64;
        let variant = self.cfg.variant;
        let c = self.data.num_classes;

        let mut caches = Vec::with_capacity(idx.len());
        let mut grads = Vec::with_capacity(idx.len());
        let mut loss_sum = 0.0;
        for &i in &idx {
            let s = &self.data.samples[i];
            let cache = self.forward(s);
            let y = Vector::one_hot(c, s.y);
            loss_sum += LOSS.value(&cache.y_hat, &y);
            grads.push(self.model.backward(&cache, &y, LOSS));
            caches.push(cache);
        }
        let loss = loss_sum / n;

        // actions[j][t]
        let per_batch = self.cfg.action_mode == ActionMode::PerBatch;
        let mut pre_states = Vec::new();
        let actions: Option<Vec<Vec<Vector>>> = match variant {
            Variant::Baseline | Variant::AblationInput => None,
            Variant::GilH => Some(idx.iter().map(|&i| self.data.samples[i].steps.iter().map(|t| t.m.clone()).collect()).collect()),
            Variant::Gil | Variant::GilD => {
                if per_batch {
                    let states = self.batch_states(&idx, &caches);
                    let driver = self.rl.as_mut().expect("actor-critic present");
                    let per_t: Vec<Vector> = states.iter().map(|s| driver.act(s)).collect();
                    pre_states = states;
                    Some(caches.iter().map(|cc| per_t[..cc.horizon()].to_vec()).collect())
                } else {
                    let driver = self.rl.as_mut().expect("actor-critic present");
                    let mut all = Vec::with_capacity(idx.len());
                    for (k, &i) in idx.iter().enumerate() {
                        let seq = &self.data.samples[i];
                        let mut acts = Vec::with_capacity(seq.horizon());
                        for (t, st) in seq.steps.iter().enumerate() {
                            let s = Self::step_state(st, &caches[k].steps[t].h, &caches[k].y_hat);
                            acts.push(driver.act(&s));
                            pre_states.push(s);
                        }
                        all.push(acts);
                    }
                    Some(all)
                }
            }
        };

        let after = self.cfg.optim.importance_after_precondition;
        let mut buf = LstmGradBuffer::zeros_like(&self.model);
        for (k, &i) in idx.iter().enumerate() {
            let weighted = match (&actions, after) {
                (Some(a), false) => Some(
                    self.data.samples[i]
                        .steps
                        .iter()
                        .zip(&a[k])
                        .map(|(st, at)| weighted_input(&st.x_filled, at).map(Vector))
                        .collect::<Result<Vec<_>>>()?,
                ),
                _ => None,
            };
            buf.accumulate(&grads[k], &caches[k], 1.0 / n, weighted.as_deref());
        }
        let mean_action = match (&actions, after) {
            (Some(a), true) => Some(mean_vectors(a.iter().flatten())),
            _ => None,
        };
        let scales: Vec<ColumnScale> = match &mean_action {
            Some(a) => (0..4).map(|slot| ColumnScale { slot, cols: self.data.d, scale: a }).collect(),
            None => Vec::new(),
        };
        self.opt.step_scaled(self.model.params_mut(), &buf.slots(), &scales);
        self.iteration += 1;
        check_finite(self.iteration, loss, self.model.is_finite())?;

        let mut info = StepInfo { loss, reward: None, distance: None, td_error: None };
        if self.rl.is_some() {
            let actions = actions.expect("actions drawn");
            let post: Vec<_> = idx.iter().map(|&i| self.forward(&self.data.samples[i])).collect();
            let post_losses: Vec<f64> = idx
                .iter()
                .zip(&post)
                .map(|(&i, pc)| LOSS.value(&pc.y_hat, &Vector::one_hot(c, self.data.samples[i].y)))
                .collect();
            let bonus = if variant == Variant::GilD {
                let feats: Vec<Vector> = post.iter().map(|pc| pc.final_hidden().clone()).collect();
                let dist = gil_d_distance(&feats)?;
                info.distance = Some(dist);
                self.cfg.gil_d_coef * dist
            } else {
                0.0
            };
            let (rewards, acts, post_states) = if per_batch {
                let r = -(post_losses.iter().sum::<f64>() / n) + bonus;
                let states = self.batch_states(&idx, &post);
                let k = states.len();
                let longest = actions.iter().max_by_key(|a| a.len()).expect("non-empty batch").clone();
                (vec![r; k], longest, states)
            } else {
                let mut rewards = Vec::new();
                let mut states = Vec::new();
                for (k, &i) in idx.iter().enumerate() {
                    let seq = &self.data.samples[i];
                    for (t, st) in seq.steps.iter().enumerate() {
                        rewards.push(-post_losses[k] + bonus);
                        states.push(Self::step_state(st, &post[k].steps[t].h, &post[k].y_hat));
                    }
                }
                (rewards, actions.into_iter().flatten().collect(), states)
            };
            info.reward = Some(rewards.iter().sum::<f64>() / rewards.len() as f64);
            let driver = self.rl.as_mut().expect("actor-critic present");
            info.td_error = Some(driver.learn(pre_states, acts, rewards, post_states)?);
        }
        Ok(info)
    }
}

// ---------------------------------------------------------------------------
// drivers

struct Progress {
    points: Vec<EvalPoint>,
    losses: Vec<f64>,
    rewards: Vec<f64>,
    window: Vec<f64>,
    best: Option<(EvalResult, usize, Predictor)>,
}

impl Progress {
    fn new() -> Self {
        Progress { points: Vec::new(), losses: Vec::new(), rewards: Vec::new(), window: Vec::new(), best: None }
    }

    fn record(&mut self, info: &StepInfo) {
        self.losses.push(info.loss);
        self.window.push(info.loss);
        if let Some(r) = info.reward {
            self.rewards.push(r);
        }
    }

    fn evaluate(&mut self, iteration: usize, eval: EvalResult, predictor: impl FnOnce() -> Predictor) {
        let train_loss = self.window.iter().sum::<f64>() / self.window.len().max(1) as f64;
        self.window.clear();
        self.points.push(EvalPoint { iteration, train_loss, eval });
        if self.best.as_ref().is_none_or(|(b, _, _)| eval.accuracy > b.accuracy) {
            self.best = Some((eval, iteration, predictor()));
        }
    }

    fn finish(
        self,
        cfg: &TrainConfig,
        missing_rate: f64,
        predictor: Predictor,
        actor_critic: Option<ActorCritic>,
        clock: Stopwatch,
    ) -> TrainOutcome {
        let final_eval = self.points.last().expect("at least one evaluation").eval;
        let (best_eval, best_iteration, best) = self.best.expect("at least one evaluation");
        TrainOutcome {
            predictor,
            best,
            actor_critic,
            report: TrainReport {
                variant: cfg.variant,
                seed: cfg.seed,
                iterations: cfg.max_iter,
                points: self.points,
                final_eval,
                best_eval,
                best_iteration,
                missing_rate,
                losses: self.losses,
                rewards: self.rewards,
                wall_clock_secs: clock.secs(),
            },
        }
    }
}

fn tabular_missing_rate(ds: &Dataset) -> f64 {
    crate::missingness::missing_rate(ds)
}

/// Train any variant on tabular data. For the baseline, `train` and
/// `eval` must already be imputed (see [`train_baseline`]).
pub fn train(train: &Dataset, eval: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let clock = Stopwatch::start();
    let eval_data = if cfg.variant != Variant::Baseline && eval.placeholder != cfg.placeholder {
        Cow::Owned(eval.with_placeholder(cfg.placeholder))
    } else {
        Cow::Borrowed(eval)
    };
    if eval_data.d != train.d {
        return Err(GilError::config(format!("train has {} features but eval has {}", train.d, eval_data.d)));
    }
    let mut trainer = MlpTrainer::new(train, cfg)?;
    let mut progress = Progress::new();
    for it in 1..=cfg.max_iter {
        let info = trainer.step()?;
        progress.record(&info);
        if it % cfg.eval_every == 0 || it == cfg.max_iter {
            let p = trainer.predictor();
            let ev = p.evaluate(&eval_data)?;
            progress.evaluate(it, ev, || p);
        }
    }
    let predictor = trainer.predictor();
    let ac = trainer.rl.take().map(|d| d.actor_critic);
    Ok(progress.finish(cfg, tabular_missing_rate(train), predictor, ac, clock))
}

pub fn train_sequences(train: &SequenceDataset, eval: &SequenceDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let clock = Stopwatch::start();
    let eval_data = if cfg.variant != Variant::Baseline && eval.placeholder != cfg.placeholder {
        Cow::Owned(sequences_with_placeholder(eval, cfg.placeholder))
    } else {
        Cow::Borrowed(eval)
    };
    let mut trainer = LstmTrainer::new(train, cfg)?;
    let mut progress = Progress::new();
    for it in 1..=cfg.max_iter {
        let info = trainer.step()?;
        progress.record(&info);
        if it % cfg.eval_every == 0 || it == cfg.max_iter {
            let p = trainer.predictor();
            let ev = p.evaluate_sequences(&eval_data)?;
            progress.evaluate(it, ev, || p);
        }
    }
    let predictor = trainer.predictor();
    let ac = trainer.rl.take().map(|d| d.actor_critic);
    Ok(progress.finish(cfg, crate::missingness::missing_rate_sequences(train), predictor, ac, clock))
}

fn expect_variant(cfg: &TrainConfig, v: Variant) -> Result<()> {
    if cfg.variant != v {
        return Err(GilError::config(format!("expected variant {}, config says {}", v.name(), cfg.variant.name())));
    }
    Ok(())
}

pub fn train_gil(train_ds: &Dataset, eval: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    expect_variant(cfg, Variant::Gil)?;
    train(train_ds, eval, cfg)
}

pub fn train_gil_h(train_ds: &Dataset, eval: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    expect_variant(cfg, Variant::GilH)?;
    train(train_ds, eval, cfg)
}

pub fn train_gil_d(train_ds: &Dataset, eval: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    expect_variant(cfg, Variant::GilD)?;
    train(train_ds, eval, cfg)
}

pub fn train_ablation_input(train_ds: &Dataset, eval: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    expect_variant(cfg, Variant::AblationInput)?;
    train(train_ds, eval, cfg)
}

/// Impute with `cfg.imputer` (means from the training split), then train
/// plainly. The imputation error is measured on the training split when
/// its complete values are supplied.
pub fn train_baseline(
    train_ds: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
    truth: Option<&Dataset>,
) -> Result<(TrainOutcome, Option<f64>)> {
    expect_variant(cfg, Variant::Baseline)?;
    let means = &train_ds.column_means;
    let train_imp = impute(train_ds, cfg.imputer, means, cfg.noise_std, cfg.seed)?;
    let eval_imp = impute(eval, cfg.imputer, means, cfg.noise_std, cfg.seed ^ 0xe7a1)?;
    let mse = match truth {
        Some(t) => Some(metrics::imputation_mse(&train_imp, t)?),
        None => None,
    };
    Ok((train(&train_imp, &eval_imp, cfg)?, mse))
}

pub fn train_baseline_sequences(
    train_ds: &SequenceDataset,
    eval: &SequenceDataset,
    cfg: &TrainConfig,
    truth: Option<&SequenceDataset>,
) -> Result<(TrainOutcome, Option<f64>)> {
    expect_variant(cfg, Variant::Baseline)?;
    let means = &train_ds.column_means;
    let train_imp = impute_sequences(train_ds, cfg.imputer, means, cfg.noise_std, cfg.seed)?;
    let eval_imp = impute_sequences(eval, cfg.imputer, means, cfg.noise_std, cfg.seed ^ 0xe7a1)?;
    let mse = match truth {
        Some(t) => Some(metrics::imputation_mse_sequences(&train_imp, t)?),
        None => None,
    };
    Ok((train_sequences(&train_imp, &eval_imp, cfg)?, mse))
}

/// Loss of the ablation model `f(x * h(x))`.
pub fn ablation_loss(model: &MlpModel, gate: &MlpModel, x: &[f64], y: &[f64]) -> f64 {
    let h = gate.predict(x);
    LOSS.value(&model.predict(&hadamard_vec(x, &h)), y)
}

/// Joint gradients of [`ablation_loss`] for the model and the gate.
pub fn ablation_gradients(model: &MlpModel, gate: &MlpModel, x: &[f64], y: &[f64]) -> (MlpGradBuffer, MlpGradBuffer) {
    let gc = gate.forward(x);
    let cache = model.forward(&hadamard_vec(x, gc.output()));
    let g = model.backward(&cache, y, LOSS);
    let mut mb = MlpGradBuffer::zeros_like(model);
    mb.accumulate(&g, &cache, 1.0, None);
    let up = hadamard_vec(x, &g.input_grad);
    let gg = gate.backward_from_output_grad(&gc, &up);
    let mut gb = MlpGradBuffer::zeros_like(gate);
    gb.accumulate(&gg, &gc, 1.0, None);
    (mb, gb)
}
