//! Deterministic actor-critic that produces per-feature importance vectors.
//!
//! The actor maps a flattened state `(x_filled, m, zeta, y_hat)` to an
//! action in `(0,1)^d`; the critic scores a state-action pair. Both are
//! trained from the same transition with gradients taken at the
//! pre-update parameters.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GilError, Result};
use crate::linalg::{Activation, Vector};
use crate::models::mlp::{MlpGradBuffer, MlpModel};
use crate::optim::{OptimConfig, Optimizer, OptimizerKind};
use crate::seeded_rng;

#[derive(Clone, Debug, PartialEq)]
pub struct GilState {
    pub x_filled: Vector,
    pub m: Vector,
    pub zeta: Vector,
    pub y_hat: Vector,
}

impl GilState {
    pub fn dim(d: usize, e: usize, num_classes: usize) -> usize {
        2 * d + e + num_classes
    }

    pub fn flatten(&self) -> Vector {
        Vector::concat(&[&self.x_filled, &self.m, &self.zeta, &self.y_hat])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: GilState,
    pub a: Vector,
    pub r: f64,
    pub s_next: GilState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub optimizer: OptimizerKind,
    pub gamma: f64,
    /// Mixture weights for (actor, missing indicator, uniform random).
    pub mixture: [f64; 3],
    pub noise_sigma: f64,
    pub hidden: Vec<usize>,
    pub target_networks: bool,
    pub tau: f64,
    pub replay: bool,
    pub replay_capacity: usize,
    pub minibatch: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            actor_lr: 1e-4,
            critic_lr: 3e-4,
            optimizer: OptimizerKind::Adam,
            gamma: 0.99,
            mixture: [0.8, 0.1, 0.1],
            noise_sigma: 0.1,
            hidden: vec![256, 256],
            target_networks: false,
            tau: 0.005,
            replay: false,
            replay_capacity: 10_000,
            minibatch: 64,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.mixture.iter().sum();
        if self.mixture.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-9 {
            return Err(GilError::config(format!("behavioral mixture {:?} must be probabilities summing to 1", self.mixture)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(GilError::config(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if self.actor_lr < 0.0 || self.critic_lr < 0.0 || !self.actor_lr.is_finite() || !self.critic_lr.is_finite() {
            return Err(GilError::config("actor/critic learning rates must be non-negative"));
        }
        if self.noise_sigma < 0.0 {
            return Err(GilError::config("noise_sigma must be non-negative"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(GilError::config("actor/critic need at least one non-empty hidden layer"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(GilError::config(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if self.replay && (self.replay_capacity == 0 || self.minibatch == 0) {
            return Err(GilError::config("replay capacity and minibatch must be positive"));
        }
        Ok(())
    }
}

/// Which component of the behavioral mixture produced an action.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Actor,
    Mask,
    Random,
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer { capacity, items: Vec::with_capacity(capacity.min(1024)), next: 0 }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn items(&self) -> &[Transition] {
        &self.items
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Uniform sample with replacement.
    pub fn sample<'a>(&'a self, n: usize, rng: &mut impl Rng) -> Result<Vec<&'a Transition>> {
        if self.items.is_empty() {
            return Err(GilError::EmptyReplay);
        }
        Ok((0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect())
    }
}

#[derive(Clone, Debug)]
pub struct ActorCritic {
    pub config: RlConfig,
    pub actor: MlpModel,
    pub critic: MlpModel,
    pub target_actor: Option<MlpModel>,
    pub target_critic: Option<MlpModel>,
    pub replay: Option<ReplayBuffer>,
    actor_opt: Optimizer,
    critic_opt: Optimizer,
    replay_rng: ChaCha8Rng,
    action_dim: usize,
}

/// Diagnostics from one joint update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateStats {
    /// Mean TD error over the transitions used.
    pub td_error: f64,
    pub transitions: usize,
}

impl ActorCritic {
    pub fn new(state_dim: usize, action_dim: usize, config: RlConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut actor_dims = vec![state_dim];
        actor_dims.extend(&config.hidden);
        actor_dims.push(action_dim);
        let mut critic_dims = vec![state_dim + action_dim];
        critic_dims.extend(&config.hidden);
        critic_dims.push(1);
        let actor = MlpModel::with_hidden(&actor_dims, Activation::Relu, Activation::Sigmoid, seed ^ 0xac70)?;
        let critic = MlpModel::with_hidden(&critic_dims, Activation::Relu, Activation::Identity, seed ^ 0xc417)?;
        let opt = |lr: f64| OptimConfig { kind: config.optimizer, lr: lr.max(f64::MIN_POSITIVE), ..OptimConfig::adam(1e-3) };
        let actor_opt = Optimizer::new(opt(config.actor_lr), &actor.slot_sizes());
        let critic_opt = Optimizer::new(opt(config.critic_lr), &critic.slot_sizes());
        let (target_actor, target_critic) = if config.target_networks {
            (Some(actor.clone()), Some(critic.clone()))
        } else {
            (None, None)
        };
        let replay = config.replay.then(|| ReplayBuffer::new(config.replay_capacity));
        Ok(ActorCritic {
            config,
            actor,
            critic,
            target_actor,
            target_critic,
            replay,
            actor_opt,
            critic_opt,
            replay_rng: seeded_rng(seed, 0x7e91),
            action_dim,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn actor_forward(&self, s: &[f64]) -> Vector {
        self.actor.predict(s)
    }

    pub fn critic_forward(&self, s: &[f64], a: &[f64]) -> f64 {
        self.critic.predict(&Vector::concat(&[s, a]))[0]
    }

    /// `dQ/da` at `(s, a)`.
    pub fn action_gradient(&self, s: &[f64], a: &[f64]) -> Vector {
        let cache = self.critic.forward(&Vector::concat(&[s, a]));
        let g = self.critic.backward_from_output_grad(&cache, &[1.0]);
        Vector(g.input_grad[s.len()..].to_vec())
    }

    /// Draw an action from the behavioral mixture.
    pub fn behavioral(&self, state: &GilState, rng: &mut impl Rng) -> (Vector, Branch) {
        let [p1, p2, _] = self.config.mixture;
        let u: f64 = rng.random();
        if u < p1 {
            let mut a = self.actor_forward(&state.flatten());
            if self.config.noise_sigma > 0.0 {
                let noise = Normal::new(0.0, self.config.noise_sigma).expect("sigma validated");
                for v in a.iter_mut() {
                    *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
                }
            }
            (a, Branch::Actor)
        } else if u < p1 + p2 {
            (state.m.clone(), Branch::Mask)
        } else {
            (Vector((0..self.action_dim).map(|_| rng.random::<f64>()).collect()), Branch::Random)
        }
    }

    /// TD error of one transition under the current parameters.
    pub fn td_error(&self, t: &Transition) -> f64 {
        let s = t.s.flatten();
        let s_next = t.s_next.flatten();
        let actor = self.target_actor.as_ref().unwrap_or(&self.actor);
        let critic = self.target_critic.as_ref().unwrap_or(&self.critic);
        let a_next = actor.predict(&s_next);
        let q_next = critic.predict(&Vector::concat(&[&s_next, &a_next]))[0];
        t.r + self.config.gamma * q_next - self.critic_forward(&s, &t.a)
    }

    /// Feed one fresh transition. Without replay it is used directly;
    /// with replay it is stored and a uniform minibatch is trained on.
    pub fn update(&mut self, t: Transition) -> Result<UpdateStats> {
        match self.replay.as_mut() {
            None => self.update_batch(&[&t]),
            Some(buf) => {
                buf.push(t);
                let n = self.config.minibatch;
                let batch: Vec<Transition> = {
                    let buf = self.replay.as_ref().unwrap();
                    buf.sample(n, &mut self.replay_rng)?.into_iter().cloned().collect()
                };
                let refs: Vec<&Transition> = batch.iter().collect();
                self.update_batch(&refs)
            }
        }
    }

    /// Joint actor and critic step on the mean gradient over `batch`.
    pub fn update_batch(&mut self, batch: &[&Transition]) -> Result<UpdateStats> {
        if batch.is_empty() {
            return Err(GilError::EmptyReplay);
        }
        let n = batch.len() as f64;
        let mut critic_grad = MlpGradBuffer::zeros_like(&self.critic);
        let mut actor_grad = MlpGradBuffer::zeros_like(&self.actor);
        let mut td_sum = 0.0;
        for t in batch {
            if t.a.len() != self.action_dim || !t.r.is_finite() {
                return Err(GilError::Contract("malformed transition".into()));
            }
            let delta = self.td_error(t);
            if !delta.is_finite() {
                return Err(GilError::Divergence { iteration: self.critic_opt.steps_taken() as usize, message: format!("TD error is {delta}") });
            }
            td_sum += delta;
            let s = t.s.flatten();
            // critic: descend 0.5 * delta^2 with the bootstrap target held fixed
            let cache = self.critic.forward(&Vector::concat(&[&s, &t.a]));
            let g = self.critic.backward_from_output_grad(&cache, &[-delta]);
            critic_grad.accumulate(&g, &cache, 1.0 / n, None);
            // actor: ascend Q(s, pi(s))
            let a_cache = self.actor.forward(&s);
            let dq_da = self.action_gradient(&s, a_cache.output());
            let g = self.actor.backward_from_output_grad(&a_cache, &dq_da.scale(-1.0));
            actor_grad.accumulate(&g, &a_cache, 1.0 / n, None);
        }
        if self.config.critic_lr > 0.0 {
            self.critic_opt.step(self.critic.params_mut(), &critic_grad.slots());
        }
        if self.config.actor_lr > 0.0 {
            self.actor_opt.step(self.actor.params_mut(), &actor_grad.slots());
        }
        let tau = self.config.tau;
        if let Some(ta) = self.target_actor.as_mut() {
            ta.soft_update_from(&self.actor, tau);
        }
        if let Some(tc) = self.target_critic.as_mut() {
            tc.soft_update_from(&self.critic, tau);
        }
        Ok(UpdateStats { td_error: td_sum / n, transitions: batch.len() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(cfg: RlConfig) -> ActorCritic {
        ActorCritic::new(GilState::dim(3, 2, 2), 3, RlConfig { hidden: vec![16, 16], ..cfg }, 7).unwrap()
    }

    fn state(seed: u64) -> GilState {
        let mut rng = seeded_rng(seed, 1);
        let mut v = |n: usize| Vector((0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
        GilState { x_filled: v(3), m: Vector(vec![1.0, 0.0, 1.0]), zeta: v(2), y_hat: Vector(vec![0.3, 0.7]) }
    }

    fn zero(model: &mut MlpModel) {
        for p in model.params_mut() {
            p.fill(0.0);
        }
    }

    #[test]
    fn zero_actor_outputs_half_and_zero_critic_outputs_zero() {
        let mut ac = small(RlConfig::default());
        zero(&mut ac.actor);
        zero(&mut ac.critic);
        let s = state(0).flatten();
        assert_eq!(ac.actor_forward(&s), Vector(vec![0.5; 3]));
        assert_eq!(ac.critic_forward(&s, &[0.1, 0.2, 0.3]), 0.0);
    }

    #[test]
    fn actor_is_deterministic_and_in_range() {
        let ac = small(RlConfig::default());
        for seed in 0..20 {
            let s = state(seed).flatten();
            let a = ac.actor_forward(&s);
            assert_eq!(a.len(), 3);
            assert_eq!(a, ac.actor_forward(&s));
            assert!(a.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn critic_matches_naive_evaluation() {
        let ac = small(RlConfig::default());
        let s = state(3).flatten();
        let a = [0.2, 0.9, 0.4];
        let mut q: Vec<f64> = s.iter().chain(a.iter()).copied().collect();
        for (i, l) in ac.critic.layers.iter().enumerate() {
            q = (0..l.outputs())
                .map(|r| {
                    let z = l.b[r] + (0..l.inputs()).map(|c| l.w.get(r, c) * q[c]).sum::<f64>();
                    if i + 1 < ac.critic.layers.len() { z.max(0.0) } else { z }
                })
                .collect();
        }
        assert!((q[0] - ac.critic_forward(&s, &a)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_mixtures() {
        let ac = small(RlConfig { mixture: [1.0, 0.0, 0.0], noise_sigma: 0.0, ..Default::default() });
        let mut rng = seeded_rng(1, 2);
        let st = state(4);
        for _ in 0..20 {
            assert_eq!(ac.behavioral(&st, &mut rng), (ac.actor_forward(&st.flatten()), Branch::Actor));
        }
        let ac = small(RlConfig { mixture: [0.0, 1.0, 0.0], ..Default::default() });
        for _ in 0..20 {
            assert_eq!(ac.behavioral(&st, &mut rng).0, st.m);
        }
    }

    #[test]
    fn every_branch_stays_in_unit_cube() {
        let ac = small(RlConfig { mixture: [0.4, 0.3, 0.3], noise_sigma: 0.5, ..Default::default() });
        let mut rng = seeded_rng(2, 2);
        for k in 0..2000 {
            let (a, _) = ac.behavioral(&state(k % 7), &mut rng);
            assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn td_fixed_point_leaves_critic_unchanged() {
        let mut ac = small(RlConfig { gamma: 0.0, actor_lr: 0.0, optimizer: OptimizerKind::Sgd, ..Default::default() });
        let s = state(5);
        let a = Vector(vec![0.3, 0.3, 0.3]);
        let r = ac.critic_forward(&s.flatten(), &a);
        let before = ac.critic.clone();
        let actor_before = ac.actor.clone();
        let stats = ac.update(Transition { s: s.clone(), a, r, s_next: state(6) }).unwrap();
        assert_eq!(stats.td_error, 0.0);
        assert_eq!(ac.critic, before);
        assert_eq!(ac.actor, actor_before);
    }

    #[test]
    fn td_error_uses_pre_update_parameters() {
        let mut ac = small(RlConfig::default());
        let t = Transition { s: state(1), a: Vector(vec![0.1, 0.5, 0.9]), r: -0.7, s_next: state(2) };
        let sn = t.s_next.flatten();
        let want = t.r + 0.99 * ac.critic_forward(&sn, &ac.actor_forward(&sn)) - ac.critic_forward(&t.s.flatten(), &t.a);
        let got = ac.update(t).unwrap().td_error;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn action_gradient_matches_finite_differences() {
        let ac = small(RlConfig::default());
        let s = state(8).flatten();
        let a = [0.25, 0.6, 0.75];
        let g = ac.action_gradient(&s, &a);
        for j in 0..3 {
            let h = 1e-6;
            let mut ap = a;
            let mut am = a;
            ap[j] += h;
            am[j] -= h;
            let fd = (ac.critic_forward(&s, &ap) - ac.critic_forward(&s, &am)) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-5, "{fd} vs {}", g[j]);
        }
    }

    #[test]
    fn replay_ring_evicts_oldest() {
        let mut buf = ReplayBuffer::new(2);
        for r in [1.0, 2.0, 3.0] {
            buf.push(Transition { s: state(0), a: Vector(vec![0.0; 3]), r, s_next: state(0) });
        }
        let mut rs: Vec<f64> = buf.items().iter().map(|t| t.r).collect();
        rs.sort_by(f64::total_cmp);
        assert_eq!(rs, vec![2.0, 3.0]);
        assert!(matches!(ReplayBuffer::new(3).sample(1, &mut seeded_rng(0, 0)), Err(GilError::EmptyReplay)));
    }

    #[test]
    fn target_networks_trail_the_online_networks() {
        let mut ac = small(RlConfig { target_networks: true, ..Default::default() });
        let t0 = ac.target_actor.clone().unwrap();
        ac.update(Transition { s: state(1), a: Vector(vec![0.5; 3]), r: -1.0, s_next: state(2) }).unwrap();
        let ta = ac.target_actor.as_ref().unwrap();
        assert_ne!(ta, &t0);
        assert_ne!(ta, &ac.actor);
        let (w_t, w_0, w_a) = (ta.layers[0].w.get(0, 0), t0.layers[0].w.get(0, 0), ac.actor.layers[0].w.get(0, 0));
        assert!((w_t - (0.005 * w_a + 0.995 * w_0)).abs() < 1e-15);
    }

    #[test]
    fn replay_mode_trains_on_minibatches() {
        let mut ac = small(RlConfig { replay: true, minibatch: 4, ..Default::default() });
        let stats = ac.update(Transition { s: state(1), a: Vector(vec![0.5; 3]), r: -1.0, s_next: state(2) }).unwrap();
        assert_eq!(stats.transitions, 4);
        assert_eq!(ac.replay.as_ref().unwrap().len(), 1);
    }

    #[test]
    fn invalid_configs() {
        assert!(RlConfig { mixture: [0.5, 0.5, 0.5], ..Default::default() }.validate().is_err());
        assert!(RlConfig { gamma: 1.5, ..Default::default() }.validate().is_err());
        assert!(RlConfig { hidden: vec![], ..Default::default() }.validate().is_err());
    }
}
