//! Dueling-DQN policy over step sizes, replay-based TD learning, and reward.

mod action;
mod net;
mod reward;

use std::collections::VecDeque;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use action::{ActionSpace, ActionSpec, N_ADD_GRID, N_REM_GRID};
pub use net::{Activations, Adam, DuelingQNet, NetDims, CHECKPOINT_MAGIC};
pub use reward::{compute_reward, RewardTerms, EPS_DIV};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// Actions available in `next_state`; empty means all.
    pub next_valid: Vec<bool>,
    pub done: bool,
}

/// Fixed-capacity FIFO of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), items: VecDeque::with_capacity(capacity.min(1 << 16)) }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Uniform sample without replacement (everything if fewer are stored).
    pub fn sample(&self, rng: &mut impl Rng, batch: usize) -> Vec<&Transition> {
        let n = batch.min(self.items.len());
        sample(rng, self.items.len(), n).into_iter().map(|i| &self.items[i]).collect()
    }
}

fn greedy(q: &[f64], valid: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in q.iter().enumerate() {
        if !valid.get(i).copied().unwrap_or(true) {
            continue;
        }
        if best.is_none_or(|b| v > q[b]) {
            best = Some(i);
        }
    }
    best
}

/// Epsilon-greedy over the valid actions; greedy ties go to the lowest index.
pub fn select_action(
    net: &DuelingQNet,
    state: &[f64],
    valid: &[bool],
    epsilon: f64,
    rng: &mut impl Rng,
) -> Result<usize> {
    if !(0.0..=1.0).contains(&epsilon) {
        return invalid(format!("epsilon {epsilon} outside [0, 1]"));
    }
    if valid.len() != net.dims().actions {
        return invalid(format!("validity mask has {} entries for {} actions", valid.len(), net.dims().actions));
    }
    let candidates: Vec<usize> = (0..valid.len()).filter(|&i| valid[i]).collect();
    if candidates.is_empty() {
        return Err(Error::Precondition("no valid action".into()));
    }
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return Ok(candidates[rng.random_range(0..candidates.len())]);
    }
    let q = net.q_values(state)?;
    Ok(greedy(&q, valid).expect("non-empty valid set"))
}

/// Bootstrapped targets `r + gamma * max_a' Q_target(s', a')`, or `r` for
/// terminal transitions. The max runs over the actions valid in `s'`.
pub fn td_targets(target: &DuelingQNet, batch: &[&Transition], gamma: f64) -> Result<Vec<f64>> {
    batch
        .iter()
        .map(|t| {
            if t.done || gamma == 0.0 {
                return Ok(t.reward);
            }
            let q = target.q_values(&t.next_state)?;
            let best = if t.next_valid.is_empty() {
                q.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            } else {
                q[greedy(&q, &t.next_valid).ok_or_else(|| Error::Precondition("no valid next action".into()))?]
            };
            Ok(t.reward + gamma * best)
        })
        .collect()
}

/// Mean squared TD error and its gradient with respect to `net`'s parameters.
pub fn td_loss_and_gradient(net: &DuelingQNet, batch: &[&Transition], targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; net.params().len()];
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for (t, &y) in batch.iter().zip(targets) {
        if t.action >= net.dims().actions {
            return invalid(format!("action {} out of range", t.action));
        }
        let acts = net.forward(&t.state)?;
        let err = acts.q[t.action] - y;
        loss += err * err * scale;
        let mut dq = vec![0.0; net.dims().actions];
        dq[t.action] = 2.0 * err * scale;
        net.accumulate_gradient(&t.state, &acts, &dq, &mut grad);
    }
    Ok((loss, grad))
}

/// One optimizer step on the mean squared TD error. Returns the loss before
/// the step.
pub fn td_update(
    net: &mut DuelingQNet,
    target: &DuelingQNet,
    batch: &[&Transition],
    gamma: f64,
    optimizer: &mut Adam,
) -> Result<f64> {
    if batch.is_empty() {
        return invalid("empty training batch");
    }
    if let Some(t) = batch.iter().find(|t| !t.reward.is_finite()) {
        return Err(Error::Numerical(format!("non-finite reward {} in batch", t.reward)));
    }
    let targets = td_targets(target, batch, gamma)?;
    let (loss, grad) = td_loss_and_gradient(net, batch, &targets)?;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        let worst = batch.iter().map(|t| t.reward.abs()).fold(0.0, f64::max);
        return Err(Error::Numerical(format!(
            "TD loss {loss} is not finite (batch of {}, max |reward| {worst}, max |target| {})",
            batch.len(),
            targets.iter().map(|v| v.abs()).fold(0.0, f64::max)
        )));
    }
    optimizer.step(net.params_mut(), &grad);
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub gamma: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_decay_steps: u64,
    pub target_sync: u64,
    pub lr: f64,
    pub hidden: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            replay_capacity: 10_000,
            batch_size: 64,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_decay_steps: 5_000,
            target_sync: 500,
            lr: 1e-3,
            hidden: 128,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return invalid(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.eps_start) || !(0.0..=1.0).contains(&self.eps_end) {
            return invalid("epsilon schedule must stay within [0, 1]");
        }
        if self.batch_size == 0 || self.replay_capacity == 0 || self.hidden == 0 || self.target_sync == 0 {
            return invalid("batch_size, replay_capacity, hidden and target_sync must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return invalid(format!("learning rate {} must be positive", self.lr));
        }
        Ok(())
    }
}

/// Online and target networks, replay, optimizer and exploration schedule.
#[derive(Debug, Clone)]
pub struct Agent {
    config: AgentConfig,
    space: ActionSpace,
    online: DuelingQNet,
    target: DuelingQNet,
    optimizer: Adam,
    replay: ReplayBuffer,
    rng: ChaCha8Rng,
    steps: u64,
    updates: u64,
    last_loss: Option<f64>,
}

impl Agent {
    pub fn new(config: AgentConfig, space: ActionSpace, state_len: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let dims = NetDims { input: state_len, hidden: config.hidden, actions: space.len() };
        let online = DuelingQNet::new(dims, seed)?;
        Ok(Self::from_net(config, space, online, seed))
    }

    /// Wraps an existing (e.g. loaded) network.
    pub fn from_net(config: AgentConfig, space: ActionSpace, net: DuelingQNet, seed: u64) -> Self {
        Self {
            optimizer: Adam::new(net.params().len(), config.lr),
            replay: ReplayBuffer::new(config.replay_capacity),
            target: net.clone(),
            online: net,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a6e7),
            config,
            space,
            steps: 0,
            updates: 0,
            last_loss: None,
        }
    }

    pub fn space(&self) -> &ActionSpace {
        &self.space
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn net(&self) -> &DuelingQNet {
        &self.online
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.last_loss
    }

    pub fn replay_len(&self) -> usize {
        self.replay.len()
    }

    /// Linear decay from `eps_start` to `eps_end` over `eps_decay_steps`.
    pub fn epsilon(&self) -> f64 {
        let c = &self.config;
        if self.steps >= c.eps_decay_steps {
            return c.eps_end;
        }
        let frac = self.steps as f64 / c.eps_decay_steps as f64;
        c.eps_start + (c.eps_end - c.eps_start) * frac
    }

    /// Picks an action while training: scheduled epsilon, step counter advances.
    pub fn act_training(&mut self, state: &[f64], valid: &[bool]) -> Result<usize> {
        let eps = self.epsilon();
        self.steps += 1;
        select_action(&self.online, state, valid, eps, &mut self.rng)
    }

    /// Picks an action with a fixed epsilon, leaving the schedule untouched.
    pub fn act(&mut self, state: &[f64], valid: &[bool], epsilon: f64) -> Result<usize> {
        select_action(&self.online, state, valid, epsilon, &mut self.rng)
    }

    /// Stores a transition and, once a full batch is available, performs one
    /// TD update. Returns the loss when an update happened.
    pub fn observe(&mut self, t: Transition) -> Result<Option<f64>> {
        if !t.reward.is_finite() {
            return Err(Error::Numerical(format!("non-finite reward {}", t.reward)));
        }
        self.replay.push(t);
        if self.replay.len() < self.config.batch_size {
            return Ok(None);
        }
        let batch: Vec<Transition> =
            self.replay.sample(&mut self.rng, self.config.batch_size).into_iter().cloned().collect();
        let refs: Vec<&Transition> = batch.iter().collect();
        let loss = td_update(&mut self.online, &self.target, &refs, self.config.gamma, &mut self.optimizer)?;
        self.updates += 1;
        if self.updates.is_multiple_of(self.config.target_sync) {
            self.target = self.online.clone();
        }
        self.last_loss = Some(loss);
        Ok(Some(loss))
    }
}
