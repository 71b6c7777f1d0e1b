//! Deep Q-learning over the action dictionary: the Q-network, a FIFO replay
//! buffer, ε-greedy selection and the resumable training loop.

use alloc::collections::VecDeque;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::action::CrAdjustment;
use crate::features::Observation;
use crate::nn::{leaky_relu, leaky_relu_grad, Adam, ConvTrunk, Dense, InputNorm, ParamLayout, Tensor4, TrunkCache};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub n_episodes: usize,
    pub steps_per_episode: usize,
    /// Environment steps between two training updates.
    pub train_frequency: usize,
    pub batch_size: usize,
    pub gamma: f64,
    /// Environment steps that only collect transitions.
    pub no_op_steps: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Share of all training steps over which ε decays linearly.
    pub epsilon_decay_fraction: f64,
    pub replay_capacity: usize,
    /// Updates between copies into a frozen bootstrap network; 0 bootstraps
    /// from the live network.
    pub target_sync_interval: usize,
    pub learning_rate: f64,
    pub conv_filters: Vec<usize>,
    pub conv_kernel: usize,
    pub dense_units: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            n_episodes: 300,
            steps_per_episode: 20,
            train_frequency: 20,
            batch_size: 50,
            gamma: 0.99,
            no_op_steps: 30,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.5,
            replay_capacity: 2000,
            target_sync_interval: 0,
            learning_rate: 1e-3,
            conv_filters: vec![32, 64, 128],
            conv_kernel: 3,
            dense_units: 256,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(m.into()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if [self.n_episodes, self.steps_per_episode, self.train_frequency, self.batch_size, self.replay_capacity, self.dense_units]
            .contains(&0)
        {
            return bad("agent counts must be positive");
        }
        if self.conv_filters.contains(&0) || self.conv_kernel % 2 == 0 {
            return bad("conv filters must be positive and the kernel odd");
        }
        let eps_ok = |e: f64| (0.0..=1.0).contains(&e);
        if !eps_ok(self.epsilon_start) || !eps_ok(self.epsilon_end) || !(self.epsilon_decay_fraction > 0.0) {
            return bad("epsilon schedule out of range");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.n_episodes * self.steps_per_episode
    }

    /// Linear decay from `epsilon_start` to `epsilon_end` over the first
    /// `epsilon_decay_fraction` of all steps, constant afterwards.
    pub fn epsilon_at(&self, step: usize) -> f64 {
        let horizon = self.epsilon_decay_fraction * self.total_steps() as f64;
        let frac = if horizon > 0.0 { (step as f64 / horizon).min(1.0) } else { 1.0 };
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// Agent state: the observation of the last rendered clip and the adjustment
/// that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub obs: Observation,
    pub prev_adj: CrAdjustment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Arc<AgentState>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Arc<AgentState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, items: VecDeque::with_capacity(capacity.min(4096)) }
    }

    /// Appends, evicting the oldest transition when full.
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

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `n` distinct transitions drawn uniformly.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if self.items.len() < n {
            return Err(Error::NotReady { have: self.items.len(), need: n });
        }
        Ok(rand::seq::index::sample(rng, self.items.len(), n).into_iter().map(|i| &self.items[i]).collect())
    }
}

/// Q_φ(s, ·): conv stages with leaky ReLU and pooling, flattened and joined
/// with the previous adjustment, two dense leaky layers, one output per action.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QNetwork {
    pub input_shape: [usize; 3],
    pub n_adj: usize,
    pub n_actions: usize,
    /// Multiplier applied to the adjustment vector before concatenation.
    pub adj_scale: f64,
    trunk: ConvTrunk,
    hidden1: Dense,
    hidden2: Dense,
    out: Dense,
    n_params: usize,
}

struct QCache {
    trunk: TrunkCache,
    trunk_dims: (usize, usize, usize, usize),
    z0: Vec<f64>,
    a1: Vec<f64>,
    h1: Vec<f64>,
    a2: Vec<f64>,
    h2: Vec<f64>,
}

impl QNetwork {
    pub fn new(cfg: &AgentConfig, input_shape: [usize; 3], n_adj: usize, n_actions: usize, max_scale: f64) -> Result<Self> {
        cfg.validate()?;
        let [h, w, c] = input_shape;
        if h == 0 || w == 0 || c == 0 || n_actions == 0 {
            return Err(Error::InvalidParams("Q-network dimensions must be positive".into()));
        }
        let mut layout = ParamLayout::default();
        let trunk = ConvTrunk::new(&mut layout, c, h, w, &cfg.conv_filters, cfg.conv_kernel, false);
        let flat = trunk.out_c * trunk.out_h * trunk.out_w;
        let hidden1 = Dense::new(&mut layout, flat + n_adj, cfg.dense_units);
        let hidden2 = Dense::new(&mut layout, cfg.dense_units, cfg.dense_units);
        let out = Dense::new(&mut layout, cfg.dense_units, n_actions);
        let adj_scale = if max_scale > 0.0 { 1.0 / max_scale } else { 1.0 };
        Ok(Self { input_shape, n_adj, n_actions, adj_scale, trunk, hidden1, hidden2, out, n_params: layout.len() })
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R) {
        self.trunk.init(params, rng);
        self.hidden1.init(params, 2f64.sqrt(), rng);
        self.hidden2.init(params, 2f64.sqrt(), rng);
        self.out.init(params, 1.0, rng);
    }

    fn forward(&self, params: &[f64], x: Tensor4, adj: &[f64]) -> (Vec<f64>, QCache) {
        let n = x.n;
        let (feat, trunk) = self.trunk.forward(params, x, &[], true);
        let flat = feat.item_len();
        let width = flat + self.n_adj;
        let mut z0 = vec![0.0; n * width];
        for i in 0..n {
            z0[i * width..i * width + flat].copy_from_slice(&feat.data[i * flat..(i + 1) * flat]);
            for (k, v) in adj[i * self.n_adj..(i + 1) * self.n_adj].iter().enumerate() {
                z0[i * width + flat + k] = v * self.adj_scale;
            }
        }
        let a1 = self.hidden1.forward(params, &z0, n);
        let h1: Vec<f64> = a1.iter().map(|&v| leaky_relu(v)).collect();
        let a2 = self.hidden2.forward(params, &h1, n);
        let h2: Vec<f64> = a2.iter().map(|&v| leaky_relu(v)).collect();
        let q = self.out.forward(params, &h2, n);
        (q, QCache { trunk, trunk_dims: (n, feat.c, feat.h, feat.w), z0, a1, h1, a2, h2 })
    }

    fn backward(&self, params: &[f64], cache: &QCache, dq: &[f64], grads: &mut [f64]) {
        let (n, c, h, w) = cache.trunk_dims;
        let mut dh2 = self.out.backward(params, &cache.h2, dq, n, grads);
        for (d, a) in dh2.iter_mut().zip(&cache.a2) {
            *d *= leaky_relu_grad(*a);
        }
        let mut dh1 = self.hidden2.backward(params, &cache.h1, &dh2, n, grads);
        for (d, a) in dh1.iter_mut().zip(&cache.a1) {
            *d *= leaky_relu_grad(*a);
        }
        let dz0 = self.hidden1.backward(params, &cache.z0, &dh1, n, grads);
        let flat = c * h * w;
        let width = flat + self.n_adj;
        let mut dfeat = Tensor4::zeros(n, c, h, w);
        for i in 0..n {
            dfeat.data[i * flat..(i + 1) * flat].copy_from_slice(&dz0[i * width..i * width + flat]);
        }
        self.trunk.backward(params, &cache.trunk, dfeat, grads);
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate() {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// ε-greedy choice. One uniform draw decides exploration in every call.
pub fn select_action<R: Rng + ?Sized>(q: &[f64], epsilon: f64, rng: &mut R) -> usize {
    if rng.gen::<f64>() < epsilon {
        rng.gen_range(0..q.len())
    } else {
        argmax(q)
    }
}

/// `y = r + γ · max_a′ Q′(s′, a′)`, no terminal masking.
pub fn q_target(reward: f64, next_q: &[f64], gamma: f64) -> f64 {
    reward + gamma * next_q.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Q-network weights, optimizer, replay memory and schedule counters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Agent {
    pub cfg: AgentConfig,
    pub net: QNetwork,
    pub params: Vec<f64>,
    /// Frozen bootstrap weights when `target_sync_interval > 0`.
    pub target: Option<Vec<f64>>,
    pub opt: Adam,
    pub replay: ReplayBuffer,
    /// Input standardization fitted on the replay contents at the first update.
    pub norm: Option<InputNorm>,
    pub updates: u64,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(
        cfg: &AgentConfig,
        input_shape: [usize; 3],
        n_adj: usize,
        n_actions: usize,
        max_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let net = QNetwork::new(cfg, input_shape, n_adj, n_actions, max_scale)?;
        let mut params = vec![0.0; net.n_params()];
        net.init(&mut params, rng);
        let target = (cfg.target_sync_interval > 0).then(|| params.clone());
        Ok(Self {
            cfg: cfg.clone(),
            opt: Adam::new(params.len(), cfg.learning_rate),
            replay: ReplayBuffer::new(cfg.replay_capacity),
            net,
            params,
            target,
            norm: None,
            updates: 0,
        })
    }

    fn batch(&self, states: &[&AgentState]) -> Result<(Tensor4, Vec<f64>)> {
        let [h, w, c] = self.net.input_shape;
        let norm = self.norm.unwrap_or_default();
        let mut x = Vec::with_capacity(states.len() * h * w * c);
        let mut adj = Vec::with_capacity(states.len() * self.net.n_adj);
        for s in states {
            if s.obs.shape != self.net.input_shape {
                return Err(Error::Dimension { expected: h * w * c, actual: s.obs.len(), what: "Q-network observation" });
            }
            if s.prev_adj.len() != self.net.n_adj {
                return Err(Error::Dimension { expected: self.net.n_adj, actual: s.prev_adj.len(), what: "Q-network adjustment" });
            }
            x.extend(s.obs.to_chw().into_iter().map(|v| norm.apply(v)));
            adj.extend_from_slice(s.prev_adj.as_slice());
        }
        Ok((Tensor4::from_data(states.len(), c, h, w, x), adj))
    }

    fn q_batch(&self, params: &[f64], states: &[&AgentState]) -> Result<Vec<f64>> {
        let (x, adj) = self.batch(states)?;
        Ok(self.net.forward(params, x, &adj).0)
    }

    pub fn q_values(&self, state: &AgentState) -> Result<Vec<f64>> {
        self.q_batch(&self.params, &[state])
    }

    pub fn greedy_action(&self, state: &AgentState) -> Result<usize> {
        Ok(argmax(&self.q_values(state)?))
    }

    /// Copies the live weights into the bootstrap network.
    pub fn sync_target(&mut self) {
        if let Some(t) = self.target.as_mut() {
            t.copy_from_slice(&self.params);
        }
    }

    /// One Adam step on a uniformly sampled batch; returns the mean squared
    /// TD error. `NotReady` when the buffer holds fewer than a batch.
    pub fn train_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<f64> {
        if self.norm.is_none() {
            if self.replay.len() < self.cfg.batch_size {
                return Err(Error::NotReady { have: self.replay.len(), need: self.cfg.batch_size });
            }
            self.norm = Some(InputNorm::fit(self.replay.iter().map(|t| t.state.obs.data.as_slice())));
        }
        let batch: Vec<Transition> = self.replay.sample(self.cfg.batch_size, rng)?.into_iter().cloned().collect();
        self.train_on(&batch)
    }

    /// Mean squared TD error of `batch` at `params` against the bootstrap
    /// network, and its gradient with the targets held constant.
    pub fn td_loss_grad(&self, params: &[f64], batch: &[Transition]) -> Result<(f64, Vec<f64>)> {
        if params.len() != self.params.len() {
            return Err(Error::Dimension { expected: self.params.len(), actual: params.len(), what: "Q-network parameters" });
        }
        let n = batch.len();
        let na = self.net.n_actions;
        let next: Vec<&AgentState> = batch.iter().map(|t| t.next_state.as_ref()).collect();
        let boot = self.target.as_deref().unwrap_or(&self.params);
        let next_q = self.q_batch(boot, &next)?;
        let ys: Vec<f64> = batch
            .iter()
            .enumerate()
            .map(|(i, t)| q_target(t.reward, &next_q[i * na..(i + 1) * na], self.cfg.gamma))
            .collect();
        let states: Vec<&AgentState> = batch.iter().map(|t| t.state.as_ref()).collect();
        let (x, adj) = self.batch(&states)?;
        let (q, cache) = self.net.forward(params, x, &adj);
        let mut dq = vec![0.0; q.len()];
        let mut loss = 0.0;
        for (i, t) in batch.iter().enumerate() {
            if t.action >= na {
                return Err(Error::InvalidAction { action: t.action, n_actions: na });
            }
            let e = q[i * na + t.action] - ys[i];
            loss += e * e / n as f64;
            dq[i * na + t.action] = 2.0 * e / n as f64;
        }
        let mut grads = vec![0.0; params.len()];
        self.net.backward(params, &cache, &dq, &mut grads);
        Ok((loss, grads))
    }

    /// One Adam step on the given transitions with constant targets.
    pub fn train_on(&mut self, batch: &[Transition]) -> Result<f64> {
        let (loss, grads) = self.td_loss_grad(&self.params, batch)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch: self.updates as usize });
        }
        self.opt.step(&mut self.params, &grads);
        self.updates += 1;
        if self.cfg.target_sync_interval > 0 && self.updates % self.cfg.target_sync_interval as u64 == 0 {
            self.sync_target();
        }
        Ok(loss)
    }
}

/// The agent's view of the environment: apply an action, observe the next
/// state. No reward and no episode end are reported.
pub trait AgentEnv {
    fn current_state(&mut self) -> Result<AgentState>;
    fn step(&mut self, action: usize) -> Result<AgentState>;
}

/// Scalar reward of a state, e.g. σ(r̂) of the reward predictor.
pub trait RewardSource {
    fn reward(&self, state: &AgentState) -> Result<f64>;
}

impl<F: Fn(&AgentState) -> Result<f64>> RewardSource for F {
    fn reward(&self, state: &AgentState) -> Result<f64> {
        self(state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub mean_reward: f64,
    /// Mean Q-value of the selected actions.
    pub mean_q: f64,
    /// Exploration rate at the last step of the episode.
    pub epsilon: f64,
    /// Mean training loss of the updates in this episode, if any ran.
    pub loss: Option<f64>,
    /// Mean over the held-out states of the largest Q-value.
    #[serde(default)]
    pub held_out_max_q: Option<f64>,
}

/// Resumable training loop. The environment is one uninterrupted stream;
/// episodes only structure the schedule and the logs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentTrainer {
    pub agent: Agent,
    pub global_step: usize,
    pub episode: usize,
    /// States never trained on, scored after every episode.
    #[serde(default)]
    pub held_out: Vec<AgentState>,
    state: Option<Arc<AgentState>>,
}

impl AgentTrainer {
    pub fn new(agent: Agent) -> Self {
        Self { agent, global_step: 0, episode: 0, held_out: Vec::new(), state: None }
    }

    pub fn episodes_remaining(&self) -> usize {
        self.agent.cfg.n_episodes.saturating_sub(self.episode)
    }

    pub fn epsilon(&self) -> f64 {
        self.agent.cfg.epsilon_at(self.global_step)
    }

    /// Runs `n` episodes; errors carry the episode index.
    pub fn run_episodes<E: AgentEnv + ?Sized, S: RewardSource + ?Sized, R: Rng + ?Sized>(
        &mut self,
        env: &mut E,
        reward: &S,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<EpisodeMetrics>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let ep = self.episode;
            out.push(self.run_episode(env, reward, rng).map_err(|e| e.in_stage("agent episode", ep))?);
        }
        Ok(out)
    }

    fn run_episode<E: AgentEnv + ?Sized, S: RewardSource + ?Sized, R: Rng + ?Sized>(
        &mut self,
        env: &mut E,
        reward: &S,
        rng: &mut R,
    ) -> Result<EpisodeMetrics> {
        let cfg = self.agent.cfg.clone();
        let (mut r_sum, mut q_sum, mut l_sum, mut n_updates) = (0.0, 0.0, 0.0, 0usize);
        let mut eps = self.epsilon();
        for _ in 0..cfg.steps_per_episode {
            let state = match self.state.take() {
                Some(s) => s,
                None => Arc::new(env.current_state()?),
            };
            eps = self.epsilon();
            let q = self.agent.q_values(&state)?;
            let action = select_action(&q, eps, rng);
            let next = Arc::new(env.step(action)?);
            let r = reward.reward(&next)?;
            if !r.is_finite() {
                return Err(Error::InvalidParams("reward is not finite".into()));
            }
            r_sum += r;
            q_sum += q[action];
            self.agent.replay.push(Transition { state, action, reward: r, next_state: Arc::clone(&next) });
            self.state = Some(next);
            self.global_step += 1;
            if self.global_step > cfg.no_op_steps && (self.global_step - cfg.no_op_steps) % cfg.train_frequency == 0 {
                match self.agent.train_step(rng) {
                    Ok(l) => {
                        l_sum += l;
                        n_updates += 1;
                    }
                    Err(Error::NotReady { .. }) => {}
                    Err(e) => return Err(e),
                }
            }
        }
        let steps = cfg.steps_per_episode as f64;
        let held_out_max_q = if self.held_out.is_empty() {
            None
        } else {
            let mut total = 0.0;
            for s in &self.held_out {
                total += self.agent.q_values(s)?.into_iter().fold(f64::NEG_INFINITY, f64::max);
            }
            Some(total / self.held_out.len() as f64)
        };
        let m = EpisodeMetrics {
            episode: self.episode,
            mean_reward: r_sum / steps,
            mean_q: q_sum / steps,
            epsilon: eps,
            loss: (n_updates > 0).then(|| l_sum / n_updates as f64),
            held_out_max_q,
        };
        self.episode += 1;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testing::{max_rel_error, numeric_grad};
    use crate::RunRng;
    use rand::SeedableRng;

    fn small_cfg() -> AgentConfig {
        AgentConfig { conv_filters: vec![2, 3], dense_units: 6, batch_size: 4, ..Default::default() }
    }

    fn obs(shape: [usize; 3], rng: &mut RunRng) -> Observation {
        let mut o = Observation::zeros(shape);
        o.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        o
    }

    /// Toy environment with a fixed observation; the state carries the
    /// adjustment of the last action.
    struct OneState {
        obs: Observation,
        dict: Vec<CrAdjustment>,
        last: usize,
    }

    impl AgentEnv for OneState {
        fn current_state(&mut self) -> Result<AgentState> {
            Ok(AgentState { obs: self.obs.clone(), prev_adj: self.dict[self.last].clone() })
        }

        fn step(&mut self, action: usize) -> Result<AgentState> {
            self.last = action;
            self.current_state()
        }
    }

    #[test]
    fn epsilon_schedule_is_linear_then_flat() {
        let cfg = AgentConfig { n_episodes: 10, steps_per_episode: 10, ..Default::default() };
        assert_eq!(cfg.epsilon_at(0), 1.0);
        assert!((cfg.epsilon_at(25) - 0.525).abs() < 1e-12);
        assert!((cfg.epsilon_at(50) - 0.05).abs() < 1e-12);
        assert!((cfg.epsilon_at(99) - 0.05).abs() < 1e-12);
        assert_eq!(cfg.total_steps(), 100);
    }

    #[test]
    fn target_examples() {
        assert_eq!(q_target(0.3, &[5.0, 9.0], 0.0), 0.3);
        assert!((q_target(0.5, &[0.2, 1.0], 0.99) - 1.49).abs() < 1e-12);
        assert_eq!(q_target(0.0, &[0.0, 0.0], 0.99), 0.0);
    }

    #[test]
    fn selection_rules() {
        let mut rng = RunRng::seed_from_u64(1);
        assert_eq!(select_action(&[1.0, 3.0, 3.0, 0.0], 0.0, &mut rng), 1);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            counts[select_action(&[0.0; 4], 1.0, &mut rng)] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 0.25).abs() <= 0.02, "{counts:?}");
        }
    }

    #[test]
    fn replay_is_fifo_bounded() {
        let mut rng = RunRng::seed_from_u64(2);
        let s = Arc::new(AgentState { obs: obs([2, 2, 1], &mut rng), prev_adj: CrAdjustment::identity(1) });
        let mut buf = ReplayBuffer::new(3);
        for a in 0..5 {
            buf.push(Transition { state: s.clone(), action: a, reward: 0.0, next_state: s.clone() });
            assert!(buf.len() <= 3);
        }
        let kept: Vec<usize> = buf.iter().map(|t| t.action).collect();
        assert_eq!(kept, vec![2, 3, 4]);
        assert!(matches!(buf.sample(4, &mut rng), Err(Error::NotReady { have: 3, need: 4 })));
    }

    #[test]
    fn q_values_shape_and_determinism() {
        let mut rng = RunRng::seed_from_u64(3);
        let agent = Agent::new(&small_cfg(), [8, 8, 3], 5, 32, 4.0, &mut rng).unwrap();
        let s = AgentState { obs: obs([8, 8, 3], &mut rng), prev_adj: CrAdjustment::identity(5) };
        let q = agent.q_values(&s).unwrap();
        assert_eq!(q.len(), 32);
        assert_eq!(q, agent.q_values(&s).unwrap());
        let bad = AgentState { obs: obs([8, 7, 3], &mut rng), prev_adj: CrAdjustment::identity(5) };
        assert!(matches!(agent.q_values(&bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn q_network_gradient_matches_finite_differences() {
        let mut rng = RunRng::seed_from_u64(4);
        let agent = Agent::new(&small_cfg(), [6, 6, 2], 2, 4, 4.0, &mut rng).unwrap();
        let states: Vec<AgentState> = (0..3)
            .map(|i| AgentState { obs: obs([6, 6, 2], &mut rng), prev_adj: CrAdjustment(vec![1.0, if i % 2 == 0 { 4.0 } else { 1.0 }]) })
            .collect();
        let refs: Vec<&AgentState> = states.iter().collect();
        let (x, adj) = agent.batch(&refs).unwrap();
        let coeff: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, cache) = agent.net.forward(&agent.params, x.clone(), &adj);
        let mut grads = vec![0.0; agent.params.len()];
        agent.net.backward(&agent.params, &cache, &coeff, &mut grads);
        let num = numeric_grad(&agent.params, 1e-4, |p| {
            agent.net.forward(p, x.clone(), &adj).0.iter().zip(&coeff).map(|(a, b)| a * b).sum()
        });
        let err = max_rel_error(&grads, &num, 1e-7);
        assert!(err <= 1e-3, "max relative error {err}");
    }

    #[test]
    fn fixed_point_leaves_parameters_nearly_unchanged() {
        let mut rng = RunRng::seed_from_u64(5);
        let cfg = AgentConfig { gamma: 0.0, ..small_cfg() };
        let mut agent = Agent::new(&cfg, [4, 4, 1], 1, 2, 4.0, &mut rng).unwrap();
        let s = Arc::new(AgentState { obs: obs([4, 4, 1], &mut rng), prev_adj: CrAdjustment::identity(1) });
        let q = agent.q_values(&s).unwrap();
        let t = Transition { state: s.clone(), action: 1, reward: q[1], next_state: s };
        let before = agent.params.clone();
        let loss = agent.train_on(&[t]).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(agent.params, before);
    }

    #[test]
    fn repeated_transition_converges_to_frozen_target() {
        let mut rng = RunRng::seed_from_u64(6);
        let cfg = AgentConfig { gamma: 0.99, target_sync_interval: usize::MAX, learning_rate: 1e-2, ..small_cfg() };
        let mut agent = Agent::new(&cfg, [4, 4, 1], 1, 4, 4.0, &mut rng).unwrap();
        let s = Arc::new(AgentState { obs: obs([4, 4, 1], &mut rng), prev_adj: CrAdjustment::identity(1) });
        let t = Transition { state: s.clone(), action: 2, reward: 0.5, next_state: s.clone() };
        let boot = agent.q_batch(agent.target.as_ref().unwrap(), &[&s]).unwrap();
        let y = q_target(0.5, &boot, 0.99);
        for _ in 0..200 {
            agent.train_on(&[t.clone()]).unwrap();
        }
        let q = agent.q_values(&s).unwrap()[2];
        assert!((q - y).abs() <= 1e-2, "{q} vs {y}");
    }

    #[test]
    fn myopic_q_tracks_mean_reward() {
        let mut rng = RunRng::seed_from_u64(7);
        let cfg = AgentConfig { gamma: 0.0, batch_size: 16, learning_rate: 3e-3, ..small_cfg() };
        let mut agent = Agent::new(&cfg, [4, 4, 1], 1, 2, 4.0, &mut rng).unwrap();
        let s = Arc::new(AgentState { obs: obs([4, 4, 1], &mut rng), prev_adj: CrAdjustment::identity(1) });
        for i in 0..200 {
            let action = i % 2;
            let reward = if action == 0 { [0.2, 0.4][i / 2 % 2] } else { 0.9 };
            agent.replay.push(Transition { state: s.clone(), action, reward, next_state: s.clone() });
        }
        for _ in 0..600 {
            agent.train_step(&mut rng).unwrap();
        }
        let q = agent.q_values(&s).unwrap();
        assert!((q[0] - 0.3).abs() < 0.05 && (q[1] - 0.9).abs() < 0.05, "{q:?}");
    }

    #[test]
    fn toy_environment_learns_rewarded_action() {
        let mut rng = RunRng::seed_from_u64(8);
        let dict: Vec<CrAdjustment> = [[1.0, 1.0], [1.0, 4.0], [4.0, 1.0], [4.0, 4.0]].iter().map(|a| CrAdjustment(a.to_vec())).collect();
        let target = dict[2].clone();
        let cfg = AgentConfig { n_episodes: 30, steps_per_episode: 20, train_frequency: 1, batch_size: 16, gamma: 0.5, learning_rate: 3e-3, ..small_cfg() };
        let agent = Agent::new(&cfg, [4, 4, 1], 2, 4, 4.0, &mut rng).unwrap();
        let mut trainer = AgentTrainer::new(agent);
        let mut env = OneState { obs: obs([4, 4, 1], &mut rng), dict, last: 0 };
        let reward = |s: &AgentState| Ok(if s.prev_adj == target { 1.0 } else { 0.0 });
        let metrics = trainer.run_episodes(&mut env, &reward, 30, &mut rng).unwrap();
        assert_eq!(metrics.len(), 30);
        assert_eq!(trainer.global_step, 600);
        let slope = crate::stats::ls_slope(&metrics.iter().map(|m| m.mean_reward).collect::<Vec<_>>());
        assert!(slope > 0.0);
        let mut hits = 0;
        for _ in 0..50 {
            let s = env.current_state().unwrap();
            let a = trainer.agent.greedy_action(&s).unwrap();
            hits += usize::from(a == 2);
            env.step(a).unwrap();
        }
        assert!(hits >= 48, "{hits}");
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut rng = RunRng::seed_from_u64(9);
            let dict: Vec<CrAdjustment> = (0..2).map(|i| CrAdjustment(vec![1.0 + 3.0 * i as f64])).collect();
            let cfg = AgentConfig { n_episodes: 3, steps_per_episode: 10, train_frequency: 2, batch_size: 4, no_op_steps: 5, ..small_cfg() };
            let agent = Agent::new(&cfg, [4, 4, 1], 1, 2, 4.0, &mut rng).unwrap();
            let mut trainer = AgentTrainer::new(agent);
            let mut env = OneState { obs: obs([4, 4, 1], &mut rng), dict, last: 0 };
            let reward = |s: &AgentState| Ok(s.prev_adj.0[0] / 4.0);
            trainer.run_episodes(&mut env, &reward, 3, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }

    proptest::proptest! {
        #[test]
        fn greedy_choice_ignores_constant_shift(q in proptest::collection::vec(-10.0f64..10.0, 1..12), c in -100.0f64..100.0) {
            let shifted: Vec<f64> = q.iter().map(|v| v + c).collect();
            let mut rng = RunRng::seed_from_u64(0);
            let a = select_action(&q, 0.0, &mut rng);
            let b = select_action(&shifted, 0.0, &mut rng);
            let best = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            proptest::prop_assert_eq!(q[a], best);
            proptest::prop_assert!((q[b] - best).abs() < 1e-9);
        }
    }
}
