//! The personalized fitting protocol as a resumable state machine: a random
//! rollout and the initial comparisons, reward training, alternating agent
//! training and query rounds with fine-tuning, and a final blinded A/B test
//! against the reference fitting.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::action::CrAdjustment;
use crate::agent::{Agent, AgentConfig, AgentEnv, AgentState, AgentTrainer, EpisodeMetrics, RewardSource};
use crate::audio::AudioClip;
use crate::env::{Environment, EnvSnapshot, Source};
use crate::reward::{Choice, LossHistory, Origin, PreferenceDataset, PreferenceTriplet, RewardNetConfig, RewardPredictor};
use crate::sim_user::SimUserProfile;
use crate::{stats, Error, Result, RunRng};

const HELD_OUT_STATES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    /// Random-policy steps that fill the segment queue before the first queries.
    pub warmup_steps: usize,
    pub n_initial_pairs: usize,
    /// Agent episodes between query rounds; `None` keeps the reward fixed.
    pub query_interval: Option<usize>,
    pub queries_per_round: usize,
    pub finetune_batches: usize,
    pub eval_pairs: usize,
    /// Greedy steps whose most frequent action becomes the personalized setting.
    pub probe_steps: usize,
    pub val_fraction: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 256,
            n_initial_pairs: 200,
            query_interval: Some(30),
            queries_per_round: 30,
            finetune_batches: 20,
            eval_pairs: 60,
            probe_steps: 20,
            val_fraction: 0.2,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps < 2 || self.n_initial_pairs == 0 || self.probe_steps == 0 {
            return Err(Error::InvalidParams("warmup_steps >= 2, n_initial_pairs and probe_steps must be positive".into()));
        }
        if self.query_interval == Some(0) || self.queries_per_round == 0 {
            return Err(Error::InvalidParams("query_interval and queries_per_round must be positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidParams("val_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Round(usize),
    Evaluation,
}

/// One comparison put to the listener. The adjustments are for simulated
/// listeners and bookkeeping; a human interface must not reveal them.
#[derive(Debug, Clone)]
pub struct Query {
    pub id: u64,
    pub phase: Phase,
    pub source: Source,
    pub clip_a: AudioClip,
    pub clip_b: AudioClip,
    pub adj_a: CrAdjustment,
    pub adj_b: CrAdjustment,
}

/// Anyone who answers comparisons. Returning fewer choices than queries
/// signals an aborted round; an error means the listener is unavailable.
pub trait Listener {
    fn label(&mut self, phase: Phase, queries: &[Query]) -> Result<Vec<Choice>>;

    fn origin(&self) -> Origin {
        Origin::Human
    }
}

/// Simulated listener whose randomness for query `id` depends only on
/// `(seed, id)`, so answers are reproducible and independent of history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimListener {
    pub profile: SimUserProfile,
    pub seed: u64,
}

impl SimListener {
    pub fn new(profile: SimUserProfile, seed: u64) -> Result<Self> {
        profile.validate()?;
        Ok(Self { profile, seed })
    }
}

impl Listener for SimListener {
    fn label(&mut self, _phase: Phase, queries: &[Query]) -> Result<Vec<Choice>> {
        queries
            .iter()
            .map(|q| {
                let mut rng = RunRng::seed_from_u64(self.seed);
                rng.set_stream(q.id);
                Ok(self.profile.answer(&q.adj_a, &q.adj_b, &mut rng)?.choice)
            })
            .collect()
    }

    fn origin(&self) -> Origin {
        Origin::Simulated
    }
}

impl RewardSource for RewardPredictor {
    fn reward(&self, state: &AgentState) -> Result<f64> {
        RewardPredictor::reward(self, &state.obs)
    }
}

/// Outcome of the blinded comparison against the reference fitting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalTally {
    pub personalized: usize,
    pub reference: usize,
    pub equal: usize,
    pub neither: usize,
    pub n_pairs: usize,
    /// False when the listener stopped before answering every pair.
    pub complete: bool,
}

impl EvalTally {
    pub fn answered(&self) -> usize {
        self.personalized + self.reference + self.equal + self.neither
    }

    /// Shares of (personalized, reference, equal, neither) in percent of the
    /// answered pairs.
    pub fn percentages(&self) -> [f64; 4] {
        let n = self.answered().max(1) as f64;
        [self.personalized, self.reference, self.equal, self.neither].map(|c| 100.0 * c as f64 / n)
    }

    /// Fraction of decisive answers that favour the personalized setting.
    pub fn personalized_share(&self) -> Option<f64> {
        let decisive = self.personalized + self.reference;
        (decisive > 0).then(|| self.personalized as f64 / decisive as f64)
    }
}

/// Which side each evaluation pair put the personalized rendering on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
}

/// Presents `n_pairs` fresh noisy sentences rendered with both full-band
/// adjustments, with the personalized side drawn at random per pair.
pub fn evaluate_ab<L: Listener + ?Sized, R: Rng + ?Sized>(
    env: &mut Environment,
    personalized: &CrAdjustment,
    reference: &CrAdjustment,
    n_pairs: usize,
    first_id: u64,
    listener: &mut L,
    rng: &mut R,
) -> Result<(EvalTally, Vec<Query>, Vec<Side>, Vec<Choice>)> {
    let mut queries = Vec::with_capacity(n_pairs);
    let mut sides = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let source = env.draw_source();
        let noisy = env.noisy_clip(&source)?;
        let p = env.compress(&noisy, personalized)?;
        let r = env.compress(&noisy, reference)?;
        let side = if rng.gen::<bool>() { Side::A } else { Side::B };
        let (clip_a, clip_b, adj_a, adj_b) = match side {
            Side::A => (p, r, personalized.clone(), reference.clone()),
            Side::B => (r, p, reference.clone(), personalized.clone()),
        };
        queries.push(Query { id: first_id + i as u64, phase: Phase::Evaluation, source, clip_a, clip_b, adj_a, adj_b });
        sides.push(side);
    }
    let choices = listener.label(Phase::Evaluation, &queries)?;
    let mut tally = EvalTally { n_pairs, complete: choices.len() >= n_pairs, ..Default::default() };
    for (c, side) in choices.iter().zip(&sides) {
        match (c, side) {
            (Choice::A, Side::A) | (Choice::B, Side::B) => tally.personalized += 1,
            (Choice::A, Side::B) | (Choice::B, Side::A) => tally.reference += 1,
            (Choice::Equal, _) => tally.equal += 1,
            (Choice::Neither, _) => tally.neither += 1,
        }
    }
    Ok((tally, queries, sides, choices))
}

/// Counters at the moment a sink method is called.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub env_step: usize,
    pub agent_step: usize,
    pub agent_updates: u64,
}

/// Receives protocol progress; every method defaults to doing nothing.
pub trait ProtocolSink {
    fn labels(&mut self, _at: &Progress, _phase: Phase, _queries: &[Query], _choices: &[Choice]) -> Result<()> {
        Ok(())
    }
    fn reward_trained(&mut self, _at: &Progress, _history: &LossHistory) -> Result<()> {
        Ok(())
    }
    fn finetuned(&mut self, _at: &Progress, _round: usize, _losses: &[f64]) -> Result<()> {
        Ok(())
    }
    fn episodes(&mut self, _at: &Progress, _metrics: &[EpisodeMetrics]) -> Result<()> {
        Ok(())
    }
    fn evaluated(&mut self, _at: &Progress, _tally: &EvalTally, _personalized: &CrAdjustment, _sides: &[Side]) -> Result<()> {
        Ok(())
    }
}

impl ProtocolSink for () {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Warmup,
    TrainReward,
    Agent(usize),
    Query(usize),
    Evaluate,
    Done,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Warmup => "warmup",
            Stage::TrainReward => "train_reward",
            Stage::Agent(_) => "agent",
            Stage::Query(_) => "query",
            Stage::Evaluate => "evaluate",
            Stage::Done => "done",
        }
    }
}

/// Independent random streams so that, e.g., listener noise never shifts
/// which clips the environment draws.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolRngs {
    pub policy: RunRng,
    pub reward: RunRng,
    pub eval: RunRng,
}

impl ProtocolRngs {
    pub fn new(seed: u64) -> Self {
        let stream = |k| {
            let mut r = RunRng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self { policy: stream(1), reward: stream(2), eval: stream(3) }
    }
}

/// Everything needed to continue a run after a restart.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolState {
    pub stage: Stage,
    pub dataset: PreferenceDataset,
    pub predictor: RewardPredictor,
    pub trainer: AgentTrainer,
    pub rngs: ProtocolRngs,
    pub env: Option<EnvSnapshot>,
    pub next_query_id: u64,
    /// Comparisons answered NEITHER, which never enter the dataset.
    pub excluded: usize,
    pub personalized_action: Option<usize>,
    pub tally: Option<EvalTally>,
    pub reward_val_losses: Vec<f64>,
}

pub struct Protocol {
    pub cfg: ProtocolConfig,
    pub env: Environment,
    pub state: ProtocolState,
}

impl Protocol {
    pub fn new(
        cfg: ProtocolConfig,
        env: Environment,
        agent_cfg: &AgentConfig,
        reward_cfg: &RewardNetConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut init_rng = RunRng::seed_from_u64(seed);
        init_rng.set_stream(4);
        let shape = env.observation_shape();
        let space = env.action_space();
        let max_scale = space.scales().iter().copied().fold(0.0, f64::max);
        let agent = Agent::new(agent_cfg, shape, space.n_bands(), space.len(), max_scale, &mut init_rng)?;
        let predictor = RewardPredictor::new(reward_cfg, shape, &mut init_rng)?;
        let state = ProtocolState {
            stage: Stage::Warmup,
            dataset: PreferenceDataset::new(cfg.val_fraction),
            predictor,
            trainer: AgentTrainer::new(agent),
            rngs: ProtocolRngs::new(seed),
            env: None,
            next_query_id: 0,
            excluded: 0,
            personalized_action: None,
            tally: None,
            reward_val_losses: Vec::new(),
        };
        Ok(Self { cfg, env, state })
    }

    /// Continues from a saved state on an environment built from the same
    /// configuration.
    pub fn resume(cfg: ProtocolConfig, mut env: Environment, state: ProtocolState) -> Result<Self> {
        cfg.validate()?;
        if let Some(s) = &state.env {
            env.restore(s.clone());
        }
        Ok(Self { cfg, env, state })
    }

    /// State with the current environment snapshot, ready to be persisted.
    pub fn checkpoint(&mut self) -> &ProtocolState {
        self.state.env = Some(self.env.snapshot());
        &self.state
    }

    pub fn progress(&self) -> Progress {
        Progress {
            env_step: self.env.state().step,
            agent_step: self.state.trainer.global_step,
            agent_updates: self.state.trainer.agent.updates,
        }
    }

    pub fn is_done(&self) -> bool {
        self.state.stage == Stage::Done
    }

    fn n_rounds(&self) -> usize {
        let total = self.state.trainer.agent.cfg.n_episodes;
        match self.cfg.query_interval {
            Some(m) => total.div_ceil(m),
            None => 1,
        }
    }

    /// Runs every remaining stage.
    pub fn run<L: Listener + ?Sized, S: ProtocolSink + ?Sized>(&mut self, listener: &mut L, sink: &mut S) -> Result<()> {
        while !self.is_done() {
            self.advance(listener, sink)?;
        }
        Ok(())
    }

    /// Executes the current stage and moves to the next one. On error the
    /// stage is left unchanged.
    pub fn advance<L: Listener + ?Sized, S: ProtocolSink + ?Sized>(&mut self, listener: &mut L, sink: &mut S) -> Result<Stage> {
        let stage = self.state.stage;
        let step = self.env.state().step;
        let next = self.run_stage(stage, listener, sink).map_err(|e| match e {
            e @ Error::Protocol { .. } => e,
            e => e.in_stage(stage.name(), step),
        })?;
        self.state.stage = next;
        Ok(next)
    }

    fn run_stage<L: Listener + ?Sized, S: ProtocolSink + ?Sized>(&mut self, stage: Stage, listener: &mut L, sink: &mut S) -> Result<Stage> {
        match stage {
            Stage::Warmup => {
                self.env.reset()?;
                let n_actions = self.env.action_space().len();
                let stride = (self.cfg.warmup_steps / HELD_OUT_STATES).max(1);
                let mut held_out = Vec::new();
                for i in 0..self.cfg.warmup_steps {
                    let a = self.state.rngs.policy.gen_range(0..n_actions);
                    let s = self.env.step(a)?;
                    if i % stride == stride - 1 && held_out.len() < HELD_OUT_STATES {
                        held_out.push(s);
                    }
                }
                self.state.trainer.held_out = held_out;
                self.query(Phase::Warmup, self.cfg.n_initial_pairs, listener, sink)?;
                Ok(Stage::TrainReward)
            }
            Stage::TrainReward => {
                let hist = self.state.predictor.fit(&self.state.dataset, &mut self.state.rngs.reward)?;
                self.state.reward_val_losses.push(hist.best_val_loss);
                sink.reward_trained(&self.progress(), &hist)?;
                Ok(Stage::Agent(0))
            }
            Stage::Agent(round) => {
                let chunk = self.cfg.query_interval.unwrap_or(usize::MAX).min(self.state.trainer.episodes_remaining());
                let metrics = self.state.trainer.run_episodes(&mut self.env, &self.state.predictor, chunk, &mut self.state.rngs.policy)?;
                sink.episodes(&self.progress(), &metrics)?;
                Ok(if self.cfg.query_interval.is_some() { Stage::Query(round) } else { Stage::Evaluate })
            }
            Stage::Query(round) => {
                let before = self.state.dataset.len();
                let fresh = self.query(Phase::Round(round), self.cfg.queries_per_round, listener, sink)?;
                let losses = if fresh.is_empty() {
                    Vec::new()
                } else {
                    let old = PreferenceDataset {
                        triplets: self.state.dataset.triplets[..before].to_vec(),
                        val_fraction: self.state.dataset.val_fraction,
                    };
                    self.state.predictor.finetune(&old, &fresh, self.cfg.finetune_batches, &mut self.state.rngs.reward)?
                };
                sink.finetuned(&self.progress(), round, &losses)?;
                Ok(if round + 1 < self.n_rounds() && self.state.trainer.episodes_remaining() > 0 {
                    Stage::Agent(round + 1)
                } else {
                    Stage::Evaluate
                })
            }
            Stage::Evaluate => {
                let action = self.personalized_action()?;
                let personalized = self.env.full_adjustment(action)?;
                let reference = CrAdjustment::identity(personalized.len());
                let first = self.state.next_query_id;
                let (tally, queries, sides, choices) =
                    evaluate_ab(&mut self.env, &personalized, &reference, self.cfg.eval_pairs, first, listener, &mut self.state.rngs.eval)?;
                self.state.next_query_id += queries.len() as u64;
                sink.labels(&self.progress(), Phase::Evaluation, &queries, &choices)?;
                sink.evaluated(&self.progress(), &tally, &personalized, &sides)?;
                self.state.personalized_action = Some(action);
                self.state.tally = Some(tally);
                Ok(Stage::Done)
            }
            Stage::Done => Ok(Stage::Done),
        }
    }

    /// Draws `n` pairs from the segment queue, collects labels and appends the
    /// non-NEITHER answers to the dataset. Returns the new triplets.
    fn query<L: Listener + ?Sized, S: ProtocolSink + ?Sized>(
        &mut self,
        phase: Phase,
        n: usize,
        listener: &mut L,
        sink: &mut S,
    ) -> Result<Vec<PreferenceTriplet>> {
        let mut queries = Vec::with_capacity(n);
        for i in 0..n {
            let p = self.env.sample_query_pair()?;
            queries.push(Query {
                id: self.state.next_query_id + i as u64,
                phase,
                source: p.source,
                clip_a: p.clip_a,
                clip_b: p.clip_b,
                adj_a: p.adj_a,
                adj_b: p.adj_b,
            });
        }
        let choices = listener.label(phase, &queries)?;
        self.state.next_query_id += n as u64;
        sink.labels(&self.progress(), phase, &queries, &choices)?;
        let origin = listener.origin();
        let mut fresh = Vec::new();
        for (q, c) in queries.iter().zip(&choices) {
            match c.preference() {
                Some(label) => {
                    let obs_a = self.env.observe(&q.clip_a)?;
                    let obs_b = self.env.observe(&q.clip_b)?;
                    fresh.push(PreferenceTriplet::new(obs_a, obs_b, label, origin)?);
                }
                None => self.state.excluded += 1,
            }
        }
        for t in &fresh {
            self.state.dataset.push(t.clone())?;
        }
        Ok(fresh)
    }

    /// Most frequent greedy action over a short greedy rollout.
    pub fn personalized_action(&mut self) -> Result<usize> {
        let agent = &self.state.trainer.agent;
        let mut actions = Vec::with_capacity(self.cfg.probe_steps);
        let mut s = self.env.current_state()?;
        for _ in 0..self.cfg.probe_steps {
            let a = agent.greedy_action(&s)?;
            actions.push(a);
            s = self.env.step(a)?;
        }
        stats::mode(actions, self.env.action_space().len()).ok_or(Error::QueueExhausted)
    }
}
