//! The listening environment: each step draws a noisy sentence, compresses it
//! with the reference prescription scaled by the chosen action, and returns
//! the resulting observation. Every rendered segment is remembered in a
//! bounded queue from which preference queries are drawn.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::action::{ActionSpace, BandControl, CrAdjustment, Prescription};
use crate::agent::{AgentEnv, AgentState};
use crate::audio::{self, AudioClip};
use crate::drc::{self, CompressionParams, DEFAULT_CALIBRATION_DB};
use crate::features::{FeatureConfig, LogMel, Observation};
use crate::{Error, Result, RunRng};

/// Clean sentences and background noise recordings at one sample rate.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub speech: Vec<AudioClip>,
    pub noise: Vec<AudioClip>,
}

impl Corpus {
    pub fn new(speech: Vec<AudioClip>, noise: Vec<AudioClip>) -> Result<Self> {
        if speech.is_empty() {
            return Err(Error::NoAudioFound);
        }
        let rate = speech[0].sample_rate_hz();
        if let Some(c) = speech.iter().chain(&noise).find(|c| c.sample_rate_hz() != rate) {
            return Err(Error::InvalidClip(format!("{} is at {} Hz, corpus at {} Hz", c.id, c.sample_rate_hz(), rate)));
        }
        Ok(Self { speech, noise })
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.speech[0].sample_rate_hz()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub snr_db: f64,
    pub queue_capacity: usize,
    pub calibration_db: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { snr_db: 0.0, queue_capacity: 256, calibration_db: DEFAULT_CALIBRATION_DB }
    }
}

/// Which sentence, which noise and where in the noise: enough to re-create
/// the exact noisy clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Source {
    pub speech: usize,
    /// `None` renders the clean sentence.
    pub noise: Option<usize>,
    pub noise_offset: usize,
}

/// One entry of the segment queue: the unprocessed clip and the full-band
/// adjustment and compression ratios applied to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub clip_id: String,
    pub source: Source,
    pub adjustment: CrAdjustment,
    pub ratios: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentQueue {
    capacity: usize,
    records: VecDeque<SegmentRecord>,
}

impl SegmentQueue {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, records: VecDeque::new() }
    }

    pub fn push(&mut self, r: SegmentRecord) {
        if self.capacity == 0 {
            return;
        }
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(r);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn clear(&mut self) {
        self.records.clear();
    }

    pub fn iter(&self) -> impl Iterator<Item = &SegmentRecord> {
        self.records.iter()
    }

    /// Two records with different compression ratios, the first uniform
    /// over the queue and the second uniform over records that differ from it.
    pub fn sample_distinct<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(&SegmentRecord, &SegmentRecord)> {
        let first = self.records.front().ok_or(Error::QueueExhausted)?;
        if self.records.iter().all(|r| r.ratios == first.ratios) {
            return Err(Error::QueueExhausted);
        }
        let a = &self.records[rng.gen_range(0..self.records.len())];
        let others: Vec<&SegmentRecord> = self.records.iter().filter(|r| r.ratios != a.ratios).collect();
        Ok((a, others[rng.gen_range(0..others.len())]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub clip_id: String,
    /// Adjustment on the controlled bands, as chosen by the agent.
    pub adjustment: CrAdjustment,
    pub params: CompressionParams,
    pub step: usize,
}

/// Two renderings of one noisy clip under different compression settings.
#[derive(Debug, Clone)]
pub struct QueryPair {
    pub source: Source,
    pub noisy: AudioClip,
    pub clip_a: AudioClip,
    pub clip_b: AudioClip,
    /// Full-band adjustments.
    pub adj_a: CrAdjustment,
    pub adj_b: CrAdjustment,
}

/// Everything that changes while the environment runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvSnapshot {
    pub rng: RunRng,
    pub state: EnvState,
    pub queue: SegmentQueue,
    pub current: Option<AgentState>,
}

pub struct Environment {
    cfg: EnvConfig,
    corpus: Arc<Corpus>,
    prescription: Prescription,
    space: ActionSpace,
    control: BandControl,
    logmel: LogMel,
    rng: RunRng,
    state: EnvState,
    queue: SegmentQueue,
    current: Option<AgentState>,
}

impl Environment {
    pub fn new(
        cfg: EnvConfig,
        corpus: Arc<Corpus>,
        prescription: Prescription,
        space: ActionSpace,
        control: BandControl,
        features: &FeatureConfig,
        seed: u64,
    ) -> Result<Self> {
        prescription.validate()?;
        control.validate()?;
        if control.n_total_bands != prescription.n_bands() {
            return Err(Error::Dimension { expected: prescription.n_bands(), actual: control.n_total_bands, what: "band control" });
        }
        if space.n_bands() != control.controlled.len() {
            return Err(Error::Dimension { expected: control.controlled.len(), actual: space.n_bands(), what: "action space bands" });
        }
        prescription.bands.validate_for_rate(corpus.sample_rate_hz())?;
        let logmel = LogMel::new(features, corpus.sample_rate_hz())?;
        let identity = CrAdjustment::identity(space.n_bands());
        let state = EnvState {
            clip_id: String::new(),
            params: prescription.params_for(&control.expand(&identity)?)?,
            adjustment: identity,
            step: 0,
        };
        Ok(Self {
            queue: SegmentQueue::new(cfg.queue_capacity),
            cfg,
            corpus,
            prescription,
            space,
            control,
            logmel,
            rng: RunRng::seed_from_u64(seed),
            state,
            current: None,
        })
    }

    pub fn corpus(&self) -> &Arc<Corpus> {
        &self.corpus
    }

    pub fn prescription(&self) -> &Prescription {
        &self.prescription
    }

    pub fn action_space(&self) -> &ActionSpace {
        &self.space
    }

    pub fn band_control(&self) -> &BandControl {
        &self.control
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn queue(&self) -> &SegmentQueue {
        &self.queue
    }

    pub fn observation_shape(&self) -> [usize; 3] {
        self.logmel.config().shape()
    }

    pub fn snapshot(&self) -> EnvSnapshot {
        EnvSnapshot { rng: self.rng.clone(), state: self.state.clone(), queue: self.queue.clone(), current: self.current.clone() }
    }

    pub fn restore(&mut self, s: EnvSnapshot) {
        self.rng = s.rng;
        self.state = s.state;
        self.queue = s.queue;
        self.current = s.current;
    }

    /// Full-band adjustment of an action.
    pub fn full_adjustment(&self, action: usize) -> Result<CrAdjustment> {
        self.control.expand(&self.space.adjustment(action)?)
    }

    /// Compression settings for a full-band adjustment.
    pub fn params_for(&self, full_adj: &CrAdjustment) -> Result<CompressionParams> {
        self.prescription.params_for(full_adj)
    }

    /// Draws a sentence, a noise recording and a noise offset.
    pub fn draw_source(&mut self) -> Source {
        let speech = self.rng.gen_range(0..self.corpus.speech.len());
        let (noise, noise_offset) = if self.corpus.noise.is_empty() {
            (None, 0)
        } else {
            let n = self.rng.gen_range(0..self.corpus.noise.len());
            (Some(n), audio::random_noise_offset(self.corpus.noise[n].len(), &mut self.rng))
        };
        Source { speech, noise, noise_offset }
    }

    /// The uncompressed noisy clip of a source.
    pub fn noisy_clip(&self, src: &Source) -> Result<AudioClip> {
        let speech = self.corpus.speech.get(src.speech).ok_or_else(|| Error::InvalidClip(format!("speech index {}", src.speech)))?;
        match src.noise {
            None => Ok(speech.clone()),
            Some(n) => {
                let noise = self.corpus.noise.get(n).ok_or_else(|| Error::InvalidClip(format!("noise index {n}")))?;
                audio::mix_at_snr(speech, noise, self.cfg.snr_db, src.noise_offset)
            }
        }
    }

    pub fn compress(&self, noisy: &AudioClip, full_adj: &CrAdjustment) -> Result<AudioClip> {
        let params = self.params_for(full_adj)?;
        drc::compress(noisy, &self.prescription.bands, &params, self.cfg.calibration_db)
    }

    pub fn observe(&self, clip: &AudioClip) -> Result<Observation> {
        self.logmel.observation(clip)
    }

    /// Back to the reference fitting with a fresh clip and an empty queue.
    pub fn reset(&mut self) -> Result<AgentState> {
        self.queue.clear();
        let identity = CrAdjustment::identity(self.space.n_bands());
        let full = self.control.expand(&identity)?;
        let src = self.draw_source();
        let noisy = self.noisy_clip(&src)?;
        let compressed = self.compress(&noisy, &full)?;
        let mut obs = self.observe(&compressed)?;
        obs.cr_adj_context = Some(identity.clone());
        self.state = EnvState { clip_id: noisy.id.clone(), params: self.params_for(&full)?, adjustment: identity.clone(), step: 0 };
        let s = AgentState { obs, prev_adj: identity };
        self.current = Some(s.clone());
        Ok(s)
    }

    /// Applies an action to a freshly drawn clip and returns the next state
    /// together with the compressed audio.
    pub fn step_with_audio(&mut self, action: usize) -> Result<(AgentState, AudioClip)> {
        let step = self.state.step;
        let inner = |env: &mut Self| -> Result<(AgentState, AudioClip)> {
            let adj = env.space.adjustment(action)?;
            let full = env.control.expand(&adj)?;
            let params = env.params_for(&full)?;
            let src = env.draw_source();
            let noisy = env.noisy_clip(&src)?;
            let compressed = drc::compress(&noisy, &env.prescription.bands, &params, env.cfg.calibration_db)?;
            let mut obs = env.observe(&compressed)?;
            obs.cr_adj_context = Some(adj.clone());
            env.queue.push(SegmentRecord { clip_id: noisy.id.clone(), source: src, adjustment: full, ratios: params.ratios.clone() });
            env.state = EnvState { clip_id: noisy.id, adjustment: adj.clone(), params, step: step + 1 };
            let s = AgentState { obs, prev_adj: adj };
            env.current = Some(s.clone());
            Ok((s, compressed))
        };
        inner(self).map_err(|e| e.in_stage("environment step", step))
    }

    /// Two queued compression settings rendered on the noisy clip of the
    /// first record.
    pub fn sample_query_pair(&mut self) -> Result<QueryPair> {
        let (a, b) = {
            let (a, b) = self.queue.sample_distinct(&mut self.rng)?;
            (a.clone(), b.clone())
        };
        let noisy = self.noisy_clip(&a.source)?;
        let clip_a = self.compress(&noisy, &a.adjustment)?;
        let clip_b = self.compress(&noisy, &b.adjustment)?;
        Ok(QueryPair { source: a.source, noisy, clip_a, clip_b, adj_a: a.adjustment, adj_b: b.adjustment })
    }

    /// Random generator shared by the environment's own draws.
    pub fn rng_mut(&mut self) -> &mut RunRng {
        &mut self.rng
    }
}

impl AgentEnv for Environment {
    fn current_state(&mut self) -> Result<AgentState> {
        match &self.current {
            Some(s) => Ok(s.clone()),
            None => self.reset(),
        }
    }

    fn step(&mut self, action: usize) -> Result<AgentState> {
        self.step_with_audio(action).map(|(s, _)| s)
    }
}
