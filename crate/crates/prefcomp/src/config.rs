//! Run configuration: every knob of a fitting run in one JSON document.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use prefcomp_core::action::{build_action_space, BandControl, Prescription};
use prefcomp_core::agent::AgentConfig;
use prefcomp_core::env::{Corpus, EnvConfig, Environment};
use prefcomp_core::features::FeatureConfig;
use prefcomp_core::fixtures::{synthetic_corpus, SyntheticCorpusConfig, REFERENCE_SUBJECTS};
use prefcomp_core::protocol::ProtocolConfig;
use prefcomp_core::reward::RewardNetConfig;
use prefcomp_core::sim_user::{builtin_profile, SimUserProfile};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::load_corpus;
use crate::error::{Error, IoContext, Result};
use crate::feature_cache::hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusSource {
    /// Generated in memory from a seed.
    Synthetic {
        #[serde(default)]
        config: SyntheticCorpusConfig,
        #[serde(default)]
        seed: u64,
    },
    /// WAV directories; every file is resampled to `sample_rate_hz`.
    Directory { speech_dir: PathBuf, noise_dir: PathBuf, sample_rate_hz: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrescriptionSource {
    /// One of the five reference fittings, numbered from 1.
    Subject { subject: u32 },
    Custom { prescription: Prescription },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActionConfig {
    pub scales: Vec<f64>,
    /// Bands the agent adjusts. `None` takes the simulated listener's active
    /// bands, or all bands for a human listener.
    pub controlled_bands: Option<Vec<usize>>,
}

impl Default for ActionConfig {
    fn default() -> Self {
        Self { scales: vec![1.0, 4.0], controlled_bands: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionPlan {
    pub pairs_per_block: usize,
    pub blocks: usize,
}

impl Default for SessionPlan {
    fn default() -> Self {
        Self { pairs_per_block: 30, blocks: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ListenerSource {
    /// A built-in persona (1 to 5) or a profile file.
    Simulated {
        #[serde(default)]
        user: Option<usize>,
        #[serde(default)]
        profile: Option<PathBuf>,
        #[serde(default)]
        seed: u64,
    },
    /// A human answering through the preference service.
    Service {
        #[serde(default = "default_timeout")]
        timeout_s: u64,
        #[serde(default)]
        plan: SessionPlan,
    },
}

fn default_timeout() -> u64 {
    3600
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusSource,
    pub prescription: PrescriptionSource,
    pub action: ActionConfig,
    pub features: FeatureConfig,
    pub env: EnvConfig,
    pub reward: RewardNetConfig,
    pub agent: AgentConfig,
    pub protocol: ProtocolConfig,
    pub listener: ListenerSource,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusSource::Synthetic { config: SyntheticCorpusConfig::default(), seed: 0 },
            prescription: PrescriptionSource::Subject { subject: 1 },
            action: ActionConfig::default(),
            features: FeatureConfig::default(),
            env: EnvConfig::default(),
            reward: RewardNetConfig::default(),
            agent: AgentConfig::default(),
            protocol: ProtocolConfig::default(),
            listener: ListenerSource::Simulated { user: Some(1), profile: None, seed: 0 },
        }
    }
}

impl RunConfig {
    /// A configuration that runs in about two minutes on one core: short
    /// clips, small feature images and networks, 50 episodes.
    pub fn desk_scale() -> Self {
        Self {
            corpus: CorpusSource::Synthetic {
                config: SyntheticCorpusConfig { sentence_s: 0.6, ..Default::default() },
                seed: 0,
            },
            features: FeatureConfig { n_mels: 24, n_frames_per_image: 24, n_stack: 2, ..Default::default() },
            reward: RewardNetConfig {
                conv_filters: vec![8, 16],
                recurrent_hidden: 16,
                batch_size: 32,
                max_epochs: 60,
                dropout_rate: 0.2,
                ..Default::default()
            },
            agent: AgentConfig {
                n_episodes: 50,
                train_frequency: 2,
                batch_size: 32,
                gamma: 0.5,
                replay_capacity: 1000,
                conv_filters: vec![8, 16],
                dense_units: 32,
                ..Default::default()
            },
            protocol: ProtocolConfig {
                warmup_steps: 64,
                query_interval: Some(10),
                queries_per_round: 10,
                finetune_batches: 10,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&fs::read_to_string(path).at(path)?).at(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).at(path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes") + "\n"
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("configuration serializes")))
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.reward.validate()?;
        self.agent.validate()?;
        self.protocol.validate()?;
        self.prescription()?.validate()?;
        if self.env.queue_capacity < 2 {
            return Err(Error::Config("env.queue_capacity must be at least 2".into()));
        }
        if let CorpusSource::Directory { speech_dir, noise_dir, sample_rate_hz } = &self.corpus {
            if *sample_rate_hz == 0 {
                return Err(Error::Config("corpus.sample_rate_hz must be positive".into()));
            }
            for d in [speech_dir, noise_dir] {
                if !d.is_dir() {
                    return Err(Error::Config(format!("corpus directory {} does not exist", d.display())));
                }
            }
        }
        if let ListenerSource::Simulated { .. } = self.listener {
            self.profile()?.validate()?;
        }
        if let ListenerSource::Service { timeout_s, plan } = &self.listener {
            if *timeout_s == 0 || plan.pairs_per_block == 0 || plan.blocks == 0 {
                return Err(Error::Config("service timeout and session plan must be positive".into()));
            }
        }
        self.band_control()?.validate()?;
        Ok(())
    }

    pub fn prescription(&self) -> Result<Prescription> {
        match &self.prescription {
            PrescriptionSource::Subject { subject } => REFERENCE_SUBJECTS
                .iter()
                .find(|s| s.subject == *subject)
                .map(|s| s.prescription())
                .ok_or_else(|| Error::Config(format!("no reference subject {subject}"))),
            PrescriptionSource::Custom { prescription } => Ok(prescription.clone()),
        }
    }

    /// The simulated listener's profile; an error for service listeners.
    pub fn profile(&self) -> Result<SimUserProfile> {
        match &self.listener {
            ListenerSource::Simulated { profile: Some(path), .. } => {
                let p: SimUserProfile = serde_json::from_str(&fs::read_to_string(path).at(path)?).at(path)?;
                p.validate()?;
                Ok(p)
            }
            ListenerSource::Simulated { user: Some(u), .. } => {
                builtin_profile(*u).ok_or_else(|| Error::Config(format!("no built-in simulated user {u}")))
            }
            ListenerSource::Simulated { .. } => Err(Error::Config("simulated listener needs a user or a profile".into())),
            ListenerSource::Service { .. } => Err(Error::Config("the listener is not simulated".into())),
        }
    }

    pub fn band_control(&self) -> Result<BandControl> {
        let n = self.prescription()?.n_bands();
        let control = match (&self.action.controlled_bands, &self.listener) {
            (Some(bands), _) => BandControl { n_total_bands: n, controlled: bands.clone() },
            (None, ListenerSource::Simulated { .. }) => self.profile()?.band_control(),
            (None, ListenerSource::Service { .. }) => BandControl::all(n),
        };
        control.validate()?;
        Ok(control)
    }

    pub fn corpus(&self) -> Result<Corpus> {
        match &self.corpus {
            CorpusSource::Synthetic { config, seed } => {
                let c = synthetic_corpus(config, *seed)?;
                Ok(Corpus::new(c.speech, vec![c.noise])?)
            }
            CorpusSource::Directory { speech_dir, noise_dir, sample_rate_hz } => {
                let speech = load_corpus(speech_dir)?.load_clips(*sample_rate_hz)?;
                let noise = load_corpus(noise_dir)?.load_clips(*sample_rate_hz)?;
                Ok(Corpus::new(speech, noise)?)
            }
        }
    }

    pub fn environment(&self) -> Result<Environment> {
        self.environment_with(Arc::new(self.corpus()?))
    }

    pub fn environment_with(&self, corpus: Arc<Corpus>) -> Result<Environment> {
        let control = self.band_control()?;
        let space = build_action_space(control.controlled.len(), &self.action.scales)?;
        Ok(Environment::new(self.env.clone(), corpus, self.prescription()?, space, control, &self.features, self.seed)?)
    }
}
