#![allow(dead_code)]

use prefcomp::config::{CorpusSource, ListenerSource, RunConfig};
use prefcomp_core::agent::AgentConfig;
use prefcomp_core::features::FeatureConfig;
use prefcomp_core::fixtures::SyntheticCorpusConfig;
use prefcomp_core::protocol::ProtocolConfig;
use prefcomp_core::reward::RewardNetConfig;

/// A configuration that runs the whole protocol in about a second.
pub fn tiny_config(user: usize) -> RunConfig {
    RunConfig {
        seed: 3,
        corpus: CorpusSource::Synthetic {
            config: SyntheticCorpusConfig { n_speakers: 2, sentences_per_speaker: 3, sentence_s: 0.3, noise_s: 1.0, ..Default::default() },
            seed: 1,
        },
        features: FeatureConfig { n_mels: 8, n_frames_per_image: 8, n_stack: 2, ..Default::default() },
        reward: RewardNetConfig { conv_filters: vec![2], recurrent_hidden: 2, batch_size: 8, max_epochs: 3, ..Default::default() },
        agent: AgentConfig {
            n_episodes: 4,
            steps_per_episode: 5,
            train_frequency: 2,
            batch_size: 4,
            no_op_steps: 4,
            conv_filters: vec![2],
            dense_units: 8,
            ..Default::default()
        },
        protocol: ProtocolConfig {
            warmup_steps: 12,
            n_initial_pairs: 12,
            query_interval: Some(2),
            queries_per_round: 4,
            finetune_batches: 2,
            eval_pairs: 6,
            probe_steps: 3,
            val_fraction: 0.25,
        },
        listener: ListenerSource::Simulated { user: Some(user), profile: None, seed: 11 },
        ..Default::default()
    }
}
