#![allow(dead_code)]

use progressd_core::synthgen::{generate_episodes, SynthConfig};
use progressd_core::{BackboneConfig, LabeledEpisode, ModelConfig, TrainConfig};

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            embed_dim: 8,
            depth: 1,
            heads: 2,
            ..BackboneConfig::default()
        },
        view_embed_dim: 16,
        fusion_dim: 8,
        lstm_hidden: 8,
        ..ModelConfig::default()
    }
}

pub fn tiny_train(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        model: tiny_model(),
        ..TrainConfig::default()
    }
}

pub fn short_synth(seed: u64, n: usize) -> SynthConfig {
    SynthConfig {
        seed,
        n_episodes: n,
        duration_range: [10, 20],
        idle_prefix_range: [2, 4],
        idle_suffix_range: [5, 7],
        ..SynthConfig::default()
    }
}

pub fn labeled(cfg: &SynthConfig) -> Vec<LabeledEpisode> {
    generate_episodes(cfg)
        .unwrap()
        .into_iter()
        .map(|e| LabeledEpisode::new(e, None).unwrap())
        .collect()
}
