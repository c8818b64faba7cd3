//! Shared fixtures for integration tests: synthetic backbones and a
//! desk-scale training configuration that runs in seconds on one core.

use rand::Rng;
use seqdesign_core::data::BackboneRecord;
use seqdesign_core::geometry::FeaturizerConfig;
use seqdesign_core::objectives::LossConfig;
use seqdesign_core::pipeline::TrainConfig;
use seqdesign_core::rng::derive_rng;
use seqdesign_core::transformer::TransformerConfig;
use seqdesign_core::ResidueAlphabet;

/// Random chain-like backbone with a random sequence. Coordinates are
/// jittered so no pairwise distances tie exactly.
pub fn random_record(name: &str, len: usize, seed: u64) -> BackboneRecord {
    let alpha = ResidueAlphabet::canonical();
    let mut rng = derive_rng(seed, &format!("fixture/{name}"));
    let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..20)).collect();
    let sequence: String = tokens.iter().map(|&t| alpha.symbol(t)).collect();
    let mut coords = Vec::with_capacity(len);
    let mut prev = [0.0f64; 3];
    for _ in 0..len {
        let ca = [
            prev[0] + 2.0 + rng.gen_range(-0.4..0.4),
            prev[1] + rng.gen_range(-1.5..1.5),
            prev[2] + rng.gen_range(-1.5..1.5),
        ];
        prev = ca;
        let n = [
            ca[0] - 1.0,
            ca[1] + 0.9 + rng.gen_range(-0.1..0.1),
            ca[2] + 0.2,
        ];
        let c = [ca[0] + 1.1, ca[1] + rng.gen_range(-0.1..0.1), ca[2] + 0.8];
        coords.push([n, ca, c]);
    }
    BackboneRecord {
        name: name.into(),
        sequence,
        tokens,
        coords,
        mask: vec![true; len],
    }
}

pub fn random_corpus(count: usize, max_len: usize, seed: u64) -> Vec<BackboneRecord> {
    let mut rng = derive_rng(seed, "fixture/corpus");
    (0..count)
        .map(|i| {
            let len = rng.gen_range((max_len / 2).max(4)..=max_len);
            random_record(&format!("rec{i}"), len, seed.wrapping_add(i as u64))
        })
        .collect()
}

/// Desk-scale configuration: small model, aggressive learning rate,
/// early exit once training recovery crosses the target.
pub fn desk_config() -> TrainConfig {
    TrainConfig {
        lr: 0.15,
        momentum: 0.0,
        batch_size: 5,
        token_budget: 0,
        grad_clip: 1.0,
        max_len: 64,
        seed: 7,
        psm: "random".into(),
        pcm: "pretrained".into(),
        nar: false,
        steps_step1: 2000,
        steps_step2: 2000,
        validate_every: 50,
        patience: 0,
        stop_at_train_recovery: 99.5,
        sample_temperature: 1e-6,
        loss: LossConfig::default(),
        transformer: TransformerConfig {
            width: 64,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ff_mult: 2,
            attn_dropout: 0.1,
            max_len: 64,
        },
        gvp_layers: 2,
        gvp_hidden_scalars: 48,
        gvp_hidden_vectors: 12,
        gvp_edge_hidden_scalars: 16,
        gvp_edge_hidden_vectors: 1,
        gvp_message_gvps: 1,
        gvp_ff_gvps: 1,
        gvp_dropout: 0.1,
        featurizer: FeaturizerConfig {
            k_neighbors: 12,
            ..Default::default()
        },
    }
}

/// Even smaller variant for tests that train several models.
pub fn micro_config() -> TrainConfig {
    TrainConfig {
        max_len: 32,
        transformer: TransformerConfig {
            width: 32,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ff_mult: 2,
            attn_dropout: 0.1,
            max_len: 32,
        },
        gvp_layers: 1,
        gvp_hidden_scalars: 24,
        gvp_hidden_vectors: 6,
        gvp_edge_hidden_scalars: 8,
        featurizer: FeaturizerConfig {
            k_neighbors: 8,
            ..Default::default()
        },
        ..desk_config()
    }
}
