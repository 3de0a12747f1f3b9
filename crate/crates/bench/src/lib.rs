//! Shared fixtures for the criterion benchmarks.

use keytag_core::encoder::EncoderConfig;
use keytag_core::model::{EncoderModel, HeadKind, ModelConfig};
use keytag_core::rng_from_seed;

/// A small but non-trivial tagging model (d=128, 4 heads, 2 layers).
pub fn bench_model(sequence_length: usize) -> EncoderModel<f32> {
    let config = ModelConfig {
        encoder: EncoderConfig {
            embedding_dim: 128,
            num_heads: 4,
            num_layers: 2,
            sequence_length,
            ffn_dim: 512,
            rel_pos_window: sequence_length,
            use_pos_tags: false,
            dropout_rate: 0.1,
        },
        vocab_size: 2000,
        head_end: 204,
        mid_end: 804,
        tag_vocab_size: 0,
        head: HeadKind::Classifier,
    };
    EncoderModel::new(config, &mut rng_from_seed(1)).expect("valid config")
}
