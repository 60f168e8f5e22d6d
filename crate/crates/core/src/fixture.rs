//! Deterministic toy models for tests, demos and the bundled fixture.
//!
//! The tiny vocabulary has exactly 300 entries: the four RoBERTa specials,
//! the 256 byte symbols and 40 hand-picked English merges.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::container::{Tensor, TensorContainer};
use crate::model::{EncoderModel, ModelConfig, CONFIG_FILE, WEIGHTS_FILE};
use crate::tokenizer::{BpeVocab, ByteEncoder, TokenId, MERGES_FILE, VOCAB_FILE};

const TINY_MERGES: [(&str, &str); 40] = [
    ("Ġ", "t"),
    ("h", "e"),
    ("Ġ", "a"),
    ("i", "n"),
    ("Ġt", "he"),
    ("e", "r"),
    ("o", "n"),
    ("r", "e"),
    ("Ġ", "w"),
    ("a", "t"),
    ("e", "n"),
    ("Ġ", "s"),
    ("o", "r"),
    ("i", "s"),
    ("Ġ", "f"),
    ("Ġ", "o"),
    ("e", "d"),
    ("a", "r"),
    ("Ġ", "i"),
    ("Ġ", "c"),
    ("in", "g"),
    ("Ġ", "r"),
    ("a", "n"),
    ("Ġ", "b"),
    ("Ġ", "m"),
    ("Ġ", "p"),
    ("Ġ", "h"),
    ("Ġ", "d"),
    ("l", "l"),
    ("Ġo", "f"),
    ("Ġt", "o"),
    ("Ġ", "."),
    ("e", "s"),
    ("Ġa", "n"),
    ("Ġan", "d"),
    ("Ġw", "in"),
    ("Ġf", "er"),
    ("r", "ar"),
    ("Ġfer", "rar"),
    ("Ġferrar", "i"),
];

/// The 300-token byte-level vocabulary used by the tiny fixture model.
pub fn tiny_vocab() -> BpeVocab {
    let enc = ByteEncoder::new();
    let mut tokens: Vec<String> = ["<s>", "<pad>", "</s>", "<unk>"].map(String::from).to_vec();
    tokens.extend((0..=255u8).map(|b| enc.encode_byte(b).to_string()));
    tokens.extend(TINY_MERGES.iter().map(|(l, r)| format!("{l}{r}")));
    let token_to_id: HashMap<String, TokenId> =
        tokens.into_iter().enumerate().map(|(i, t)| (t, i as TokenId)).collect();
    let merges = TINY_MERGES.iter().map(|(l, r)| (l.to_string(), r.to_string())).collect();
    BpeVocab::new(token_to_id, merges).expect("fixture vocabulary is consistent")
}

/// L=2, H=2, d=16, ffn=32, vocab=300, 64 positions.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        name: Some("tiny-fixture".into()),
        num_layers: 2,
        num_heads: 2,
        hidden_size: 16,
        ffn_size: 32,
        vocab_size: 300,
        max_positions: 64,
        layer_norm_eps: 1e-5,
        bos_id: 0,
        eos_id: 2,
        pad_id: 1,
        position_offset: 0,
    }
}

/// Random weights for `config`, fully determined by `seed`.
///
/// Projection weights are drawn with standard deviation `1.5 / sqrt(fan_in)`
/// so attention is visibly non-uniform.
pub fn random_container(config: &ModelConfig, seed: u64) -> TensorContainer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut container = TensorContainer::new();
    for (name, shape) in config.tensor_shapes() {
        let count: usize = shape.iter().product();
        let data: Vec<f32> = if name.ends_with(".gain") {
            let noise = Normal::new(0.0f32, 0.05).expect("valid std");
            (0..count).map(|_| 1.0 + noise.sample(&mut rng)).collect()
        } else if name.ends_with(".bias") {
            let noise = Normal::new(0.0f32, 0.05).expect("valid std");
            (0..count).map(|_| noise.sample(&mut rng)).collect()
        } else {
            let fan_in = if name.starts_with("embeddings.") { 1 } else { shape[1] };
            let std = 1.5 / (fan_in as f32).sqrt();
            let dist = Normal::new(0.0f32, std).expect("valid std");
            (0..count).map(|_| dist.sample(&mut rng)).collect()
        };
        container.insert(name, Tensor::new(shape, data));
    }
    container
}

pub fn random_model(config: ModelConfig, seed: u64) -> EncoderModel {
    let container = random_container(&config, seed);
    EncoderModel::from_container(config, &container).expect("generated weights match config")
}

/// Writes `config.json`, `model.tensors`, `vocab.json` and `merges.txt` for a
/// random model over the tiny vocabulary.
pub fn write_model_dir(dir: impl AsRef<Path>, config: &ModelConfig, seed: u64) -> std::io::Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let vocab = tiny_vocab();
    let config_json = serde_json::to_string_pretty(config).expect("config serializes");
    std::fs::write(dir.join(CONFIG_FILE), config_json + "\n")?;
    std::fs::write(dir.join(WEIGHTS_FILE), random_container(config, seed).to_bytes())?;
    std::fs::write(dir.join(VOCAB_FILE), vocab.vocab_json())?;
    std::fs::write(dir.join(MERGES_FILE), vocab.merges_text())?;
    Ok(())
}
