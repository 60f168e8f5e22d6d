//! Encoder-only transformer inference that records attention.
//!
//! The architecture is the BERT/RoBERTa post-LN family: token + position
//! embeddings followed by a layer norm, then per layer multi-head
//! self-attention and a GELU feed-forward block, each wrapped in a residual
//! connection and a layer norm. Linear weights are stored `[out, in]`.
//!
//! Tensor names expected in the container (`{l}` is the layer index):
//!
//! | name | shape |
//! |------|-------|
//! | `embeddings.token.weight` | `[vocab_size, d]` |
//! | `embeddings.position.weight` | `[position_offset + max_positions, d]` |
//! | `embeddings.norm.{gain,bias}` | `[d]` |
//! | `layers.{l}.attention.{query,key,value,output}.weight` | `[d, d]` |
//! | `layers.{l}.attention.{query,key,value,output}.bias` | `[d]` |
//! | `layers.{l}.attention.norm.{gain,bias}` | `[d]` |
//! | `layers.{l}.ffn.intermediate.weight` / `.bias` | `[ffn, d]` / `[ffn]` |
//! | `layers.{l}.ffn.output.weight` / `.bias` | `[d, ffn]` / `[d]` |
//! | `layers.{l}.ffn.norm.{gain,bias}` | `[d]` |

use std::io::Read;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::AttentionStack;
use crate::container::{ContainerError, Tensor, TensorContainer};
use crate::tokenizer::TokenId;

pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_FILE: &str = "model.tensors";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?} has shape {got:?}, expected {expected:?}")]
    Shape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("tensor {name:?} has a non-finite value at flat index {index}")]
    CorruptTensor { name: String, index: usize },
    #[error("token id {id} is out of range for vocabulary size {vocab_size}")]
    TokenIdOutOfRange { id: TokenId, vocab_size: usize },
    #[error("sequence of {len} tokens exceeds the model limit of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("cannot run the encoder on an empty sequence")]
    EmptySequence,
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn default_eps() -> f64 {
    1e-5
}

/// Architecture hyper-parameters, read from `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Identifier reported alongside every analysis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_size: usize,
    pub ffn_size: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    pub bos_id: TokenId,
    pub eos_id: TokenId,
    pub pad_id: TokenId,
    /// Row of the position table used for the first token. RoBERTa
    /// checkpoints start at 2.
    #[serde(default)]
    pub position_offset: usize,
}

impl ModelConfig {
    pub fn read(source: impl Read) -> Result<Self, ModelError> {
        serde_json::from_reader(source).map_err(|e| ModelError::Config(e.to_string()))
    }

    /// Reads `config.json` only, without touching the weights.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, ModelError> {
        let file = std::fs::File::open(dir.as_ref().join(CONFIG_FILE))?;
        Self::read(std::io::BufReader::new(file))
    }

    pub fn model_id(&self) -> &str {
        self.name.as_deref().unwrap_or("encoder")
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        for (field, value) in [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("hidden_size", self.hidden_size),
            ("ffn_size", self.ffn_size),
            ("vocab_size", self.vocab_size),
        ] {
            if value == 0 {
                return fail(format!("{field} must be positive"));
            }
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return fail(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            ));
        }
        if self.max_positions < 2 {
            return fail(format!("max_positions must be at least 2, got {}", self.max_positions));
        }
        if !(self.layer_norm_eps.is_finite() && self.layer_norm_eps > 0.0) {
            return fail(format!("layer_norm_eps must be a small positive number, got {}", self.layer_norm_eps));
        }
        for (field, id) in [("bos_id", self.bos_id), ("eos_id", self.eos_id), ("pad_id", self.pad_id)] {
            if id as usize >= self.vocab_size {
                return fail(format!("{field} {id} is not below vocab_size {}", self.vocab_size));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    /// Expected shape of every tensor the encoder needs, in load order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.hidden_size;
        let f = self.ffn_size;
        let mut shapes = vec![
            ("embeddings.token.weight".to_string(), vec![self.vocab_size, d]),
            ("embeddings.position.weight".to_string(), vec![self.position_offset + self.max_positions, d]),
            ("embeddings.norm.gain".to_string(), vec![d]),
            ("embeddings.norm.bias".to_string(), vec![d]),
        ];
        for l in 0..self.num_layers {
            let p = format!("layers.{l}");
            for proj in ["query", "key", "value", "output"] {
                shapes.push((format!("{p}.attention.{proj}.weight"), vec![d, d]));
                shapes.push((format!("{p}.attention.{proj}.bias"), vec![d]));
            }
            shapes.push((format!("{p}.attention.norm.gain"), vec![d]));
            shapes.push((format!("{p}.attention.norm.bias"), vec![d]));
            shapes.push((format!("{p}.ffn.intermediate.weight"), vec![f, d]));
            shapes.push((format!("{p}.ffn.intermediate.bias"), vec![f]));
            shapes.push((format!("{p}.ffn.output.weight"), vec![d, f]));
            shapes.push((format!("{p}.ffn.output.bias"), vec![d]));
            shapes.push((format!("{p}.ffn.norm.gain"), vec![d]));
            shapes.push((format!("{p}.ffn.norm.bias"), vec![d]));
        }
        shapes
    }
}

#[derive(Debug, Clone)]
struct Linear {
    weight: Array2<f32>,
    bias: Array1<f32>,
}

impl Linear {
    fn apply(&self, x: &Array2<f32>) -> Array2<f32> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

#[derive(Debug, Clone)]
struct LayerNorm {
    gain: Array1<f32>,
    bias: Array1<f32>,
}

impl LayerNorm {
    fn apply(&self, x: &mut Array2<f32>, eps: f64) {
        for mut row in x.rows_mut() {
            let n = row.len() as f64;
            let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
            let var = row.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for (v, (&g, &b)) in row.iter_mut().zip(self.gain.iter().zip(self.bias.iter())) {
                *v = ((f64::from(*v) - mean) * inv) as f32 * g + b;
            }
        }
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    attention_norm: LayerNorm,
    intermediate: Linear,
    ffn_output: Linear,
    ffn_norm: LayerNorm,
}

/// A loaded encoder: validated config plus weights. Immutable after load and
/// safe to share across threads.
#[derive(Debug, Clone)]
pub struct EncoderModel {
    config: ModelConfig,
    token_embeddings: Array2<f32>,
    position_embeddings: Array2<f32>,
    embedding_norm: LayerNorm,
    layers: Vec<EncoderLayer>,
}

/// Pulls tensors out of a container, checking shape and finiteness.
struct TensorSource<'a> {
    container: &'a TensorContainer,
    shapes: std::collections::HashMap<String, Vec<usize>>,
}

impl TensorSource<'_> {
    fn take(&self, name: &str) -> Result<Vec<f32>, ModelError> {
        let tensor = self
            .container
            .get(name)
            .ok_or_else(|| ModelError::MissingTensor(name.to_string()))?;
        let expected = &self.shapes[name];
        if tensor.shape() != expected.as_slice() {
            return Err(ModelError::Shape {
                name: name.to_string(),
                expected: expected.clone(),
                got: tensor.shape().to_vec(),
            });
        }
        if let Some(index) = tensor.data().iter().position(|v| !v.is_finite()) {
            return Err(ModelError::CorruptTensor { name: name.to_string(), index });
        }
        Ok(tensor.data().to_vec())
    }

    fn matrix(&self, name: &str) -> Result<Array2<f32>, ModelError> {
        let shape = &self.shapes[name];
        let data = self.take(name)?;
        Ok(Array2::from_shape_vec((shape[0], shape[1]), data).expect("shape checked"))
    }

    fn vector(&self, name: &str) -> Result<Array1<f32>, ModelError> {
        Ok(Array1::from(self.take(name)?))
    }

    fn linear(&self, prefix: &str) -> Result<Linear, ModelError> {
        Ok(Linear {
            weight: self.matrix(&format!("{prefix}.weight"))?,
            bias: self.vector(&format!("{prefix}.bias"))?,
        })
    }

    fn norm(&self, prefix: &str) -> Result<LayerNorm, ModelError> {
        Ok(LayerNorm {
            gain: self.vector(&format!("{prefix}.gain"))?,
            bias: self.vector(&format!("{prefix}.bias"))?,
        })
    }
}

impl EncoderModel {
    /// Validates `config` and binds the container's tensors to it. Extra
    /// tensors in the container are ignored.
    pub fn from_container(config: ModelConfig, container: &TensorContainer) -> Result<Self, ModelError> {
        config.validate()?;
        let src = TensorSource { container, shapes: config.tensor_shapes().into_iter().collect() };
        let layers = (0..config.num_layers)
            .map(|l| {
                let p = format!("layers.{l}");
                Ok(EncoderLayer {
                    query: src.linear(&format!("{p}.attention.query"))?,
                    key: src.linear(&format!("{p}.attention.key"))?,
                    value: src.linear(&format!("{p}.attention.value"))?,
                    output: src.linear(&format!("{p}.attention.output"))?,
                    attention_norm: src.norm(&format!("{p}.attention.norm"))?,
                    intermediate: src.linear(&format!("{p}.ffn.intermediate"))?,
                    ffn_output: src.linear(&format!("{p}.ffn.output"))?,
                    ffn_norm: src.norm(&format!("{p}.ffn.norm"))?,
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        Ok(Self {
            token_embeddings: src.matrix("embeddings.token.weight")?,
            position_embeddings: src.matrix("embeddings.position.weight")?,
            embedding_norm: src.norm("embeddings.norm")?,
            layers,
            config,
        })
    }

    /// Reads a JSON config and a tensor container.
    pub fn load(container_source: impl Read, config_source: impl Read) -> Result<Self, ModelError> {
        let config = ModelConfig::read(config_source)?;
        let container = TensorContainer::read(container_source)?;
        Self::from_container(config, &container)
    }

    /// Loads `config.json` and `model.tensors` from a model directory.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, ModelError> {
        let dir = dir.as_ref();
        let config = std::fs::File::open(dir.join(CONFIG_FILE))?;
        let weights = std::fs::File::open(dir.join(WEIGHTS_FILE))?;
        Self::load(std::io::BufReader::new(weights), std::io::BufReader::new(config))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Name reported in analysis output.
    pub fn model_id(&self) -> &str {
        self.config.model_id()
    }

    /// Exports the weights back into a container under the documented names.
    pub fn to_container(&self) -> TensorContainer {
        fn put2(c: &mut TensorContainer, name: String, m: &Array2<f32>) {
            let data = m.iter().copied().collect();
            c.insert(name, Tensor::new(m.shape().to_vec(), data));
        }
        fn put1(c: &mut TensorContainer, name: String, v: &Array1<f32>) {
            c.insert(name, Tensor::new(vec![v.len()], v.to_vec()));
        }
        let mut c = TensorContainer::new();
        put2(&mut c, "embeddings.token.weight".into(), &self.token_embeddings);
        put2(&mut c, "embeddings.position.weight".into(), &self.position_embeddings);
        put1(&mut c, "embeddings.norm.gain".into(), &self.embedding_norm.gain);
        put1(&mut c, "embeddings.norm.bias".into(), &self.embedding_norm.bias);
        for (l, layer) in self.layers.iter().enumerate() {
            let p = format!("layers.{l}");
            for (name, lin) in [
                ("attention.query", &layer.query),
                ("attention.key", &layer.key),
                ("attention.value", &layer.value),
                ("attention.output", &layer.output),
                ("ffn.intermediate", &layer.intermediate),
                ("ffn.output", &layer.ffn_output),
            ] {
                put2(&mut c, format!("{p}.{name}.weight"), &lin.weight);
                put1(&mut c, format!("{p}.{name}.bias"), &lin.bias);
            }
            for (name, norm) in [("attention.norm", &layer.attention_norm), ("ffn.norm", &layer.ffn_norm)] {
                put1(&mut c, format!("{p}.{name}.gain"), &norm.gain);
                put1(&mut c, format!("{p}.{name}.bias"), &norm.bias);
            }
        }
        c
    }

    /// Runs the encoder over `ids` and returns the post-softmax attention of
    /// every layer and head. Hidden states are not exposed.
    pub fn forward(&self, ids: &[TokenId]) -> Result<AttentionStack, ModelError> {
        let cfg = &self.config;
        let n = ids.len();
        if n == 0 {
            return Err(ModelError::EmptySequence);
        }
        if n > cfg.max_positions {
            return Err(ModelError::SequenceTooLong { len: n, max: cfg.max_positions });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(ModelError::TokenIdOutOfRange { id, vocab_size: cfg.vocab_size });
        }

        let d = cfg.hidden_size;
        let heads = cfg.num_heads;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f32).sqrt();

        let mut x = Array2::<f32>::zeros((n, d));
        for (pos, (&id, mut row)) in ids.iter().zip(x.rows_mut()).enumerate() {
            row.assign(&self.token_embeddings.row(id as usize));
            row += &self.position_embeddings.row(pos + cfg.position_offset);
        }
        self.embedding_norm.apply(&mut x, cfg.layer_norm_eps);

        let mut attention = Array4::<f32>::zeros((cfg.num_layers, heads, n, n));
        for (l, layer) in self.layers.iter().enumerate() {
            let q = layer.query.apply(&x);
            let k = layer.key.apply(&x);
            let v = layer.value.apply(&x);
            let mut context = Array2::<f32>::zeros((n, d));
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let mut probs = q.slice(cols).dot(&k.slice(cols).t());
                probs.mapv_inplace(|s| s * scale);
                for row in probs.rows_mut() {
                    softmax_in_place(row);
                }
                context.slice_mut(cols).assign(&probs.dot(&v.slice(cols)));
                attention.slice_mut(s![l, h, .., ..]).assign(&probs);
            }

            let mut hidden = layer.output.apply(&context) + &x;
            layer.attention_norm.apply(&mut hidden, cfg.layer_norm_eps);

            let mut inner = layer.intermediate.apply(&hidden);
            inner.mapv_inplace(gelu);
            let mut out = layer.ffn_output.apply(&inner) + &hidden;
            layer.ffn_norm.apply(&mut out, cfg.layer_norm_eps);
            x = out;
        }
        Ok(AttentionStack::new(attention))
    }
}

fn softmax_in_place(mut row: ndarray::ArrayViewMut1<'_, f32>) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut denom = 0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        denom += f64::from(*v);
    }
    for v in row.iter_mut() {
        *v = (f64::from(*v) / denom) as f32;
    }
}

/// Exact (erf) GELU.
fn gelu(x: f32) -> f32 {
    let x = f64::from(x);
    (0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))) as f32
}
