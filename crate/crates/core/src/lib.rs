//! Word-level importance scores for encoder-only transformers, computed from
//! their self-attention.
//!
//! ```no_run
//! use attnlens::{Analyzer, FilterConfig, HeadSelector};
//!
//! let analyzer = Analyzer::load_dir("models/tiny")?;
//! let report = analyzer.analyze("the win allowed ferrari to revive a tradition",
//!     &HeadSelector::ALL, &FilterConfig::without_special())?;
//! println!("{}", attnlens::render::render_json(&report));
//! # Ok::<(), attnlens::AnalysisError>(())
//! ```

use std::path::Path;

use thiserror::Error;

pub mod attention;
pub mod container;
pub mod dump;
pub mod fixture;
pub mod model;
pub mod render;
pub mod scoring;
pub mod tokenizer;

pub use attention::AttentionStack;
pub use container::{Tensor, TensorContainer};
pub use model::{EncoderModel, ModelConfig, ModelError};
pub use scoring::{
    apply_filters, normalize, reduce_stack, score_stack, token_scores, word_scores, FilterConfig, HeadSelector,
    ScoreAxis, ScoringError, StopwordList, WordEntry, WordScoreReport,
};
pub use tokenizer::{BpeVocab, SpecialRole, TokenAlignment, TokenizedText, TokenizerError, Word};

/// The article excerpt used as sample input.
pub const SAMPLE_TEXT: &str = include_str!("../assets/sample.txt");

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error("vocabulary does not fit the model: {0}")]
    VocabMismatch(String),
}

/// A model and its vocabulary, checked against each other.
///
/// Immutable once built; share it behind an `Arc` for concurrent analyses.
#[derive(Debug, Clone)]
pub struct Analyzer {
    model: EncoderModel,
    vocab: BpeVocab,
}

impl Analyzer {
    pub fn new(model: EncoderModel, vocab: BpeVocab) -> Result<Self, AnalysisError> {
        let cfg = model.config();
        if vocab.len() > cfg.vocab_size {
            return Err(AnalysisError::VocabMismatch(format!(
                "{} tokens but the embedding table has {} rows",
                vocab.len(),
                cfg.vocab_size
            )));
        }
        for (role, id) in [(SpecialRole::Bos, cfg.bos_id), (SpecialRole::Eos, cfg.eos_id)] {
            let special = vocab.special(role).ok_or(TokenizerError::MissingSpecialToken(role))?;
            if special.id != id {
                return Err(AnalysisError::VocabMismatch(format!(
                    "{role} is id {} in the vocabulary but {id} in the model config",
                    special.id
                )));
            }
        }
        Ok(Self { model, vocab })
    }

    /// Loads model and vocabulary from one directory (`config.json`,
    /// `model.tensors`, `vocab.json`, `merges.txt`).
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, AnalysisError> {
        let dir = dir.as_ref();
        Self::new(EncoderModel::load_dir(dir)?, BpeVocab::load_dir(dir)?)
    }

    pub fn model(&self) -> &EncoderModel {
        &self.model
    }

    pub fn vocab(&self) -> &BpeVocab {
        &self.vocab
    }

    pub fn model_id(&self) -> &str {
        self.model.model_id()
    }

    /// Tokenizes (truncating to the model's position limit) and runs the encoder.
    pub fn attention(&self, text: &str) -> Result<(TokenizedText, AttentionStack), AnalysisError> {
        let tokens = self.vocab.encode(text, self.model.config().max_positions)?;
        let stack = self.model.forward(&tokens.ids)?;
        Ok((tokens, stack))
    }

    /// Runs the whole pipeline on `text`.
    pub fn analyze(&self, text: &str, sel: &HeadSelector, cfg: &FilterConfig) -> Result<WordScoreReport, AnalysisError> {
        let config = self.model.config();
        sel.check_bounds(config.num_layers, config.num_heads)?;
        cfg.validate()?;
        let (tokens, stack) = self.attention(text)?;
        Ok(score_stack(&stack, &tokens, sel, cfg, self.model_id())?)
    }
}

/// Free-function form of [`Analyzer::analyze`].
pub fn analyze(
    text: &str,
    model: &EncoderModel,
    vocab: &BpeVocab,
    sel: &HeadSelector,
    cfg: &FilterConfig,
) -> Result<WordScoreReport, AnalysisError> {
    let config = model.config();
    sel.check_bounds(config.num_layers, config.num_heads)?;
    let tokens = vocab.encode(text, config.max_positions)?;
    let stack = model.forward(&tokens.ids)?;
    Ok(score_stack(&stack, &tokens, sel, cfg, model.model_id())?)
}
