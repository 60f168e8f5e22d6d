//! From an attention stack to normalized per-word scores.
//!
//! The pipeline is
//! [`reduce_stack`] → [`token_scores`] → [`word_scores`] → [`apply_filters`]
//! → [`normalize`]; [`score_stack`] runs all of it.
//!
//! * The `[L, H, N, N]` stack is averaged over the selected layers and heads.
//! * Each token's score is the mean attention it *receives* (column mean).
//!   Row means of a row-stochastic matrix are all `1/N` and carry nothing.
//! * A word takes the maximum score of its sub-word tokens.
//! * Filters flag words instead of removing them; min-max normalization then
//!   runs over the unflagged words only.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::OnceLock;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::AttentionStack;
use crate::tokenizer::{TokenAlignment, SPECIAL_WORD};

/// Row-sum slack accepted by [`token_scores`].
pub const TOKEN_SCORE_ROW_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("invalid head selector: {0}")]
    Selector(String),
    #[error("attention row {row} sums to {sum}, not 1")]
    NotRowStochastic { row: usize, sum: f64 },
    #[error("expected {expected} token scores, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("every word is filtered out; nothing left to normalize")]
    AllWordsFiltered,
    #[error("invalid filter config: {0}")]
    InvalidFilter(String),
}

/// Which attention matrices to average: everything, one layer, or one head.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HeadSelector {
    layer: Option<usize>,
    head: Option<usize>,
}

impl HeadSelector {
    pub const ALL: Self = Self { layer: None, head: None };

    /// Rejects a head without a layer.
    pub fn new(layer: Option<usize>, head: Option<usize>) -> Result<Self, ScoringError> {
        if head.is_some() && layer.is_none() {
            return Err(ScoringError::Selector("a head can only be selected together with a layer".into()));
        }
        Ok(Self { layer, head })
    }

    pub fn layer(layer: usize) -> Self {
        Self { layer: Some(layer), head: None }
    }

    pub fn head(layer: usize, head: usize) -> Self {
        Self { layer: Some(layer), head: Some(head) }
    }

    pub fn layer_index(&self) -> Option<usize> {
        self.layer
    }

    pub fn head_index(&self) -> Option<usize> {
        self.head
    }

    /// Checks indices against a model with `layers` layers and `heads` heads.
    pub fn check_bounds(&self, layers: usize, heads: usize) -> Result<(), ScoringError> {
        if let Some(l) = self.layer {
            if l >= layers {
                return Err(ScoringError::Selector(format!("layer {l} is out of range 0..{layers}")));
            }
        }
        if let Some(h) = self.head {
            if h >= heads {
                return Err(ScoringError::Selector(format!("head {h} is out of range 0..{heads}")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for HeadSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.layer, self.head) {
            (None, _) => f.write_str("all layers, all heads"),
            (Some(l), None) => write!(f, "layer {l}, all heads"),
            (Some(l), Some(h)) => write!(f, "layer {l}, head {h}"),
        }
    }
}

/// How an `N×N` matrix is reduced to one score per token. Only attention
/// received is defined today.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreAxis {
    #[default]
    Received,
}

impl ScoreAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Received => "received",
        }
    }
}

const EMBEDDED_STOPWORDS: &str = include_str!("../assets/stopwords_en.txt");

/// Label of the embedded English list.
pub const EMBEDDED_STOPWORDS_LABEL: &str = "en-v1";

/// A labelled set of lowercase stop words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopwordList {
    label: String,
    words: BTreeSet<String>,
}

impl StopwordList {
    /// The embedded 179-word English list.
    pub fn english() -> Self {
        static WORDS: OnceLock<BTreeSet<String>> = OnceLock::new();
        let words = WORDS.get_or_init(|| {
            EMBEDDED_STOPWORDS
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_string)
                .collect()
        });
        Self { label: EMBEDDED_STOPWORDS_LABEL.into(), words: words.clone() }
    }

    pub fn custom(label: impl Into<String>, words: impl IntoIterator<Item = impl AsRef<str>>) -> Self {
        Self {
            label: label.into(),
            words: words.into_iter().map(|w| w.as_ref().to_lowercase()).collect(),
        }
    }

    /// Adds words; the label records how many were added.
    pub fn extend(mut self, extra: impl IntoIterator<Item = impl AsRef<str>>) -> Self {
        let before = self.words.len();
        self.words.extend(extra.into_iter().map(|w| w.as_ref().to_lowercase()));
        let added = self.words.len() - before;
        if added > 0 {
            self.label = format!("{}+{added}", self.label);
        }
        self
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(String::as_str)
    }
}

impl Default for StopwordList {
    fn default() -> Self {
        Self::english()
    }
}

/// Which words to flag before normalization. `Default` flags nothing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterConfig {
    pub exclude_special: bool,
    pub exclude_punctuation: bool,
    pub punctuation_set: BTreeSet<String>,
    pub exclude_stopwords: bool,
    pub stopwords: StopwordList,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            exclude_special: false,
            exclude_punctuation: false,
            punctuation_set: BTreeSet::from([".".to_string()]),
            exclude_stopwords: false,
            stopwords: StopwordList::english(),
        }
    }
}

impl FilterConfig {
    /// No word flagged.
    pub fn none() -> Self {
        Self::default()
    }

    /// Only BOS/EOS flagged.
    pub fn without_special() -> Self {
        Self { exclude_special: true, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ScoringError> {
        if self.exclude_punctuation && self.punctuation_set.is_empty() {
            return Err(ScoringError::InvalidFilter("punctuation filter is on but the set is empty".into()));
        }
        if self.exclude_stopwords && self.stopwords.is_empty() {
            return Err(ScoringError::InvalidFilter("stop-word filter is on but the list is empty".into()));
        }
        Ok(())
    }

    /// Whether an entry would be flagged under this config.
    pub fn excludes(&self, word: &str, is_special: bool) -> bool {
        if is_special {
            return self.exclude_special;
        }
        let lower = word.to_lowercase();
        (self.exclude_punctuation && self.punctuation_set.contains(&lower))
            || (self.exclude_stopwords && self.stopwords.contains(&lower))
    }
}

/// One word (or BOS/EOS pseudo-word) of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordEntry {
    pub word: String,
    pub byte_span: (usize, usize),
    pub token_count: usize,
    pub raw_score: f64,
    pub norm_score: Option<f64>,
    pub filtered: bool,
    pub is_special: bool,
}

/// Per-word scores for one text, in text order.
#[derive(Debug, Clone, PartialEq)]
pub struct WordScoreReport {
    pub entries: Vec<WordEntry>,
    pub text: String,
    pub selector: HeadSelector,
    pub filter_config: FilterConfig,
    pub score_axis: ScoreAxis,
    pub model_id: String,
}

impl WordScoreReport {
    pub fn unfiltered(&self) -> impl Iterator<Item = &WordEntry> {
        self.entries.iter().filter(|e| !e.filtered)
    }
}

/// Averages the selected attention matrices into one `N×N` matrix.
pub fn reduce_stack(stack: &AttentionStack, sel: &HeadSelector) -> Result<Array2<f64>, ScoringError> {
    sel.check_bounds(stack.layers(), stack.heads())?;
    let layers = match sel.layer {
        Some(l) => l..l + 1,
        None => 0..stack.layers(),
    };
    let heads = match sel.head {
        Some(h) => h..h + 1,
        None => 0..stack.heads(),
    };
    let n = stack.len();
    let mut sum = Array2::<f64>::zeros((n, n));
    let mut count = 0usize;
    for l in layers {
        for h in heads.clone() {
            sum.zip_mut_with(&stack.matrix(l, h), |acc, &v| *acc += f64::from(v));
            count += 1;
        }
    }
    if count > 1 {
        sum.mapv_inplace(|v| v / count as f64);
    }
    Ok(sum)
}

/// Mean attention received by each token: `s_j = (1/N) Σ_i m[i, j]`.
pub fn token_scores(matrix: ArrayView2<'_, f64>) -> Result<Vec<f64>, ScoringError> {
    let (n, m) = matrix.dim();
    if n != m {
        return Err(ScoringError::Shape { expected: n, got: m });
    }
    for (row, values) in matrix.axis_iter(Axis(0)).enumerate() {
        let sum: f64 = values.sum();
        if (sum - 1.0).abs() > TOKEN_SCORE_ROW_TOLERANCE {
            return Err(ScoringError::NotRowStochastic { row, sum });
        }
    }
    Ok((0..m).map(|j| matrix.column(j).sum() / n as f64).collect())
}

/// Lifts token scores to words: each word gets the max over its tokens.
/// BOS/EOS become their own special entries.
pub fn word_scores(scores: &[f64], alignment: &impl TokenAlignment) -> Result<WordScoreReport, ScoringError> {
    let word_index = alignment.word_index();
    if scores.len() != word_index.len() {
        return Err(ScoringError::Shape { expected: word_index.len(), got: scores.len() });
    }
    let words = alignment.words();
    let text_len = alignment.text().len();
    let mut entries: Vec<WordEntry> = Vec::with_capacity(words.len() + 2);
    let mut last_word: Option<(i32, usize)> = None; // (word index, entry index)
    let mut seen_word = false;

    for (t, (&w, &score)) in word_index.iter().zip(scores).enumerate() {
        if w == SPECIAL_WORD {
            let pos = if seen_word { entries.last().map_or(text_len, |e| e.byte_span.1) } else { 0 };
            entries.push(WordEntry {
                word: alignment.tokens()[t].clone(),
                byte_span: (pos, pos),
                token_count: 1,
                raw_score: score,
                norm_score: None,
                filtered: false,
                is_special: true,
            });
            last_word = None;
            continue;
        }
        seen_word = true;
        match last_word {
            Some((prev, idx)) if prev == w => {
                let entry = &mut entries[idx];
                entry.token_count += 1;
                entry.raw_score = entry.raw_score.max(score);
            }
            _ => {
                let word = words.get(w as usize).ok_or(ScoringError::Shape {
                    expected: words.len(),
                    got: w as usize + 1,
                })?;
                entries.push(WordEntry {
                    word: word.text.clone(),
                    byte_span: (word.start, word.end),
                    token_count: 1,
                    raw_score: score,
                    norm_score: None,
                    filtered: false,
                    is_special: false,
                });
                last_word = Some((w, entries.len() - 1));
            }
        }
    }

    Ok(WordScoreReport {
        entries,
        text: alignment.text().to_string(),
        selector: HeadSelector::ALL,
        filter_config: FilterConfig::none(),
        score_axis: ScoreAxis::Received,
        model_id: String::new(),
    })
}

/// Flags entries matched by `cfg`. Raw scores are untouched and entries are
/// never removed. Flags from earlier calls are kept.
pub fn apply_filters(mut report: WordScoreReport, cfg: &FilterConfig) -> WordScoreReport {
    for entry in &mut report.entries {
        if cfg.excludes(&entry.word, entry.is_special) {
            entry.filtered = true;
            entry.norm_score = None;
        }
    }
    report.filter_config = cfg.clone();
    report
}

/// Min-max normalizes raw scores over unfiltered entries. When every
/// unfiltered raw score is equal, each gets 1.0.
pub fn normalize(mut report: WordScoreReport) -> Result<WordScoreReport, ScoringError> {
    let (min, max) = report
        .unfiltered()
        .map(|e| e.raw_score)
        .fold(None, |acc: Option<(f64, f64)>, v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
        .ok_or(ScoringError::AllWordsFiltered)?;
    let range = max - min;
    for entry in &mut report.entries {
        entry.norm_score = if entry.filtered {
            None
        } else if range > 0.0 {
            Some((entry.raw_score - min) / range)
        } else {
            Some(1.0)
        };
    }
    Ok(report)
}

/// Full scoring pipeline on an already computed stack.
pub fn score_stack(
    stack: &AttentionStack,
    alignment: &impl TokenAlignment,
    sel: &HeadSelector,
    cfg: &FilterConfig,
    model_id: &str,
) -> Result<WordScoreReport, ScoringError> {
    cfg.validate()?;
    let matrix = reduce_stack(stack, sel)?;
    let scores = token_scores(matrix.view())?;
    let mut report = word_scores(&scores, alignment)?;
    report.selector = *sel;
    report.model_id = model_id.to_string();
    normalize(apply_filters(report, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::Word;
    use ndarray::array;

    struct Align {
        text: String,
        tokens: Vec<String>,
        word_index: Vec<i32>,
        words: Vec<Word>,
    }

    impl TokenAlignment for Align {
        fn text(&self) -> &str {
            &self.text
        }
        fn tokens(&self) -> &[String] {
            &self.tokens
        }
        fn word_index(&self) -> &[i32] {
            &self.word_index
        }
        fn words(&self) -> &[Word] {
            &self.words
        }
    }

    fn tokenizing() -> Align {
        Align {
            text: "tokenizing".into(),
            tokens: ["<s>", "token", "izing", "</s>"].map(String::from).to_vec(),
            word_index: vec![-1, 0, 0, -1],
            words: vec![Word { text: "tokenizing".into(), start: 0, end: 10 }],
        }
    }

    fn report_with(raws: &[(f64, bool)]) -> WordScoreReport {
        WordScoreReport {
            entries: raws
                .iter()
                .enumerate()
                .map(|(i, &(raw, special))| WordEntry {
                    word: format!("w{i}"),
                    byte_span: (i, i + 1),
                    token_count: 1,
                    raw_score: raw,
                    norm_score: None,
                    filtered: false,
                    is_special: special,
                })
                .collect(),
            text: String::new(),
            selector: HeadSelector::ALL,
            filter_config: FilterConfig::none(),
            score_axis: ScoreAxis::Received,
            model_id: String::new(),
        }
    }

    #[test]
    fn selector_rejects_head_without_layer() {
        assert!(HeadSelector::new(None, Some(0)).is_err());
        assert_eq!(HeadSelector::new(Some(1), Some(0)).unwrap(), HeadSelector::head(1, 0));
    }

    #[test]
    fn selector_bounds() {
        let stack = AttentionStack::from_vec(2, 2, 1, vec![1.0; 4]).unwrap();
        assert!(reduce_stack(&stack, &HeadSelector::layer(2)).is_err());
        assert!(reduce_stack(&stack, &HeadSelector::head(1, 2)).is_err());
        assert!(reduce_stack(&stack, &HeadSelector::head(1, 1)).is_ok());
    }

    #[test]
    fn single_matrix_reduces_to_itself() {
        let stack = AttentionStack::from_vec(1, 1, 2, vec![0.25, 0.75, 0.6, 0.4]).unwrap();
        let m = reduce_stack(&stack, &HeadSelector::ALL).unwrap();
        assert_eq!(m, array![[0.25f32 as f64, 0.75f32 as f64], [0.6f32 as f64, 0.4f32 as f64]]);
    }

    #[test]
    fn two_layer_mean() {
        let stack = AttentionStack::from_vec(2, 1, 2, vec![1.0, 0.0, 0.5, 0.5, 0.0, 1.0, 0.25, 0.75]).unwrap();
        let m = reduce_stack(&stack, &HeadSelector::ALL).unwrap();
        assert_eq!(m, array![[0.5, 0.5], [0.375, 0.625]]);
    }

    #[test]
    fn token_scores_are_column_means() {
        assert_eq!(token_scores(array![[1.0, 0.0], [0.5, 0.5]].view()).unwrap(), [0.75, 0.25]);
        let id = Array2::<f64>::eye(3);
        assert_eq!(token_scores(id.view()).unwrap(), [1.0 / 3.0; 3]);
        let uniform = Array2::<f64>::from_elem((4, 4), 0.25);
        assert_eq!(token_scores(uniform.view()).unwrap(), [0.25; 4]);
    }

    #[test]
    fn token_scores_reject_non_stochastic_rows() {
        let err = token_scores(array![[1.0, 0.0], [0.5, 0.6]].view()).unwrap_err();
        assert!(matches!(err, ScoringError::NotRowStochastic { row: 1, .. }));
    }

    #[test]
    fn word_takes_its_highest_token() {
        let r = word_scores(&[0.3, 0.05, 0.01, 0.2], &tokenizing()).unwrap();
        assert_eq!(r.entries.len(), 3);
        let w = &r.entries[1];
        assert_eq!((w.word.as_str(), w.raw_score, w.token_count), ("tokenizing", 0.05, 2));
        assert!(r.entries[0].is_special && r.entries[2].is_special);
        assert_eq!(r.entries[0].byte_span, (0, 0));
        assert_eq!(r.entries[2].byte_span, (10, 10));
    }

    #[test]
    fn word_scores_check_length() {
        assert_eq!(
            word_scores(&[0.5, 0.5], &tokenizing()).unwrap_err(),
            ScoringError::Shape { expected: 4, got: 2 }
        );
    }

    #[test]
    fn no_filters_is_identity() {
        let r = report_with(&[(0.4, true), (0.1, false), (0.5, false)]);
        assert_eq!(apply_filters(r.clone(), &FilterConfig::none()), r);
    }

    #[test]
    fn special_filter_flags_bos_eos() {
        let r = apply_filters(report_with(&[(0.4, true), (0.1, false), (0.5, true)]), &FilterConfig::without_special());
        let flags: Vec<_> = r.entries.iter().map(|e| e.filtered).collect();
        assert_eq!(flags, [true, false, true]);
    }

    #[test]
    fn punctuation_filter_matches_dots_only() {
        let cfg = FilterConfig { exclude_punctuation: true, ..FilterConfig::none() };
        assert!(cfg.excludes(".", false));
        assert!(!cfg.excludes("season", false));
        assert!(!cfg.excludes("season.", false));
    }

    #[test]
    fn stopword_filter_is_case_insensitive() {
        let cfg = FilterConfig { exclude_stopwords: true, ..FilterConfig::none() };
        assert!(cfg.excludes("The", false));
        assert!(!cfg.excludes("ferrari", false));
        assert_eq!(StopwordList::english().len(), 179);
    }

    #[test]
    fn empty_filter_sets_are_invalid_when_enabled() {
        let cfg = FilterConfig { exclude_punctuation: true, punctuation_set: BTreeSet::new(), ..FilterConfig::none() };
        assert!(cfg.validate().is_err());
        let cfg = FilterConfig {
            exclude_stopwords: true,
            stopwords: StopwordList::custom("empty", Vec::<String>::new()),
            ..FilterConfig::none()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn extra_stopwords_extend_label() {
        let list = StopwordList::english().extend(["Vettel", "the"]);
        assert_eq!(list.label(), "en-v1+1");
        assert!(list.contains("vettel"));
    }

    #[test]
    fn normalize_forces_endpoints() {
        let r = normalize(report_with(&[(0.2, false), (0.5, false), (0.8, false)])).unwrap();
        let norms: Vec<_> = r.entries.iter().map(|e| e.norm_score.unwrap()).collect();
        assert_eq!(norms[0], 0.0);
        assert!((norms[1] - 0.5).abs() < 1e-12);
        assert_eq!(norms[2], 1.0);
    }

    #[test]
    fn normalize_degenerate_range_is_full_intensity() {
        let r = normalize(report_with(&[(0.3, false), (0.3, false)])).unwrap();
        assert!(r.entries.iter().all(|e| e.norm_score == Some(1.0)));
    }

    #[test]
    fn normalize_ignores_filtered_entries() {
        let r = apply_filters(report_with(&[(0.9, true), (0.1, false), (0.3, false)]), &FilterConfig::without_special());
        let r = normalize(r).unwrap();
        let norms: Vec<_> = r.entries.iter().map(|e| e.norm_score).collect();
        assert_eq!(norms, [None, Some(0.0), Some(1.0)]);
    }

    #[test]
    fn normalize_needs_a_survivor() {
        let r = apply_filters(report_with(&[(0.9, true)]), &FilterConfig::without_special());
        assert_eq!(normalize(r).unwrap_err(), ScoringError::AllWordsFiltered);
    }
}
