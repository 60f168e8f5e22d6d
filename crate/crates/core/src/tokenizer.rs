//! Byte-level BPE tokenization with word alignment.
//!
//! Text is split into words on whitespace. A single ASCII space directly in
//! front of a word is folded into that word's first token (the `Ġ` convention
//! of byte-level vocabularies); any other whitespace is encoded as standalone
//! tokens owned by the neighbouring word. Every non-special token therefore
//! maps to exactly one word, which is what lets token scores be lifted to the
//! word level later on.
//!
//! Vocabularies load from the usual `vocab.json` + `merges.txt` pair, so
//! published byte-level BPE models work unmodified.

use std::collections::HashMap;
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = u32;

/// Conventional vocab file name inside a model directory.
pub const VOCAB_FILE: &str = "vocab.json";
/// Conventional merges file name inside a model directory.
pub const MERGES_FILE: &str = "merges.txt";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("failed to parse {what}: {message}")]
    Parse { what: &'static str, message: String },
    #[error("inconsistent vocabulary: {0}")]
    InconsistentVocab(String),
    #[error("input text is empty")]
    EmptyInput,
    #[error("unknown token id {0}")]
    UnknownToken(TokenId),
    #[error("vocabulary has no {0} token")]
    MissingSpecialToken(SpecialRole),
    #[error("no vocabulary entry for symbol {0:?} and no unknown token to fall back on")]
    UnencodableSymbol(String),
    #[error("max_len must be at least 2 (room for BOS and EOS), got {0}")]
    InvalidMaxLen(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Role of a special token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpecialRole {
    Bos,
    Eos,
    Pad,
    Unk,
}

impl SpecialRole {
    pub const ALL: [SpecialRole; 4] = [Self::Bos, Self::Eos, Self::Pad, Self::Unk];

    /// Token string used by RoBERTa-style vocabularies.
    pub fn default_token(self) -> &'static str {
        match self {
            Self::Bos => "<s>",
            Self::Eos => "</s>",
            Self::Pad => "<pad>",
            Self::Unk => "<unk>",
        }
    }
}

impl fmt::Display for SpecialRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Self::Bos => "bos",
            Self::Eos => "eos",
            Self::Pad => "pad",
            Self::Unk => "unk",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecialToken {
    pub token: String,
    pub id: TokenId,
}

/// The reversible byte → printable-character table used by byte-level BPE.
///
/// Printable Latin-1 bytes map to themselves; the remaining 68 bytes are
/// shifted into the range starting at U+0100, so a space becomes `Ġ`.
#[derive(Debug, Clone)]
pub struct ByteEncoder {
    encode: [char; 256],
    decode: HashMap<char, u8>,
}

impl ByteEncoder {
    pub fn new() -> Self {
        let mut encode = ['\0'; 256];
        let mut shifted = 0u32;
        for byte in 0..=255u8 {
            let printable = matches!(byte, b'!'..=b'~' | 0xA1..=0xAC | 0xAE..=0xFF);
            encode[byte as usize] = if printable {
                char::from(byte)
            } else {
                let c = char::from_u32(256 + shifted).expect("shifted code point is valid");
                shifted += 1;
                c
            };
        }
        let decode = encode.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        Self { encode, decode }
    }

    pub fn encode_byte(&self, byte: u8) -> char {
        self.encode[byte as usize]
    }

    pub fn decode_char(&self, c: char) -> Option<u8> {
        self.decode.get(&c).copied()
    }

    /// Maps a byte string to its printable form.
    pub fn encode_bytes(&self, bytes: &[u8]) -> String {
        bytes.iter().map(|&b| self.encode_byte(b)).collect()
    }
}

impl Default for ByteEncoder {
    fn default() -> Self {
        Self::new()
    }
}

/// An immutable byte-level BPE vocabulary: token table, ranked merges and
/// special tokens.
#[derive(Debug, Clone)]
pub struct BpeVocab {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
    merges: Vec<(String, String)>,
    // keyed by "left right"; encoded symbols never contain a raw space
    merge_ranks: HashMap<String, usize>,
    byte_encoder: ByteEncoder,
    special: HashMap<SpecialRole, SpecialToken>,
}

impl BpeVocab {
    /// Builds and validates a vocabulary. Special tokens are picked up under
    /// their conventional strings (`<s>`, `</s>`, `<pad>`, `<unk>`) when present.
    pub fn new(
        token_to_id: HashMap<String, TokenId>,
        merges: Vec<(String, String)>,
    ) -> Result<Self, TokenizerError> {
        let mut id_to_token = vec![None; token_to_id.len()];
        for (token, &id) in &token_to_id {
            let slot = id_to_token.get_mut(id as usize).ok_or_else(|| {
                TokenizerError::InconsistentVocab(format!(
                    "id {id} of {token:?} is outside the dense range 0..{}",
                    token_to_id.len()
                ))
            })?;
            if let Some(other) = slot.replace(token.clone()) {
                return Err(TokenizerError::InconsistentVocab(format!(
                    "duplicate id {id} for {other:?} and {token:?}"
                )));
            }
        }
        // injective + every id < len implies dense
        let id_to_token: Vec<String> = id_to_token.into_iter().map(Option::unwrap).collect();

        let mut merge_ranks = HashMap::with_capacity(merges.len());
        for (rank, (left, right)) in merges.iter().enumerate() {
            let merged = format!("{left}{right}");
            if !token_to_id.contains_key(&merged) {
                return Err(TokenizerError::InconsistentVocab(format!(
                    "merge ({left:?}, {right:?}) produces {merged:?}, which is not in the vocabulary"
                )));
            }
            merge_ranks.entry(format!("{left} {right}")).or_insert(rank);
        }

        let special = SpecialRole::ALL
            .iter()
            .filter_map(|&role| {
                let token = role.default_token();
                token_to_id.get(token).map(|&id| {
                    (role, SpecialToken { token: token.to_string(), id })
                })
            })
            .collect();

        Ok(Self {
            token_to_id,
            id_to_token,
            merges,
            merge_ranks,
            byte_encoder: ByteEncoder::new(),
            special,
        })
    }

    /// Parses a JSON `token → id` object and a merges list (one `left right`
    /// pair per line, optional leading `#` header line).
    pub fn load(vocab_source: impl Read, merges_source: impl Read) -> Result<Self, TokenizerError> {
        let token_to_id: HashMap<String, TokenId> = serde_json::from_reader(vocab_source)
            .map_err(|e| TokenizerError::Parse { what: "vocab", message: e.to_string() })?;
        let mut text = String::new();
        let mut merges_source = merges_source;
        merges_source.read_to_string(&mut text)?;
        Self::new(token_to_id, parse_merges(&text)?)
    }

    /// Loads `vocab.json` and `merges.txt` from a directory.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        let dir = dir.as_ref();
        let vocab = std::fs::File::open(dir.join(VOCAB_FILE))?;
        let merges = std::fs::File::open(dir.join(MERGES_FILE))?;
        Self::load(std::io::BufReader::new(vocab), std::io::BufReader::new(merges))
    }

    /// Overrides (or adds) the token used for a special role.
    pub fn set_special(&mut self, role: SpecialRole, token: &str) -> Result<(), TokenizerError> {
        let id = self.token_to_id.get(token).copied().ok_or_else(|| {
            TokenizerError::InconsistentVocab(format!("special token {token:?} is not in the vocabulary"))
        })?;
        self.special.insert(role, SpecialToken { token: token.to_string(), id });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn byte_encoder(&self) -> &ByteEncoder {
        &self.byte_encoder
    }

    pub fn token_id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn special(&self, role: SpecialRole) -> Option<&SpecialToken> {
        self.special.get(&role)
    }

    pub fn is_special_id(&self, id: TokenId) -> bool {
        self.special.values().any(|s| s.id == id)
    }

    fn require_special(&self, role: SpecialRole) -> Result<&SpecialToken, TokenizerError> {
        self.special(role).ok_or(TokenizerError::MissingSpecialToken(role))
    }

    /// Serializes the token table in `vocab.json` form (keys sorted by id).
    pub fn vocab_json(&self) -> String {
        let mut out = String::from("{");
        for (id, token) in self.id_to_token.iter().enumerate() {
            if id > 0 {
                out.push(',');
            }
            out.push_str(&serde_json::to_string(token).expect("string serializes"));
            out.push(':');
            out.push_str(&id.to_string());
        }
        out.push('}');
        out
    }

    /// Serializes the merges in `merges.txt` form, with a version header.
    pub fn merges_text(&self) -> String {
        let mut out = String::from("#version: 0.2\n");
        for (left, right) in &self.merges {
            out.push_str(left);
            out.push(' ');
            out.push_str(right);
            out.push('\n');
        }
        out
    }

    /// Tokenizes `text`, wrapping it in BOS/EOS and truncating to `max_len`
    /// tokens. When truncation happens the first `max_len - 1` tokens are kept
    /// and EOS is forced into the last slot.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<TokenizedText, TokenizerError> {
        if max_len < 2 {
            return Err(TokenizerError::InvalidMaxLen(max_len));
        }
        let bos = self.require_special(SpecialRole::Bos)?.clone();
        let eos = self.require_special(SpecialRole::Eos)?.clone();

        let word_spans = split_words(text);
        if word_spans.is_empty() {
            return Err(TokenizerError::EmptyInput);
        }

        let mut out = TokenizedText {
            text: text.to_string(),
            ids: vec![bos.id],
            tokens: vec![bos.token],
            spans: vec![(0, 0)],
            word_index: vec![SPECIAL_WORD],
            words: word_spans
                .iter()
                .map(|&(start, end)| Word { text: text[start..end].to_string(), start, end })
                .collect(),
        };

        let mut cursor = 0;
        for (w, &(start, end)) in word_spans.iter().enumerate() {
            let gap = &text[cursor..start];
            let (ws_end, word_from) = match gap.strip_suffix(' ') {
                Some(rest) => (cursor + rest.len(), start - 1),
                None => (start, start),
            };
            if ws_end > cursor {
                self.push_chunk(&mut out, text, cursor, ws_end, w, (start, end))?;
            }
            for piece in pretokenize(&text[word_from..end]) {
                self.push_chunk(&mut out, text, word_from + piece.start, word_from + piece.end, w, (start, end))?;
            }
            cursor = end;
        }
        if cursor < text.len() {
            let last = word_spans.len() - 1;
            self.push_chunk(&mut out, text, cursor, text.len(), last, word_spans[last])?;
        }

        out.ids.push(eos.id);
        out.tokens.push(eos.token);
        out.spans.push((text.len(), text.len()));
        out.word_index.push(SPECIAL_WORD);

        if out.len() > max_len {
            out.truncate(max_len);
        }
        Ok(out)
    }

    /// BPE-encodes `text[start..end]`, appending tokens owned by word `word`.
    fn push_chunk(
        &self,
        out: &mut TokenizedText,
        text: &str,
        start: usize,
        end: usize,
        word: usize,
        word_span: (usize, usize),
    ) -> Result<(), TokenizerError> {
        for (symbol, sym_start, sym_end) in self.bpe(&text.as_bytes()[start..end]) {
            let (id, token) = match self.token_to_id.get(&symbol) {
                Some(&id) => (id, symbol),
                None => {
                    let unk = self
                        .special(SpecialRole::Unk)
                        .ok_or_else(|| TokenizerError::UnencodableSymbol(symbol.clone()))?;
                    (unk.id, unk.token.clone())
                }
            };
            let clip = |pos: usize| pos.clamp(word_span.0, word_span.1);
            out.ids.push(id);
            out.tokens.push(token);
            out.spans.push((clip(start + sym_start), clip(start + sym_end)));
            out.word_index.push(word as i32);
        }
        Ok(())
    }

    /// Greedy lowest-rank merge loop over one pre-token. Returns the final
    /// symbols with their byte offsets relative to the chunk.
    fn bpe(&self, bytes: &[u8]) -> Vec<(String, usize, usize)> {
        let mut symbols: Vec<(String, usize, usize)> = bytes
            .iter()
            .enumerate()
            .map(|(i, &b)| (self.byte_encoder.encode_byte(b).to_string(), i, i + 1))
            .collect();

        let mut key = String::new();
        loop {
            let mut best: Option<(usize, &str, &str)> = None;
            for pair in symbols.windows(2) {
                key.clear();
                key.push_str(&pair[0].0);
                key.push(' ');
                key.push_str(&pair[1].0);
                if let Some(&rank) = self.merge_ranks.get(key.as_str()) {
                    if best.is_none_or(|(r, _, _)| rank < r) {
                        let (left, right) = &self.merges[rank];
                        best = Some((rank, left.as_str(), right.as_str()));
                    }
                }
            }
            let Some((_, left, right)) = best else { break };

            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i].0 == left && symbols[i + 1].0 == right {
                    let joined = format!("{}{}", symbols[i].0, symbols[i + 1].0);
                    merged.push((joined, symbols[i].1, symbols[i + 1].2));
                    i += 2;
                } else {
                    merged.push(symbols[i].clone());
                    i += 1;
                }
            }
            symbols = merged;
        }
        symbols
    }

    /// Inverse of [`encode`](Self::encode) on the non-special tokens.
    ///
    /// Byte sequences that do not form valid UTF-8 (possible only for id
    /// lists that did not come from `encode`) are decoded lossily.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String, TokenizerError> {
        let mut bytes = Vec::new();
        for &id in ids {
            let token = self.token(id).ok_or(TokenizerError::UnknownToken(id))?;
            if self.is_special_id(id) {
                continue;
            }
            for c in token.chars() {
                match self.byte_encoder.decode_char(c) {
                    Some(b) => bytes.push(b),
                    None => {
                        let mut buf = [0u8; 4];
                        bytes.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
                    }
                }
            }
        }
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }
}

fn parse_merges(text: &str) -> Result<Vec<(String, String)>, TokenizerError> {
    let mut merges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if (lineno == 0 && line.starts_with('#')) || line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(left), Some(right), None) if !left.is_empty() && !right.is_empty() => {
                merges.push((left.to_string(), right.to_string()));
            }
            _ => {
                return Err(TokenizerError::Parse {
                    what: "merges",
                    message: format!("line {}: expected \"left right\", got {line:?}", lineno + 1),
                })
            }
        }
    }
    Ok(merges)
}

/// Byte spans of maximal non-whitespace runs.
fn split_words(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

/// Splits a word (with its optional leading space) into pre-tokens using the
/// GPT-2 pattern, so contractions and punctuation get their own BPE runs.
fn pretokenize(word: &str) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    let re = PATTERN.get_or_init(|| {
        Regex::new(r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+")
            .expect("valid pre-tokenizer pattern")
    });
    // The pattern covers every non-whitespace char, so gaps cannot occur inside
    // a word; fill them anyway so no byte is ever dropped.
    let mut pieces = Vec::new();
    let mut cursor = 0;
    for m in re.find_iter(word) {
        if m.start() > cursor {
            pieces.push(cursor..m.start());
        }
        pieces.push(m.range());
        cursor = m.end();
    }
    if cursor < word.len() {
        pieces.push(cursor..word.len());
    }
    pieces.into_iter()
}

/// `word_index` value of BOS/EOS.
pub const SPECIAL_WORD: i32 = -1;

/// A whitespace-delimited word and its byte span in the source text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Word {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Read access to the token → word mapping of one analyzed text.
///
/// Implemented by [`TokenizedText`] and by the metadata carried in attention
/// dumps, so scoring works the same on both.
pub trait TokenAlignment {
    fn text(&self) -> &str;
    fn tokens(&self) -> &[String];
    fn word_index(&self) -> &[i32];
    fn words(&self) -> &[Word];
}

/// The tokenizer's output for one input text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedText {
    pub text: String,
    pub ids: Vec<TokenId>,
    pub tokens: Vec<String>,
    /// Half-open byte spans, clipped to the owning word's display span.
    pub spans: Vec<(usize, usize)>,
    pub word_index: Vec<i32>,
    pub words: Vec<Word>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Indices of the tokens belonging to word `w`.
    pub fn tokens_of_word(&self, w: usize) -> impl Iterator<Item = usize> + '_ {
        self.word_index.iter().enumerate().filter(move |(_, &wi)| wi == w as i32).map(|(i, _)| i)
    }

    fn truncate(&mut self, max_len: usize) {
        let eos = (
            self.ids.pop().expect("eos present"),
            self.tokens.pop().expect("eos present"),
            self.spans.pop().expect("eos present"),
            self.word_index.pop().expect("eos present"),
        );
        let keep = max_len - 1;
        self.ids.truncate(keep);
        self.tokens.truncate(keep);
        self.spans.truncate(keep);
        self.word_index.truncate(keep);

        let last_word = self.word_index.iter().copied().filter(|&w| w >= 0).max();
        match last_word {
            Some(w) => {
                let w = w as usize;
                self.words.truncate(w + 1);
                let end = self
                    .tokens_of_word(w)
                    .map(|i| self.spans[i].1)
                    .max()
                    .expect("word has tokens");
                let word = &mut self.words[w];
                word.end = end.max(word.start);
                word.text = self.text[word.start..word.end].to_string();
            }
            None => self.words.clear(),
        }

        let eos_pos = self.spans.last().map_or(0, |s| s.1);
        self.ids.push(eos.0);
        self.tokens.push(eos.1);
        self.spans.push((eos_pos, eos_pos));
        self.word_index.push(eos.3);
    }
}

impl TokenAlignment for TokenizedText {
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
