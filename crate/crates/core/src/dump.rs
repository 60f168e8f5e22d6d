//! Attention dumps: one text's tokens, word map and full attention stack in a
//! single portable file, so externally computed attention can be scored
//! without re-tokenizing.
//!
//! Layout: ASCII magic `ATTNDUMP`, little-endian u64 header length, JSON
//! header `{l, h, n, tokens, word_index, words: [{text, start, end}], text}`,
//! then `l·h·n·n` little-endian f32 in `[l][h][i][j]` order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{AttentionStack, RowViolation};
use crate::container::{f32s_to_le_bytes, le_bytes_to_f32s, read_framed, write_framed, ContainerError};
use crate::tokenizer::{TokenAlignment, Word, SPECIAL_WORD};

pub const DUMP_MAGIC: &[u8; 8] = b"ATTNDUMP";

/// Row-sum slack accepted when reading a dump.
pub const DUMP_ROW_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("malformed attention dump: {0}")]
    Format(String),
    #[error("attention dump is not row-stochastic: {0}")]
    InvalidAttention(#[from] RowViolation),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<ContainerError> for DumpError {
    fn from(e: ContainerError) -> Self {
        match e {
            ContainerError::Io(io) if io.kind() != std::io::ErrorKind::UnexpectedEof => Self::Io(io),
            other => Self::Format(other.to_string()),
        }
    }
}

/// Token and word metadata carried by a dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpAlignment {
    pub text: String,
    pub tokens: Vec<String>,
    pub word_index: Vec<i32>,
    pub words: Vec<Word>,
}

impl DumpAlignment {
    pub fn from_alignment(a: &impl TokenAlignment) -> Self {
        Self {
            text: a.text().to_string(),
            tokens: a.tokens().to_vec(),
            word_index: a.word_index().to_vec(),
            words: a.words().to_vec(),
        }
    }
}

impl TokenAlignment for DumpAlignment {
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

#[derive(Serialize, Deserialize)]
struct DumpHeader {
    l: usize,
    h: usize,
    n: usize,
    tokens: Vec<String>,
    word_index: Vec<i32>,
    words: Vec<Word>,
    text: String,
}

pub fn write_dump<W: Write>(w: W, alignment: &impl TokenAlignment, stack: &AttentionStack) -> Result<(), DumpError> {
    if alignment.tokens().len() != stack.len() {
        return Err(DumpError::Format(format!(
            "alignment has {} tokens but the stack has N = {}",
            alignment.tokens().len(),
            stack.len()
        )));
    }
    let header = DumpHeader {
        l: stack.layers(),
        h: stack.heads(),
        n: stack.len(),
        tokens: alignment.tokens().to_vec(),
        word_index: alignment.word_index().to_vec(),
        words: alignment.words().to_vec(),
        text: alignment.text().to_string(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| DumpError::Format(e.to_string()))?;
    write_framed(w, DUMP_MAGIC, &header, &f32s_to_le_bytes(stack.values().as_slice().expect("standard layout")))?;
    Ok(())
}

pub fn write_dump_file(
    path: impl AsRef<Path>,
    alignment: &impl TokenAlignment,
    stack: &AttentionStack,
) -> Result<(), DumpError> {
    let file = std::fs::File::create(path)?;
    write_dump(std::io::BufWriter::new(file), alignment, stack)
}

pub fn read_dump<R: Read>(r: R) -> Result<(DumpAlignment, AttentionStack), DumpError> {
    let (header, payload) = read_framed(r, DUMP_MAGIC)?;
    let header: DumpHeader =
        serde_json::from_slice(&header).map_err(|e| DumpError::Format(format!("header: {e}")))?;
    let n = header.n;
    if header.tokens.len() != n {
        return Err(DumpError::Format(format!("header says n = {n} but lists {} tokens", header.tokens.len())));
    }
    if header.word_index.len() != n {
        return Err(DumpError::Format(format!(
            "header says n = {n} but lists {} word indices",
            header.word_index.len()
        )));
    }
    if let Some(&bad) = header
        .word_index
        .iter()
        .find(|&&w| w != SPECIAL_WORD && (w < 0 || w as usize >= header.words.len()))
    {
        return Err(DumpError::Format(format!("word index {bad} does not name one of {} words", header.words.len())));
    }
    for word in &header.words {
        if word.start > word.end || header.text.get(word.start..word.end) != Some(word.text.as_str()) {
            return Err(DumpError::Format(format!(
                "word {:?} does not match text bytes {}..{}",
                word.text, word.start, word.end
            )));
        }
    }
    let expected = header
        .l
        .checked_mul(header.h)
        .and_then(|v| v.checked_mul(n))
        .and_then(|v| v.checked_mul(n))
        .and_then(|v| v.checked_mul(4));
    if expected != Some(payload.len()) {
        return Err(DumpError::Format(format!(
            "payload has {} bytes, expected 4·{}·{}·{n}·{n}",
            payload.len(),
            header.l,
            header.h
        )));
    }
    let stack = AttentionStack::from_vec(header.l, header.h, n, le_bytes_to_f32s(&payload))
        .expect("length checked above");
    stack.check_row_stochastic(DUMP_ROW_TOLERANCE)?;
    let alignment = DumpAlignment {
        text: header.text,
        tokens: header.tokens,
        word_index: header.word_index,
        words: header.words,
    };
    Ok((alignment, stack))
}

pub fn read_dump_file(path: impl AsRef<Path>) -> Result<(DumpAlignment, AttentionStack), DumpError> {
    let file = std::fs::File::open(path)?;
    read_dump(std::io::BufReader::new(file))
}
