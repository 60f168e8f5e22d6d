//! Heatmap output: standalone HTML, ANSI terminal text and canonical JSON.
//!
//! Color is a single red ramp whose opacity equals the normalized score.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scoring::{WordEntry, WordScoreReport};

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("precision must be between 1 and 8, got {0}")]
    Precision(u8),
    #[error("unknown format {0:?} (expected json, html or ansi)")]
    UnknownFormat(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Json,
    Html,
    Ansi,
}

impl FromStr for Format {
    type Err = RenderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(Self::Json),
            "html" => Ok(Self::Html),
            "ansi" => Ok(Self::Ansi),
            other => Err(RenderError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenderOptions {
    pub format: Format,
    /// Render filtered words in a neutral style (true) or leave them out.
    pub show_filtered: bool,
    /// Decimal places in tooltips, 1..=8.
    pub precision: u8,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { format: Format::Json, show_filtered: true, precision: 4 }
    }
}

impl RenderOptions {
    pub fn with_format(format: Format) -> Self {
        Self { format, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if (1..=8).contains(&self.precision) {
            Ok(())
        } else {
            Err(RenderError::Precision(self.precision))
        }
    }
}

/// `rgba(255, 0, 0, alpha)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rgba {
    pub r: u8,
    pub g: u8,
    pub b: u8,
    pub alpha: f64,
}

impl Rgba {
    pub const TRANSPARENT: Self = Self { r: 255, g: 0, b: 0, alpha: 0.0 };

    fn css(&self, precision: usize) -> String {
        format!("rgba({}, {}, {}, {:.*})", self.r, self.g, self.b, precision, self.alpha)
    }
}

/// A score outside `[0, 1]` was clamped.
#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("score {input} is outside [0, 1]; clamped")]
pub struct ClampWarning {
    pub input: f64,
    pub clamped: Rgba,
}

/// Linear red ramp: alpha equals the score.
pub fn color_for(norm_score: f64) -> Result<Rgba, ClampWarning> {
    let rgba = |alpha| Rgba { r: 255, g: 0, b: 0, alpha };
    if (0.0..=1.0).contains(&norm_score) {
        Ok(rgba(norm_score))
    } else {
        let clamped = rgba(if norm_score.is_nan() { 0.0 } else { norm_score.clamp(0.0, 1.0) });
        tracing::warn!(score = norm_score, "normalized score outside [0, 1]; clamping");
        Err(ClampWarning { input: norm_score, clamped })
    }
}

fn entry_color(entry: &WordEntry) -> Rgba {
    match entry.norm_score {
        Some(score) => color_for(score).unwrap_or_else(|w| w.clamped),
        None => Rgba::TRANSPARENT,
    }
}

pub fn render(report: &WordScoreReport, opts: &RenderOptions) -> Result<String, RenderError> {
    opts.validate()?;
    Ok(match opts.format {
        Format::Json => render_json(report),
        Format::Html => render_html(report, opts),
        Format::Ansi => render_ansi(report, opts),
    })
}

fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

fn filter_summary(report: &WordScoreReport) -> String {
    let cfg = &report.filter_config;
    let mut parts = Vec::new();
    if cfg.exclude_special {
        parts.push("special tokens".to_string());
    }
    if cfg.exclude_punctuation {
        let set: Vec<_> = cfg.punctuation_set.iter().map(String::as_str).collect();
        parts.push(format!("punctuation {{{}}}", set.join(" ")));
    }
    if cfg.exclude_stopwords {
        parts.push(format!("stop words ({})", cfg.stopwords.label()));
    }
    if parts.is_empty() {
        "none".into()
    } else {
        parts.join(", ")
    }
}

const HTML_STYLE: &str = "body{font-family:Georgia,serif;max-width:52em;margin:2em auto;line-height:1.9;color:#222}\
header{font-family:sans-serif;font-size:.85em;color:#555;border-bottom:1px solid #ddd;margin-bottom:1em;padding-bottom:.5em}\
.w{padding:.1em .05em;border-radius:.2em}\
.w:hover{outline:1px solid #900;cursor:crosshair}\
.filtered{color:#888}\
.special{font-family:monospace;font-size:.85em}";

/// A standalone HTML page with one `<span>` per word. Hovering a word shows
/// its normalized and raw score.
pub fn render_html(report: &WordScoreReport, opts: &RenderOptions) -> String {
    let precision = usize::from(opts.precision);
    let mut body = String::new();
    let mut cursor = 0usize;
    let mut first = true;
    for entry in &report.entries {
        let (start, end) = entry.byte_span;
        let visible = !entry.filtered || opts.show_filtered;
        if visible {
            if start > cursor {
                body.push_str(&escape_html(&report.text[cursor..start]));
            } else if !first && entry.is_special {
                body.push(' ');
            }
            let mut class = String::from("w");
            if entry.filtered {
                class.push_str(" filtered");
            }
            if entry.is_special {
                class.push_str(" special");
            }
            let (style, title) = match entry.norm_score {
                Some(norm) => (
                    format!(" style=\"background-color: {}\"", entry_color(entry).css(precision)),
                    format!(
                        "norm {norm:.precision$} | raw {:.precision$} | {} token{}",
                        entry.raw_score,
                        entry.token_count,
                        if entry.token_count == 1 { "" } else { "s" }
                    ),
                ),
                None => (String::new(), "filtered".to_string()),
            };
            let _ = write!(
                body,
                "<span class=\"{class}\"{style} title=\"{}\">{}</span>",
                escape_html(&title),
                escape_html(&entry.word)
            );
            if entry.is_special && first {
                body.push(' ');
            }
            first = false;
        }
        cursor = cursor.max(end);
    }

    let title = format!("{} | {}", report.model_id, report.selector);
    format!(
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n<title>{}</title>\n<style>{HTML_STYLE}</style>\n</head>\n<body>\n<header>model: {} &middot; {} &middot; filters: {} &middot; score: attention {}</header>\n<p class=\"heatmap\">{}</p>\n</body>\n</html>\n",
        escape_html(&title),
        escape_html(&report.model_id),
        escape_html(&report.selector.to_string()),
        escape_html(&filter_summary(report)),
        report.score_axis.as_str(),
        body,
    )
}

/// xterm-256 background colors from near-white to dark red.
pub const ANSI_RAMP: [u8; 8] = [231, 224, 217, 210, 203, 196, 160, 124];

/// `floor(norm · 8)`, clamped to `0..=7`.
pub fn ansi_bucket(norm_score: f64) -> usize {
    ((norm_score * 8.0).floor().max(0.0) as usize).min(7)
}

/// Words separated by single spaces, each on a background from [`ANSI_RAMP`].
pub fn render_ansi(report: &WordScoreReport, opts: &RenderOptions) -> String {
    let mut words = Vec::new();
    for entry in &report.entries {
        match entry.norm_score {
            Some(norm) => {
                let bucket = ansi_bucket(norm);
                let fg = if bucket >= 5 { 231 } else { 16 };
                words.push(format!("\x1b[38;5;{fg};48;5;{}m{}\x1b[0m", ANSI_RAMP[bucket], entry.word));
            }
            None if opts.show_filtered => words.push(entry.word.clone()),
            None => {}
        }
    }
    let mut out = words.join(" ");
    out.push('\n');
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorDoc {
    pub layer: Option<usize>,
    pub head: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiltersDoc {
    pub special: bool,
    pub punctuation: bool,
    pub punctuation_set: Vec<String>,
    pub stopwords: bool,
    pub stopword_list: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordDoc {
    pub text: String,
    pub start: usize,
    pub end: usize,
    pub token_count: usize,
    pub raw: f64,
    pub norm: Option<f64>,
    pub filtered: bool,
    pub special: bool,
}

/// The canonical machine-readable report, shared with the HTTP service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub model_id: String,
    pub selector: SelectorDoc,
    pub filters: FiltersDoc,
    pub score_axis: String,
    pub words: Vec<WordDoc>,
}

impl From<&WordScoreReport> for ReportDocument {
    fn from(r: &WordScoreReport) -> Self {
        let cfg = &r.filter_config;
        Self {
            model_id: r.model_id.clone(),
            selector: SelectorDoc { layer: r.selector.layer_index(), head: r.selector.head_index() },
            filters: FiltersDoc {
                special: cfg.exclude_special,
                punctuation: cfg.exclude_punctuation,
                punctuation_set: cfg.punctuation_set.iter().cloned().collect(),
                stopwords: cfg.exclude_stopwords,
                stopword_list: cfg.stopwords.label().to_string(),
            },
            score_axis: r.score_axis.as_str().to_string(),
            words: r
                .entries
                .iter()
                .map(|e| WordDoc {
                    text: e.word.clone(),
                    start: e.byte_span.0,
                    end: e.byte_span.1,
                    token_count: e.token_count,
                    raw: e.raw_score,
                    norm: e.norm_score,
                    filtered: e.filtered,
                    special: e.is_special,
                })
                .collect(),
        }
    }
}

/// Serializes any value with object keys sorted at every level and floats in
/// shortest round-trip form.
pub fn to_canonical_json<T: Serialize>(value: &T) -> String {
    let value = serde_json::to_value(value).expect("report values serialize");
    let mut out = String::new();
    write_canonical(&value, &mut out);
    out
}

fn write_canonical(value: &serde_json::Value, out: &mut String) {
    use serde_json::Value;
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(key).expect("string serializes"));
                out.push(':');
                write_canonical(&map[key], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        scalar => out.push_str(&scalar.to_string()),
    }
}

pub fn render_json(report: &WordScoreReport) -> String {
    to_canonical_json(&ReportDocument::from(report))
}
