//! HTTP facade over an [`Analyzer`].
//!
//! One model per process, loaded before the listener is bound and never
//! mutated afterwards, so handlers share it through an `Arc` without locks.

use std::future::Future;
use std::path::PathBuf;
use std::sync::Arc;

use attnlens::render::{render_json, to_canonical_json};
use attnlens::{AnalysisError, Analyzer, FilterConfig, HeadSelector, ScoringError, StopwordList, TokenizerError};
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, HeaderName, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::TcpListener;
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

/// Default cap on the `text` field, in bytes.
pub const DEFAULT_TEXT_CAP: usize = 32 * 1024;

pub const MODEL_ID_HEADER: &str = "x-model-id";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub text_cap: usize,
    /// Origin allowed to call the API from a browser.
    pub cors_origin: Option<String>,
    /// Static files served under `/`.
    pub ui_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { text_cap: DEFAULT_TEXT_CAP, cors_origin: None, ui_dir: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalyzeRequest {
    pub text: String,
    #[serde(default)]
    pub layer: Option<usize>,
    #[serde(default)]
    pub head: Option<usize>,
    #[serde(default)]
    pub filters: FilterRequest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterRequest {
    #[serde(default = "default_true")]
    pub special: bool,
    #[serde(default)]
    pub punctuation: bool,
    #[serde(default)]
    pub stopwords: bool,
    #[serde(default)]
    pub extra_stopwords: Option<Vec<String>>,
}

fn default_true() -> bool {
    true
}

impl Default for FilterRequest {
    fn default() -> Self {
        Self { special: true, punctuation: false, stopwords: false, extra_stopwords: None }
    }
}

impl FilterRequest {
    pub fn to_config(&self) -> FilterConfig {
        let mut stopwords = StopwordList::english();
        if let Some(extra) = &self.extra_stopwords {
            stopwords = stopwords.extend(extra);
        }
        FilterConfig {
            exclude_special: self.special,
            exclude_punctuation: self.punctuation,
            exclude_stopwords: self.stopwords,
            stopwords,
            ..FilterConfig::none()
        }
    }
}

impl AnalyzeRequest {
    pub fn selector(&self) -> Result<HeadSelector, ScoringError> {
        HeadSelector::new(self.layer, self.head)
    }

    /// Validates and runs the request, returning the canonical JSON report.
    pub fn run(&self, analyzer: &Analyzer, text_cap: usize) -> Result<String, ApiError> {
        if self.text.len() > text_cap {
            return Err(ApiError::TextTooLong { len: self.text.len(), cap: text_cap });
        }
        let report = analyzer.analyze(&self.text, &self.selector()?, &self.filters.to_config())?;
        Ok(render_json(&report))
    }
}

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("malformed request: {0}")]
    BadRequest(String),
    #[error("text is {len} bytes, over the {cap} byte limit")]
    TextTooLong { len: usize, cap: usize },
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("internal error: {0}")]
    Internal(String),
}

impl From<ScoringError> for ApiError {
    fn from(e: ScoringError) -> Self {
        Self::Analysis(e.into())
    }
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            Self::BadRequest(_) => StatusCode::BAD_REQUEST,
            Self::TextTooLong { .. } => StatusCode::PAYLOAD_TOO_LARGE,
            Self::Analysis(AnalysisError::Scoring(ScoringError::AllWordsFiltered)) => StatusCode::UNPROCESSABLE_ENTITY,
            Self::Analysis(AnalysisError::Scoring(_) | AnalysisError::Tokenizer(_)) => StatusCode::BAD_REQUEST,
            Self::Analysis(_) | Self::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    /// Short machine-readable name for the error body.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::BadRequest(_) => "bad_request",
            Self::TextTooLong { .. } => "text_too_long",
            Self::Analysis(AnalysisError::Tokenizer(TokenizerError::EmptyInput)) => "empty_text",
            Self::Analysis(AnalysisError::Tokenizer(_)) => "tokenizer",
            Self::Analysis(AnalysisError::Scoring(ScoringError::AllWordsFiltered)) => "all_words_filtered",
            Self::Analysis(AnalysisError::Scoring(ScoringError::Selector(_))) => "selector",
            Self::Analysis(AnalysisError::Scoring(ScoringError::InvalidFilter(_))) => "invalid_filter",
            Self::Analysis(_) | Self::Internal(_) => "internal",
        }
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    message: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            tracing::error!(error = %self, "analysis failed");
        }
        let body = to_canonical_json(&ErrorBody { error: self.kind(), message: self.to_string() });
        (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
    }
}

#[derive(Serialize)]
pub struct ModelInfo {
    pub model_id: String,
    pub layers: usize,
    pub heads: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
}

impl ModelInfo {
    pub fn of(analyzer: &Analyzer) -> Self {
        let cfg = analyzer.model().config();
        Self {
            model_id: analyzer.model_id().to_string(),
            layers: cfg.num_layers,
            heads: cfg.num_heads,
            max_positions: cfg.max_positions,
            vocab_size: cfg.vocab_size,
        }
    }
}

#[derive(Clone)]
struct AppState {
    analyzer: Arc<Analyzer>,
    model_id: HeaderValue,
    model_json: Arc<str>,
    sample_json: Arc<str>,
    text_cap: usize,
}

/// Builds the application router.
pub fn router(analyzer: Arc<Analyzer>, config: &ServiceConfig) -> Router {
    let model_id = HeaderValue::from_str(analyzer.model_id()).unwrap_or_else(|_| HeaderValue::from_static("encoder"));
    let state = AppState {
        model_json: to_canonical_json(&ModelInfo::of(&analyzer)).into(),
        sample_json: to_canonical_json(&serde_json::json!({ "text": attnlens::SAMPLE_TEXT })).into(),
        analyzer,
        model_id,
        text_cap: config.text_cap,
    };
    // JSON escaping can blow a string up to six bytes per input byte.
    let body_limit = config.text_cap.saturating_mul(6).saturating_add(64 * 1024);

    let mut app = Router::new()
        .route("/api/analyze", post(analyze))
        .route("/api/model", get(model))
        .route("/api/sample", get(sample))
        .route("/api/health", get(|| async { "ok" }))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(state);
    if let Some(dir) = &config.ui_dir {
        app = app.fallback_service(ServeDir::new(dir));
    }
    if let Some(origin) = &config.cors_origin {
        match HeaderValue::from_str(origin) {
            Ok(origin) => {
                app = app.layer(
                    CorsLayer::new()
                        .allow_origin(origin)
                        .allow_methods([Method::GET, Method::POST])
                        .allow_headers([header::CONTENT_TYPE])
                        .expose_headers([HeaderName::from_static(MODEL_ID_HEADER)]),
                )
            }
            Err(_) => tracing::warn!(origin, "ignoring CORS origin that is not a valid header value"),
        }
    }
    app
}

/// Serves `app` until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    app: Router,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}

async fn analyze(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let request: AnalyzeRequest = serde_json::from_slice(&body).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let analyzer = state.analyzer.clone();
    let cap = state.text_cap;
    let json = tokio::task::spawn_blocking(move || request.run(&analyzer, cap))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok((
        [
            (header::CONTENT_TYPE, HeaderValue::from_static("application/json")),
            (HeaderName::from_static(MODEL_ID_HEADER), state.model_id),
        ],
        json,
    )
        .into_response())
}

async fn model(State(state): State<AppState>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], state.model_json.to_string()).into_response()
}

async fn sample(State(state): State<AppState>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], state.sample_json.to_string()).into_response()
}
