use std::net::SocketAddr;
use std::sync::Arc;

use attnlens::render::render_json;
use attnlens::{fixture, Analyzer, FilterConfig, HeadSelector};
use attnlens_service::{router, serve, ServiceConfig};
use reqwest::StatusCode;
use serde_json::{json, Value};

struct Server {
    base: String,
    analyzer: Arc<Analyzer>,
    _dir: tempfile::TempDir,
}

async fn start(config: ServiceConfig) -> Server {
    let dir = tempfile::tempdir().unwrap();
    fixture::write_model_dir(dir.path(), &fixture::tiny_config(), 7).unwrap();
    let analyzer = Arc::new(Analyzer::load_dir(dir.path()).unwrap());
    let listener = tokio::net::TcpListener::bind(SocketAddr::from(([127, 0, 0, 1], 0))).await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let app = router(analyzer.clone(), &config);
    tokio::spawn(serve(listener, app, std::future::pending()));
    Server { base, analyzer, _dir: dir }
}

async fn post(server: &Server, body: impl Into<reqwest::Body>) -> reqwest::Response {
    reqwest::Client::new()
        .post(format!("{}/api/analyze", server.base))
        .header("content-type", "application/json")
        .body(body)
        .send()
        .await
        .unwrap()
}

async fn error_kind(resp: reqwest::Response) -> String {
    let v: Value = resp.json().await.unwrap();
    v["error"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn health_model_and_sample() {
    let s = start(ServiceConfig::default()).await;
    let health = reqwest::get(format!("{}/api/health", s.base)).await.unwrap();
    assert_eq!(health.status(), StatusCode::OK);
    assert_eq!(health.text().await.unwrap(), "ok");

    let first = reqwest::get(format!("{}/api/model", s.base)).await.unwrap().text().await.unwrap();
    let second = reqwest::get(format!("{}/api/model", s.base)).await.unwrap().text().await.unwrap();
    assert_eq!(first, second);
    let model: Value = serde_json::from_str(&first).unwrap();
    assert_eq!(
        model,
        json!({"model_id": "tiny-fixture", "layers": 2, "heads": 2, "max_positions": 64, "vocab_size": 300})
    );

    let sample: Value = reqwest::get(format!("{}/api/sample", s.base)).await.unwrap().json().await.unwrap();
    assert_eq!(sample["text"], attnlens::SAMPLE_TEXT);
}

#[tokio::test]
async fn analyze_matches_library_output() {
    let s = start(ServiceConfig::default()).await;
    let resp = post(&s, r#"{"text":"hello world","filters":{"special":true,"punctuation":false,"stopwords":false}}"#).await;
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["x-model-id"], "tiny-fixture");
    assert_eq!(resp.headers()["content-type"], "application/json");
    let body = resp.text().await.unwrap();

    let expected = s.analyzer.analyze("hello world", &HeadSelector::ALL, &FilterConfig::without_special()).unwrap();
    assert_eq!(body, render_json(&expected));
    let doc: Value = serde_json::from_str(&body).unwrap();
    let live = doc["words"].as_array().unwrap().iter().filter(|w| w["filtered"] == false).count();
    assert_eq!(live, 2);
}

#[tokio::test]
async fn omitted_filters_exclude_special_tokens_only() {
    let s = start(ServiceConfig::default()).await;
    let body = post(&s, r#"{"text":"the win. at ferrari","layer":1,"head":0}"#).await.text().await.unwrap();
    let expected = s.analyzer.analyze("the win. at ferrari", &HeadSelector::head(1, 0), &FilterConfig::without_special());
    assert_eq!(body, render_json(&expected.unwrap()));
}

#[tokio::test]
async fn request_errors_map_to_status_codes() {
    let s = start(ServiceConfig { text_cap: 100, ..ServiceConfig::default() }).await;
    let cases = [
        (r#"{"text":"#.to_string(), StatusCode::BAD_REQUEST, "bad_request"),
        (r#"{"layer":0}"#.to_string(), StatusCode::BAD_REQUEST, "bad_request"),
        (r#"{"text":"   "}"#.to_string(), StatusCode::BAD_REQUEST, "empty_text"),
        (r#"{"text":"hi","layer":99}"#.to_string(), StatusCode::BAD_REQUEST, "selector"),
        (r#"{"text":"hi","layer":0,"head":2}"#.to_string(), StatusCode::BAD_REQUEST, "selector"),
        (r#"{"text":"hi","head":1}"#.to_string(), StatusCode::BAD_REQUEST, "selector"),
        (
            r#"{"text":"the of and","filters":{"stopwords":true}}"#.to_string(),
            StatusCode::UNPROCESSABLE_ENTITY,
            "all_words_filtered",
        ),
        (json!({"text": "a".repeat(101)}).to_string(), StatusCode::PAYLOAD_TOO_LARGE, "text_too_long"),
    ];
    for (body, status, kind) in cases {
        let resp = post(&s, body.clone()).await;
        assert_eq!(resp.status(), status, "{body}");
        assert_eq!(error_kind(resp).await, kind, "{body}");
    }
    let at_cap = post(&s, json!({"text": "a".repeat(100)}).to_string()).await;
    assert_eq!(at_cap.status(), StatusCode::OK);
}

#[tokio::test]
async fn extra_stopwords_extend_the_list() {
    let s = start(ServiceConfig::default()).await;
    let body = post(&s, r#"{"text":"the win at ferrari","filters":{"stopwords":true,"extra_stopwords":["Ferrari"]}}"#)
        .await
        .text()
        .await
        .unwrap();
    let doc: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(doc["filters"]["stopword_list"], "en-v1+1");
    let live: Vec<&str> = doc["words"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|w| w["filtered"] == false)
        .map(|w| w["text"].as_str().unwrap())
        .collect();
    assert_eq!(live, ["win"]);
}

#[tokio::test]
async fn parallel_identical_requests_get_identical_bodies() {
    let s = Arc::new(start(ServiceConfig::default()).await);
    let body = json!({"text": attnlens::SAMPLE_TEXT, "layer": 0, "filters": {"punctuation": true}}).to_string();
    let handles: Vec<_> = (0..16)
        .map(|_| {
            let s = s.clone();
            let body = body.clone();
            tokio::spawn(async move { post(&s, body).await.text().await.unwrap() })
        })
        .collect();
    let mut bodies = Vec::new();
    for h in handles {
        bodies.push(h.await.unwrap());
    }
    assert!(bodies.windows(2).all(|p| p[0] == p[1]));

    // order independence: an unrelated request in between changes nothing
    post(&s, r#"{"text":"something else entirely"}"#).await;
    assert_eq!(post(&s, body).await.text().await.unwrap(), bodies[0]);
}

#[tokio::test]
async fn cors_and_static_ui() {
    let ui = tempfile::tempdir().unwrap();
    std::fs::write(ui.path().join("index.html"), "<html>ui</html>").unwrap();
    let s = start(ServiceConfig {
        cors_origin: Some("http://localhost:5173".into()),
        ui_dir: Some(ui.path().to_path_buf()),
        ..ServiceConfig::default()
    })
    .await;

    let page = reqwest::get(format!("{}/", s.base)).await.unwrap();
    assert_eq!(page.status(), StatusCode::OK);
    assert_eq!(page.text().await.unwrap(), "<html>ui</html>");

    let resp = reqwest::Client::new()
        .get(format!("{}/api/health", s.base))
        .header("origin", "http://localhost:5173")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "http://localhost:5173");
}
