use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use attnlens::fixture;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_attnlens"));
    cmd.env_remove("ATTNLENS_MODEL_DIR").env_remove("ATTNLENS_PORT");
    cmd
}

fn model_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fixture::write_model_dir(dir.path(), &fixture::tiny_config(), 7).unwrap();
    dir
}

fn run(model: &Path, args: &[&str]) -> Output {
    bin().arg(args[0]).arg("--model-dir").arg(model).args(&args[1..]).output().unwrap()
}

#[test]
fn exit_codes() {
    let m = model_dir();
    assert_eq!(run(m.path(), &["analyze", "--text", "hello world"]).status.code(), Some(0));
    assert_eq!(run(m.path(), &["analyze", "--text", "the a of", "--filter-stopwords"]).status.code(), Some(3));
    assert_eq!(run(m.path(), &["analyze", "--text", "hi", "--layer", "2"]).status.code(), Some(2));
    assert_eq!(run(m.path(), &["analyze", "--text", "  "]).status.code(), Some(2));
    assert_eq!(run(m.path(), &["analyze", "--file", "/definitely/missing.txt"]).status.code(), Some(2));
    assert_eq!(run(m.path(), &["analyze", "--text", "hi", "--format", "pdf"]).status.code(), Some(2));
    let missing = bin().args(["analyze", "--text", "hi", "--model-dir", "/definitely/missing"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn model_dir_from_environment_and_out_file() {
    let m = model_dir();
    let out = m.path().join("report.html");
    let status = bin()
        .env("ATTNLENS_MODEL_DIR", m.path())
        .args(["analyze", "--text", "the win", "--format", "html", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(std::fs::read_to_string(out).unwrap().starts_with("<!DOCTYPE html>"));
}

#[test]
fn keep_special_overrides_the_default() {
    let m = model_dir();
    let default = run(m.path(), &["analyze", "--text", "hello world"]).stdout;
    let explicit = run(m.path(), &["analyze", "--text", "hello world", "--no-special"]).stdout;
    let kept = run(m.path(), &["analyze", "--text", "hello world", "--keep-special"]).stdout;
    assert_eq!(default, explicit);
    let doc: serde_json::Value = serde_json::from_slice(&kept).unwrap();
    assert_eq!(doc["filters"]["special"], false);
    assert!(doc["words"].as_array().unwrap().iter().all(|w| w["filtered"] == false));
}

#[test]
fn inspect_heads_matches_single_head_analysis() {
    let m = model_dir();
    let text_file = m.path().join("article.txt");
    std::fs::write(&text_file, attnlens::SAMPLE_TEXT).unwrap();
    let out_dir = m.path().join("heads");
    let text_arg = text_file.to_str().unwrap();
    let out = run(m.path(), &["inspect-heads", "--file", text_arg, "--layer", "1", "--out-dir", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let mut names: Vec<String> =
        std::fs::read_dir(&out_dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["head_00.html", "head_01.html", "index.html"]);
    for h in 0..2 {
        let single = run(m.path(), &["analyze", "--file", text_arg, "--layer", "1", "--head", &h.to_string(), "--format", "html"]);
        let file = std::fs::read(out_dir.join(format!("head_{h:02}.html"))).unwrap();
        assert_eq!(file, single.stdout, "head {h}");
    }

    let bad = run(m.path(), &["inspect-heads", "--text", "x", "--layer", "2", "--out-dir", out_dir.to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn dump_replays_to_the_same_report() {
    let m = model_dir();
    let dump = m.path().join("sample.attn");
    let text = "vettel said the win allowed ferrari to revive a tradition.";
    assert!(run(m.path(), &["dump-attention", "--text", text, "--out", dump.to_str().unwrap()]).status.success());

    let (alignment, stack) = attnlens::dump::read_dump_file(&dump).unwrap();
    let (tokens, live) = attnlens::Analyzer::load_dir(m.path()).unwrap().attention(text).unwrap();
    assert_eq!(stack, live);
    assert_eq!(alignment.tokens, tokens.tokens);

    for extra in [&[][..], &["--layer", "0"], &["--layer", "1", "--head", "1", "--filter-punct"]] {
        let mut live_args = vec!["analyze", "--text", text];
        live_args.extend_from_slice(extra);
        let mut dump_args = vec!["analyze", "--dump", dump.to_str().unwrap()];
        dump_args.extend_from_slice(extra);
        assert_eq!(run(m.path(), &live_args).stdout, run(m.path(), &dump_args).stdout);
    }
}

fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[test]
fn serve_starts_and_reports_errors() {
    let m = model_dir();
    let port = free_port();
    let mut child = bin()
        .args(["serve", "--port", &port.to_string(), "--model-dir"])
        .arg(m.path())
        .stderr(std::process::Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(10);
    let body = loop {
        match reqwest::blocking::get(format!("http://127.0.0.1:{port}/api/health")) {
            Ok(resp) => break resp.text().unwrap(),
            Err(_) if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(50)),
            Err(e) => panic!("server never came up: {e}"),
        }
    };
    assert_eq!(body, "ok");

    let busy = bin().args(["serve", "--port", &port.to_string(), "--model-dir"]).arg(m.path()).output().unwrap();
    assert_eq!(busy.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&busy.stderr).contains("already in use"));
    child.kill().unwrap();
    child.wait().unwrap();

    let bad = bin().args(["serve", "--port", &free_port().to_string(), "--model-dir", "/definitely/missing"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
}
