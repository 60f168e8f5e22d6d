//! Rendered output for a fixed model and input must not drift.
//! Regenerate with `UPDATE_GOLDEN=1 cargo test -p attnlens --test golden`.

use std::path::PathBuf;

use attnlens::render::{render, Format, RenderOptions};
use attnlens::{fixture, Analyzer, FilterConfig, HeadSelector, WordScoreReport};

const TEXT: &str = "the win allowed ferrari to revive a tradition. vettel said \"it's special\"";

fn report() -> WordScoreReport {
    let analyzer = Analyzer::new(fixture::random_model(fixture::tiny_config(), 7), fixture::tiny_vocab()).unwrap();
    let cfg = FilterConfig { exclude_special: true, exclude_stopwords: true, ..FilterConfig::none() };
    analyzer.analyze(TEXT, &HeadSelector::layer(1), &cfg).unwrap()
}

fn check(name: &str, actual: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e}; run with UPDATE_GOLDEN=1 to create it", path.display()));
    assert!(expected == actual, "{name} differs from the golden file");
}

#[test]
fn html() {
    check("report.html", &render(&report(), &RenderOptions::with_format(Format::Html)).unwrap());
}

#[test]
fn html_without_filtered_words() {
    let opts = RenderOptions { show_filtered: false, ..RenderOptions::with_format(Format::Html) };
    check("report_hidden.html", &render(&report(), &opts).unwrap());
}

#[test]
fn ansi() {
    check("report.ansi", &render(&report(), &RenderOptions::with_format(Format::Ansi)).unwrap());
}

#[test]
fn json() {
    check("report.json", &render(&report(), &RenderOptions::with_format(Format::Json)).unwrap());
}
