use std::fmt::Write as _;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use attnlens::dump::{read_dump_file, write_dump_file, DumpAlignment, DumpError};
use attnlens::render::{render, Format, RenderOptions};
use attnlens::{
    score_stack, AnalysisError, Analyzer, AttentionStack, FilterConfig, HeadSelector, ModelConfig, ScoringError,
    WordScoreReport,
};
use attnlens_service::{FilterRequest, ServiceConfig, DEFAULT_TEXT_CAP};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "attnlens", version, about = "Word importance heatmaps from encoder self-attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score one text and render the result.
    Analyze(AnalyzeArgs),
    /// Render one heatmap per head of a layer, plus an index page.
    InspectHeads(InspectArgs),
    /// Write the attention stack for a text to a dump file.
    DumpAttention(DumpArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Input {
    #[arg(long)]
    text: Option<String>,
    /// Read the text from a UTF-8 file.
    #[arg(long)]
    file: Option<PathBuf>,
    /// Score a previously written attention dump instead of running the model.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArg {
    /// Directory with config.json, model.tensors, vocab.json and merges.txt.
    #[arg(long, env = "ATTNLENS_MODEL_DIR")]
    model_dir: Option<PathBuf>,
}

#[derive(Args)]
struct Filters {
    /// Exclude BOS/EOS from normalization (the default).
    #[arg(long, overrides_with = "keep_special")]
    no_special: bool,
    /// Keep BOS/EOS in the heatmap.
    #[arg(long, overrides_with = "no_special")]
    keep_special: bool,
    /// Exclude punctuation-only words.
    #[arg(long)]
    filter_punct: bool,
    /// Exclude English stop words.
    #[arg(long)]
    filter_stopwords: bool,
    /// Additional stop word; repeatable.
    #[arg(long = "extra-stopword", value_name = "WORD")]
    extra_stopwords: Vec<String>,
}

impl Filters {
    fn request(&self) -> FilterRequest {
        FilterRequest {
            special: !self.keep_special,
            punctuation: self.filter_punct,
            stopwords: self.filter_stopwords,
            extra_stopwords: (!self.extra_stopwords.is_empty()).then(|| self.extra_stopwords.clone()),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Html,
    Ansi,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Json => Format::Json,
            FormatArg::Html => Format::Html,
            FormatArg::Ansi => Format::Ansi,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Received,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    input: Input,
    #[command(flatten)]
    model: ModelArg,
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, requires = "layer")]
    head: Option<usize>,
    #[command(flatten)]
    filters: Filters,
    #[arg(long, value_enum, default_value = "json")]
    format: FormatArg,
    /// Leave filtered words out of HTML and ANSI output.
    #[arg(long)]
    hide_filtered: bool,
    #[arg(long, value_enum, default_value = "received")]
    score_axis: AxisArg,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    input: Input,
    #[command(flatten)]
    model: ModelArg,
    #[arg(long)]
    layer: usize,
    #[command(flatten)]
    filters: Filters,
    #[arg(long)]
    hide_filtered: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
#[group(id = "dump_input", required = true, multiple = false)]
struct DumpInput {
    #[arg(long)]
    text: Option<String>,
    #[arg(long)]
    file: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    #[command(flatten)]
    input: DumpInput,
    #[command(flatten)]
    model: ModelArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long, env = "ATTNLENS_PORT", default_value_t = 7860)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    /// Static UI assets served under `/`.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
    /// Largest accepted text, in bytes.
    #[arg(long, default_value_t = DEFAULT_TEXT_CAP)]
    text_cap: usize,
    /// Browser origin allowed to call the API.
    #[arg(long)]
    cors_origin: Option<String>,
}

/// Bad user input; exits with status 2.
#[derive(Debug)]
struct InputError(String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

fn input_error(msg: impl Into<String>) -> anyhow::Error {
    InputError(msg.into()).into()
}

/// Context attached to model loading failures, which always exit with 1.
#[derive(Debug)]
struct ModelLoad(PathBuf);

impl std::fmt::Display for ModelLoad {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "loading model from {}", self.0.display())
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ModelLoad>().is_some() {
        return 1;
    }
    let scoring = |e: &ScoringError| if matches!(e, ScoringError::AllWordsFiltered) { 3 } else { 2 };
    for cause in err.chain() {
        if cause.is::<InputError>() || cause.is::<DumpError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<ScoringError>() {
            return scoring(e);
        }
        if let Some(e) = cause.downcast_ref::<AnalysisError>() {
            return match e {
                AnalysisError::Scoring(e) => scoring(e),
                AnalysisError::Tokenizer(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze(args) => analyze(args),
        Command::InspectHeads(args) => inspect_heads(args),
        Command::DumpAttention(args) => dump_attention(args),
        Command::Serve(args) => serve(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn model_dir(arg: &ModelArg) -> Result<&Path> {
    arg.model_dir
        .as_deref()
        .ok_or_else(|| input_error("no model directory; pass --model-dir or set ATTNLENS_MODEL_DIR"))
}

fn load_analyzer(arg: &ModelArg) -> Result<Analyzer> {
    let dir = model_dir(arg)?;
    Analyzer::load_dir(dir).context(ModelLoad(dir.to_path_buf()))
}

fn read_text(text: &Option<String>, file: &Option<PathBuf>) -> Result<Option<String>> {
    if let Some(text) = text {
        return Ok(Some(text.clone()));
    }
    let Some(path) = file else { return Ok(None) };
    let bytes = std::fs::read(path).map_err(|e| input_error(format!("reading {}: {e}", path.display())))?;
    String::from_utf8(bytes).map(Some).map_err(|_| input_error(format!("{} is not valid UTF-8", path.display())))
}

/// Attention for the chosen input, plus the model id to report.
struct Source {
    alignment: DumpAlignment,
    stack: AttentionStack,
    model_id: String,
}

fn load_source(input: &Input, model: &ModelArg) -> Result<Source> {
    if let Some(path) = &input.dump {
        let (alignment, stack) =
            read_dump_file(path).with_context(|| format!("reading attention dump {}", path.display()))?;
        // dumps carry no model name; borrow it from the config when one is given
        let model_id = match &model.model_dir {
            Some(dir) => ModelConfig::load_dir(dir)
                .with_context(|| format!("reading model config from {}", dir.display()))?
                .model_id()
                .to_string(),
            None => "dump".to_string(),
        };
        return Ok(Source { alignment, stack, model_id });
    }
    let text = read_text(&input.text, &input.file)?.expect("clap requires one input");
    let analyzer = load_analyzer(model)?;
    let (tokens, stack) = analyzer.attention(&text)?;
    Ok(Source { alignment: DumpAlignment::from_alignment(&tokens), stack, model_id: analyzer.model_id().to_string() })
}

fn score(source: &Source, sel: &HeadSelector, cfg: &FilterConfig) -> Result<WordScoreReport> {
    sel.check_bounds(source.stack.layers(), source.stack.heads())?;
    Ok(score_stack(&source.stack, &source.alignment, sel, cfg, &source.model_id)?)
}

fn write_output(out: Option<&Path>, content: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, content).with_context(|| format!("writing {}", path.display())),
        None => {
            use std::io::Write;
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(content.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let AxisArg::Received = args.score_axis;
    let sel = HeadSelector::new(args.layer, args.head)?;
    let cfg = args.filters.request().to_config();
    let report = score(&load_source(&args.input, &args.model)?, &sel, &cfg)?;
    let opts = RenderOptions { format: args.format.into(), show_filtered: !args.hide_filtered, ..RenderOptions::default() };
    write_output(args.out.as_deref(), &render(&report, &opts)?)
}

fn inspect_heads(args: InspectArgs) -> Result<()> {
    let source = load_source(&args.input, &args.model)?;
    HeadSelector::layer(args.layer).check_bounds(source.stack.layers(), source.stack.heads())?;
    let cfg = args.filters.request().to_config();
    let opts = RenderOptions { format: Format::Html, show_filtered: !args.hide_filtered, ..RenderOptions::default() };
    std::fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;

    let heads = source.stack.heads();
    let mut files = Vec::with_capacity(heads);
    for h in 0..heads {
        let report = score(&source, &HeadSelector::head(args.layer, h), &cfg)?;
        let name = format!("head_{h:02}.html");
        write_output(Some(&args.out_dir.join(&name)), &render(&report, &opts)?)?;
        files.push(name);
    }
    write_output(Some(&args.out_dir.join("index.html")), &index_page(&source.model_id, args.layer, &files))?;
    eprintln!("wrote {} head files and index.html to {}", heads, args.out_dir.display());
    Ok(())
}

fn index_page(model_id: &str, layer: usize, files: &[String]) -> String {
    let title = format!("{} | layer {layer}, {} heads", escape(model_id), files.len());
    let mut page = format!(
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n<title>{title}</title>\n\
         <style>body{{font-family:sans-serif;margin:1.5em}}.grid{{display:grid;grid-template-columns:repeat(auto-fill,minmax(28em,1fr));gap:1em}}\
         figure{{margin:0}}iframe{{width:100%;height:22em;border:1px solid #ccc}}</style>\n</head>\n<body>\n<h1>{title}</h1>\n<div class=\"grid\">\n"
    );
    for (h, file) in files.iter().enumerate() {
        let _ = writeln!(
            page,
            "<figure><figcaption><a href=\"{file}\">head {h}</a></figcaption><iframe src=\"{file}\" title=\"head {h}\"></iframe></figure>"
        );
    }
    page.push_str("</div>\n</body>\n</html>\n");
    page
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn dump_attention(args: DumpArgs) -> Result<()> {
    let text = read_text(&args.input.text, &args.input.file)?.expect("clap requires one input");
    let analyzer = load_analyzer(&args.model)?;
    let (tokens, stack) = analyzer.attention(&text)?;
    write_dump_file(&args.out, &tokens, &stack).with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!(
        "wrote {} ({} layers, {} heads, {} tokens)",
        args.out.display(),
        stack.layers(),
        stack.heads(),
        stack.len()
    );
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    if let Some(dir) = &args.ui_dir {
        if !dir.is_dir() {
            return Err(input_error(format!("--ui-dir {} is not a directory", dir.display())));
        }
    }
    let analyzer = Arc::new(load_analyzer(&args.model)?);
    let config = ServiceConfig { text_cap: args.text_cap, cors_origin: args.cors_origin, ui_dir: args.ui_dir };
    let addr = SocketAddr::new(args.host, args.port);

    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| {
            if e.kind() == std::io::ErrorKind::AddrInUse {
                anyhow::anyhow!("port {} is already in use on {}", addr.port(), addr.ip())
            } else {
                anyhow::Error::new(e).context(format!("binding {addr}"))
            }
        })?;
        tracing::info!(%addr, model = analyzer.model_id(), "listening");
        let app = attnlens_service::router(analyzer, &config);
        attnlens_service::serve(listener, app, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        Ok(())
    })
}
