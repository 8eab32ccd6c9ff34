use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use referi::backend::synthetic::TaskKind;
use referi::engine::{BackwardMode, Engine, TaskInstance};
use referi::harness::attribution::token_attribution;
use referi::harness::config::{RandomConvention, RunConfig};
use referi::harness::dataset::{load_dataset, load_few_shot};
use referi::harness::eval::{eval_run, parse_selector, RunReport, MAX_FAILURE_RATE};
use referi::harness::open::open_backends;
use referi::harness::synth::{synth_task, SynthParams};
use referi::types::Candidate;

#[derive(Parser)]
#[command(name = "referi", version, about = "Few-shot guided best-of-K response selection")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Select among candidates for one query.
    Select(SelectArgs),
    /// Run selectors over a dataset and write a report.
    Eval(EvalArgs),
    /// Generate a synthetic suite.
    Synth(SynthArgs),
    /// Render the token attribution for one query of a report.
    Inspect(InspectArgs),
}

/// Settings shared by `select` and `eval`; each overrides the config file.
#[derive(Args)]
struct Common {
    /// TOML run config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Generator backend URL.
    #[arg(long, env = "REFERI_BASE_URL")]
    backend: Option<String>,
    /// Estimator backend URL (defaults to the generator).
    #[arg(long)]
    estimator: Option<String>,
    /// Embedding backend URL (defaults to the estimator).
    #[arg(long)]
    embedder: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    embedding_model: Option<String>,
    /// Backward mode: full, approx, forward (none) or backward.
    #[arg(long)]
    mode: Option<BackwardMode>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Response cache directory.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Record every backend response into fixture directories under DIR.
    #[arg(long)]
    record: Option<PathBuf>,
    #[arg(long)]
    concurrency: Option<usize>,
    /// Keep per-token scores (needed by `inspect`).
    #[arg(long)]
    retain_tokens: bool,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    few_shot: PathBuf,
    #[arg(long)]
    query: String,
    /// Candidates, one JSON string or `{"response": ...}` object per line;
    /// generated when omitted.
    #[arg(long)]
    candidates: Option<PathBuf>,
    /// referi, forward, backward, random, majority, cotwp or usc.
    #[arg(long, default_value = "referi")]
    selector: String,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    few_shot: PathBuf,
    /// Comma-separated selector names.
    #[arg(long, value_delimiter = ',')]
    selectors: Option<Vec<String>>,
    #[arg(long)]
    random_convention: Option<String>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    kind: TaskKind,
    #[arg(long, default_value_t = 200)]
    size: usize,
    #[arg(long, default_value_t = 2.0)]
    sigma: f64,
    #[arg(long, default_value_t = 1.5)]
    delta: f64,
    #[arg(long, default_value_t = 0.35)]
    p_correct: f64,
    #[arg(long, default_value_t = 4)]
    shots: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    query_id: String,
    /// HTML output; a `.txt` extension writes plain text instead.
    #[arg(long)]
    out: PathBuf,
    /// Few-shot file, to show example queries.
    #[arg(long)]
    few_shot: Option<PathBuf>,
}

fn run_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let b = &mut cfg.backends;
    if c.backend.is_some() {
        b.generator = c.backend.clone();
    }
    if c.estimator.is_some() {
        b.estimator = c.estimator.clone();
    }
    if c.embedder.is_some() {
        b.embedder = c.embedder.clone();
    }
    if c.model.is_some() {
        b.model = c.model.clone();
    }
    if c.embedding_model.is_some() {
        b.embedding_model = c.embedding_model.clone();
    }
    if c.cache.is_some() {
        b.cache = c.cache.clone();
    }
    if c.record.is_some() {
        b.record = c.record.clone();
    }
    let e = &mut cfg.engine;
    if let Some(m) = c.mode {
        e.backward_mode = m;
    }
    if let Some(k) = c.k {
        e.k = k;
    }
    if let Some(t) = c.temperature {
        e.temperature = t;
    }
    if c.seed.is_some() {
        e.seed = c.seed;
    }
    if let Some(n) = c.concurrency {
        e.max_concurrency = n;
    }
    e.retain_tokens |= c.retain_tokens;
    Ok(cfg)
}

fn read_candidates(path: &Path) -> Result<Vec<Candidate>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: serde_json::Value =
            serde_json::from_str(line).with_context(|| format!("{}: line {}", path.display(), n + 1))?;
        let response = match &v {
            serde_json::Value::String(s) => s.clone(),
            _ => v["response"]
                .as_str()
                .with_context(|| format!("{}: line {}: no response field", path.display(), n + 1))?
                .to_string(),
        };
        out.push(Candidate::new(out.len(), response)?);
    }
    if out.is_empty() {
        bail!("{}: no candidates", path.display());
    }
    Ok(out)
}

fn select(a: SelectArgs) -> Result<()> {
    let cfg = run_config(&a.common)?;
    let few_shot = load_few_shot(&a.few_shot)?;
    let opened = open_backends(&cfg.backends)?;
    let engine = Engine::new(cfg.engine.clone(), opened.backends.clone())?;
    let task = TaskInstance::new(few_shot, a.query);
    let candidates = match &a.candidates {
        Some(p) => read_candidates(p)?,
        None => engine.generate(&task, cfg.engine.seed)?,
    };
    let selector = parse_selector(&a.selector, cfg.engine.backward_mode, cfg.engine.seed.unwrap_or(0))?;
    let result = engine.select(selector, &task, &candidates)?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<bool> {
    let mut cfg = run_config(&a.common)?;
    if let Some(s) = a.selectors {
        cfg.eval.selectors = s;
    }
    if let Some(c) = a.random_convention {
        cfg.eval.random_convention = match c.as_str() {
            "averaged" => RandomConvention::Averaged,
            "single-draw" => RandomConvention::SingleDraw,
            other => bail!("unknown random convention {other:?}"),
        };
    }
    let records = load_dataset(&a.dataset)?;
    let few_shot = load_few_shot(&a.few_shot)?;
    let opened = open_backends(&cfg.backends)?;
    let (report, stats) = eval_run(&records, &few_shot, &cfg, &opened)?;
    report.write(&a.report, &stats)?;
    print!("{}", report.summary());
    println!(
        "# mean latency {:.1} ms/query, cache hit rate {:.3}",
        stats.mean_latency_ms, stats.cache_hit_rate
    );
    let rate = report.failure_rate();
    if rate > MAX_FAILURE_RATE {
        eprintln!("error: {:.1}% of queries failed", 100.0 * rate);
        return Ok(false);
    }
    Ok(true)
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut p = SynthParams::new(a.kind, a.size, a.sigma, a.delta, a.seed);
    p.p_correct = a.p_correct;
    p.shots = a.shots;
    let suite = synth_task(&p)?;
    suite.write(&a.out)?;
    println!(
        "wrote {} queries and {} demonstrations to {}",
        suite.dataset.len(),
        suite.few_shot.len(),
        a.out.display()
    );
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let report = RunReport::load(&a.report)?;
    let row = report
        .row(&a.query_id)
        .with_context(|| format!("no query {:?} in {}", a.query_id, a.report.display()))?;
    let attr = token_attribution(row)?;
    let few_shot = a.few_shot.as_ref().map(load_few_shot).transpose()?;
    let text = if a.out.extension().is_some_and(|e| e == "txt") {
        attr.render_text(few_shot.as_ref())
    } else {
        attr.render_html(few_shot.as_ref())
    };
    fs::write(&a.out, text).with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "{}: {} of {} tokens highlighted, red ratio {:.2}",
        a.out.display(),
        attr.highlighted(),
        attr.total_tokens(),
        attr.red_ratio()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let res = match Cli::parse().cmd {
        Cmd::Select(a) => select(a).map(|_| true),
        Cmd::Eval(a) => eval(a),
        Cmd::Synth(a) => synth(a).map(|_| true),
        Cmd::Inspect(a) => inspect(a).map(|_| true),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
