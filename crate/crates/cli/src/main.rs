//! `keco`: build, optimize, inspect and evaluate key-based coresets.
//!
//! Exit codes: 0 success, 2 validation/config error, 3 I/O or format error,
//! 4 internal invariant violation.

mod config;

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use keco::engine::{self, StreamConfig, TargetStrategy, UpdateConfig};
use keco::eval::{self, Condition, ExperimentSpec, SweepPoint, SyntheticSpec};
use keco::init::{self, InfoScores, InitSpec, InitStrategy, KcenterMetric};
use keco::retrieval::{self, DemoOrder, PromptOptions, Similarity};
use keco::{fsio, Coreset, EmbeddingPack, ErrorKind, KecoError, PackFormat};
use serde_json::json;

use config::KvConfig;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }
}

impl From<KecoError> for CliError {
    fn from(e: KecoError) -> Self {
        let code = match e.kind() {
            ErrorKind::Validation => 2,
            ErrorKind::Io => 3,
            ErrorKind::Internal => 4,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "keco", version, about = "Key-based coreset construction and demonstration retrieval")]
struct Cli {
    /// key = value file supplying defaults for any long flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (falls back to KECO_THREADS). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an initial class-balanced coreset from a support pack.
    Init(InitArgs),
    /// Optimize coreset keys with mini-batch updates over untapped samples.
    Update(UpdateArgs),
    /// Build and optimize a coreset from a sample stream in one pass.
    Stream(StreamArgs),
    /// Top-k retrieval for every record of a query pack.
    Retrieve(RetrieveArgs),
    /// Emit multiple-choice in-context prompts as JSONL.
    Prompts(PromptsArgs),
    /// Evaluate baselines and KeCO variants with a k-NN proxy.
    Eval(EvalArgs),
    /// Dispersion statistics and key projections for a snapshot.
    Stats(StatsArgs),
    /// Repeat `eval` along one hyperparameter axis.
    Sweep(SweepArgs),
    /// Generate a seeded synthetic support/test pack pair.
    Synth(SynthArgs),
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    pack: Option<PathBuf>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    allow_uneven: bool,
    #[arg(long)]
    kcenter_metric: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct UpdateArgs {
    #[arg(long)]
    coreset: Option<PathBuf>,
    /// Untapped pack; records whose ids are coreset sources are skipped.
    #[arg(long)]
    pack: Option<PathBuf>,
    #[arg(long)]
    select: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_reshuffle: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct StreamArgs {
    #[arg(long)]
    pack_stream: Option<PathBuf>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    select: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    allow_uneven: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    coreset: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    order: Option<String>,
    #[arg(long)]
    similarity: Option<String>,
    /// JSONL output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PromptsArgs {
    #[arg(long)]
    coreset: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    order: Option<String>,
    #[arg(long)]
    similarity: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct EvalArgs {
    #[arg(long)]
    support: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    /// Coreset size m.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    init_strategy: Option<String>,
    #[arg(long)]
    init_seed: Option<u64>,
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    allow_uneven: bool,
    #[arg(long)]
    kcenter_metric: Option<String>,
    /// Condition to run (repeatable): fs-ic, fs-is, keco-rs, keco-ss, keco-ds.
    #[arg(long = "baseline")]
    baselines: Vec<String>,
    #[arg(long)]
    shots: Vec<usize>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_reshuffle: bool,
    /// Untapped samples kept per coreset entry.
    #[arg(long)]
    ratio: Option<usize>,
    #[arg(long)]
    similarity: Option<String>,
    /// Machine-readable results (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    coreset: Option<PathBuf>,
    /// Per-key 2-D PCA projection CSV; per-class dispersion goes to
    /// `<stem>.dispersion.csv` alongside it.
    #[arg(long)]
    emit_csv: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// alpha | epochs | batch | ratio | coreset-size | epochs-batch
    #[arg(long)]
    axis: Option<String>,
    /// Comma-separated values; epochs-batch takes EPOCHSxBATCH pairs.
    #[arg(long)]
    values: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    support_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    center_scale: Option<f64>,
    #[arg(long)]
    noise_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// jsonl | binary
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    out_support: Option<PathBuf>,
    #[arg(long)]
    out_test: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("keco: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = match &cli.config {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    };
    let threads = match cli.threads {
        Some(n) => Some(n),
        None => std::env::var("KECO_THREADS").ok().and_then(|v| v.parse().ok()),
    };
    if let Some(n) = threads.filter(|&n| n > 0) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError { code: 4, message: e.to_string() })?;
    }
    match cli.command {
        Command::Init(a) => cmd_init(a, &cfg),
        Command::Update(a) => cmd_update(a, &cfg),
        Command::Stream(a) => cmd_stream(a, &cfg),
        Command::Retrieve(a) => cmd_retrieve(a, &cfg),
        Command::Prompts(a) => cmd_prompts(a, &cfg),
        Command::Eval(a) => cmd_eval(a, &cfg),
        Command::Stats(a) => cmd_stats(a, &cfg),
        Command::Sweep(a) => cmd_sweep(a, &cfg),
        Command::Synth(a) => cmd_synth(a, &cfg),
    }
}

fn parse<T: std::str::FromStr<Err = KecoError>>(s: &str) -> CliResult<T> {
    Ok(s.parse::<T>()?)
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn print_json(v: &serde_json::Value) {
    emit(&format!("{}\n", serde_json::to_string_pretty(v).expect("json")));
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(v).expect("json");
    text.push('\n');
    Ok(fsio::atomic_write(path, text.as_bytes())?)
}

fn load_scores(path: Option<&PathBuf>) -> CliResult<Option<InfoScores>> {
    Ok(path.map(InfoScores::load).transpose()?)
}

fn cmd_init(a: InitArgs, cfg: &KvConfig) -> CliResult<()> {
    let pack_path: PathBuf = cfg.required(a.pack, "pack")?;
    let size: usize = cfg.required(a.size, "size")?;
    let strategy: InitStrategy = parse(&cfg.or(a.strategy, "strategy", "random".into())?)?;
    let scores_path: Option<PathBuf> = cfg.opt(a.scores, "scores")?;
    if strategy == InitStrategy::Infoscore && scores_path.is_none() {
        return Err(CliError::validation(
            "strategy infoscore requires --scores (contribution matrix or totals file)",
        ));
    }
    let out: PathBuf = cfg.required(a.out, "out")?;
    let spec = InitSpec {
        strategy,
        coreset_size: size,
        seed: cfg.or(a.seed, "seed", 0)?,
        allow_uneven: cfg.switch(a.allow_uneven, "allow-uneven")?,
        kcenter_metric: parse::<KcenterMetric>(&cfg.or(a.kcenter_metric, "kcenter-metric", "euclidean".into())?)?,
    };
    let pack = EmbeddingPack::load(&pack_path)?;
    let scores = load_scores(scores_path.as_ref())?;
    let coreset = init::initialize(&pack, &spec, scores.as_ref())?;
    coreset.save_snapshot(&out)?;
    print_json(&json!({
        "command": "init",
        "config": spec,
        "pack": pack_path,
        "out": out,
        "entries": coreset.len(),
        "class_counts": coreset.class_counts(),
        "shortfall": coreset.shortfall(),
    }));
    Ok(())
}

fn update_config(
    cfg: &KvConfig,
    select: Option<String>,
    alpha: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    seed: Option<u64>,
    no_reshuffle: bool,
) -> CliResult<UpdateConfig> {
    let d = UpdateConfig::default();
    let c = UpdateConfig {
        alpha: cfg.or(alpha, "alpha", d.alpha)?,
        epochs: cfg.or(epochs, "epochs", d.epochs)?,
        batch_size: cfg.or(batch_size, "batch-size", d.batch_size)?,
        strategy: parse::<TargetStrategy>(&cfg.or(select, "select", d.strategy.to_string())?)?,
        seed: cfg.or(seed, "seed", d.seed)?,
        reshuffle_each_epoch: !cfg.switch(no_reshuffle, "no-reshuffle")?,
    };
    c.validate()?;
    Ok(c)
}

/// Records of `pack` that are not already coreset sources.
fn untapped_from(pack: &EmbeddingPack, coreset: &Coreset) -> EmbeddingPack {
    let sources: HashSet<&str> = coreset.source_ids().collect();
    let keep: Vec<usize> = (0..pack.len())
        .filter(|&i| !sources.contains(pack.record(i).id.as_str()))
        .collect();
    pack.select(&keep)
}

fn cmd_update(a: UpdateArgs, cfg: &KvConfig) -> CliResult<()> {
    let config = update_config(cfg, a.select, a.alpha, a.epochs, a.batch_size, a.seed, a.no_reshuffle)?;
    let coreset_path: PathBuf = cfg.required(a.coreset, "coreset")?;
    let pack_path: PathBuf = cfg.required(a.pack, "pack")?;
    let out: PathBuf = cfg.required(a.out, "out")?;
    let report_path: Option<PathBuf> = cfg.opt(a.report, "report")?;
    let mut coreset = Coreset::load_snapshot(&coreset_path)?;
    let untapped = untapped_from(&EmbeddingPack::load(&pack_path)?, &coreset);
    let report = engine::run_update(&mut coreset, &untapped, &config)?;
    coreset.save_snapshot(&out)?;
    if let Some(p) = &report_path {
        write_json(p, &report)?;
    }
    let last = report.per_epoch.last().expect("epochs >= 1");
    print_json(&json!({
        "command": "update",
        "config": config,
        "coreset": coreset_path,
        "pack": pack_path,
        "out": out,
        "untapped": untapped.len(),
        "batches_total": report.per_epoch.iter().map(|e| e.batches).sum::<usize>(),
        "dispersion_before": report.initial_dispersion.mean_cosine_dispersion,
        "dispersion_after": last.mean_intra_class_cosine_dispersion,
    }));
    Ok(())
}

fn cmd_stream(a: StreamArgs, cfg: &KvConfig) -> CliResult<()> {
    let path: PathBuf = cfg.required(a.pack_stream, "pack-stream")?;
    let config = StreamConfig {
        coreset_size: cfg.required(a.size, "size")?,
        strategy: parse(&cfg.or(a.select, "select", "ds".into())?)?,
        alpha: cfg.or(a.alpha, "alpha", 0.2)?,
        seed: cfg.or(a.seed, "seed", 0)?,
        allow_uneven: cfg.switch(a.allow_uneven, "allow-uneven")?,
    };
    let out: PathBuf = cfg.required(a.out, "out")?;
    let report_path: Option<PathBuf> = cfg.opt(a.report, "report")?;
    let stream = EmbeddingPack::load(&path)?;
    let (coreset, report) = engine::run_stream(&stream, &config)?;
    coreset.save_snapshot(&out)?;
    if let Some(p) = &report_path {
        write_json(p, &report)?;
    }
    print_json(&json!({
        "command": "stream",
        "config": config,
        "stream": path,
        "out": out,
        "filled": report.filled,
        "online_updates": report.online_updates,
        "dispersion": report.final_dispersion.mean_cosine_dispersion,
    }));
    Ok(())
}

fn cmd_retrieve(a: RetrieveArgs, cfg: &KvConfig) -> CliResult<()> {
    let coreset = Coreset::load_snapshot(cfg.required::<PathBuf>(a.coreset, "coreset")?)?;
    let queries = EmbeddingPack::load(cfg.required::<PathBuf>(a.queries, "queries")?)?;
    let shots: usize = cfg.or(a.shots, "shots", 2)?;
    let order: DemoOrder = parse(&cfg.or(a.order, "order", "asc".into())?)?;
    let similarity: Similarity = parse(&cfg.or(a.similarity, "similarity", "cosine".into())?)?;
    let mut text = String::new();
    for q in queries.records() {
        let r = retrieval::retrieve_topk(&coreset, q, shots, similarity)?;
        let seq = retrieval::assemble_sequence(&r, order);
        text.push_str(&serde_json::to_string(&json!({
            "query_id": r.query_id,
            "ranked": r.ranked,
            "sequence": seq.iter().map(|e| &e.source_id).collect::<Vec<_>>(),
        })).expect("json"));
        text.push('\n');
    }
    match cfg.opt::<PathBuf>(a.out, "out")? {
        Some(p) => fsio::atomic_write(&p, text.as_bytes())?,
        None => emit(&text),
    }
    Ok(())
}

fn cmd_prompts(a: PromptsArgs, cfg: &KvConfig) -> CliResult<()> {
    let coreset = Coreset::load_snapshot(cfg.required::<PathBuf>(a.coreset, "coreset")?)?;
    let test = EmbeddingPack::load(cfg.required::<PathBuf>(a.test, "test")?)?;
    let opts = PromptOptions {
        shots: cfg.or(a.shots, "shots", 2)?,
        seed: cfg.or(a.seed, "seed", 0)?,
        order: parse(&cfg.or(a.order, "order", "asc".into())?)?,
        similarity: parse(&cfg.or(a.similarity, "similarity", "cosine".into())?)?,
    };
    let out: PathBuf = cfg.required(a.out, "out")?;
    let n = retrieval::emit_prompts(&coreset, &test, &opts, &out)?;
    print_json(&json!({"command": "prompts", "config": opts, "out": out, "records": n}));
    Ok(())
}

struct EvalInputs {
    spec: ExperimentSpec,
    support: EmbeddingPack,
    test: EmbeddingPack,
    scores: Option<InfoScores>,
    out: Option<PathBuf>,
}

fn eval_inputs(a: EvalArgs, cfg: &KvConfig) -> CliResult<EvalInputs> {
    let support_path: PathBuf = cfg.required(a.support, "support")?;
    let test_path: PathBuf = cfg.required(a.test, "test")?;
    let strategy: InitStrategy = parse(&cfg.or(a.init_strategy, "init-strategy", "random".into())?)?;
    let scores_path: Option<PathBuf> = cfg.opt(a.scores, "scores")?;
    if strategy == InitStrategy::Infoscore && scores_path.is_none() {
        return Err(CliError::validation("init strategy infoscore requires --scores"));
    }
    let mut update = update_config(cfg, None, a.alpha, a.epochs, a.batch_size, a.seed, a.no_reshuffle)?;
    update.strategy = TargetStrategy::Ds;
    let conditions: Vec<Condition> = cfg
        .list(a.baselines, "baseline", vec!["fs-ic".to_string(), "fs-is".into(), "keco-rs".into(), "keco-ds".into()])?
        .iter()
        .map(|s| parse(s))
        .collect::<CliResult<_>>()?;
    let support = EmbeddingPack::load(&support_path)?;
    let test = EmbeddingPack::load(&test_path)?;
    let size = match cfg.opt(a.size, "size")? {
        Some(m) => m,
        // one fifth of the support, rounded down to a multiple of the class count
        None => (support.len() / 5 / support.labels().len().max(1)).max(1) * support.labels().len(),
    };
    let spec = ExperimentSpec {
        name: cfg.or(a.name, "name", support_path.display().to_string())?,
        init: InitSpec {
            strategy,
            coreset_size: size,
            seed: cfg.or(a.init_seed, "init-seed", update.seed)?,
            allow_uneven: cfg.switch(a.allow_uneven, "allow-uneven")?,
            kcenter_metric: parse(&cfg.or(a.kcenter_metric, "kcenter-metric", "euclidean".into())?)?,
        },
        update,
        shots: cfg.list(a.shots, "shots", vec![2, 4])?,
        conditions,
        untapped_ratio: cfg.opt(a.ratio, "ratio")?,
        similarity: parse(&cfg.or(a.similarity, "similarity", "cosine".into())?)?,
    };
    spec.validate()?;
    Ok(EvalInputs {
        spec,
        support,
        test,
        scores: load_scores(scores_path.as_ref())?,
        out: cfg.opt(a.out, "out")?,
    })
}

fn cmd_eval(a: EvalArgs, cfg: &KvConfig) -> CliResult<()> {
    let inp = eval_inputs(a, cfg)?;
    let result = eval::evaluate(&inp.spec, &inp.support, &inp.test, inp.scores.as_ref())?;
    if let Some(p) = &inp.out {
        write_json(p, &result)?;
    }
    emit(&result.to_text());
    Ok(())
}

fn cmd_sweep(a: SweepArgs, cfg: &KvConfig) -> CliResult<()> {
    let axis: String = cfg.required(a.axis, "axis")?;
    let values: String = cfg.required(a.values, "values")?;
    let points = SweepPoint::parse_axis(&axis, &values)?;
    let inp = eval_inputs(a.eval, cfg)?;
    let table = eval::sweep(&inp.spec, &inp.support, &inp.test, inp.scores.as_ref(), &points)?;
    if let Some(p) = &inp.out {
        write_json(p, &table)?;
    }
    emit(&table.to_text());
    Ok(())
}

fn cmd_stats(a: StatsArgs, cfg: &KvConfig) -> CliResult<()> {
    let path: PathBuf = cfg.required(a.coreset, "coreset")?;
    let coreset = Coreset::load_snapshot(&path)?;
    let stats = coreset.dispersion_stats()?;
    if let Some(csv_path) = cfg.opt::<PathBuf>(a.emit_csv, "emit-csv")? {
        eval::write_key_projection_csv(&coreset, &csv_path)?;
        eval::write_dispersion_csv(&stats, &dispersion_csv_path(&csv_path))?;
    }
    print_json(&json!({
        "command": "stats",
        "coreset": path,
        "entries": coreset.len(),
        "config_fingerprint": coreset.config_fingerprint(),
        "dispersion": stats,
    }));
    Ok(())
}

fn dispersion_csv_path(csv: &Path) -> PathBuf {
    let stem = csv.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    csv.with_file_name(format!("{stem}.dispersion.csv"))
}

fn cmd_synth(a: SynthArgs, cfg: &KvConfig) -> CliResult<()> {
    let r = SyntheticSpec::reference();
    let spec = SyntheticSpec {
        classes: cfg.or(a.classes, "classes", r.classes)?,
        support_per_class: cfg.or(a.support_per_class, "support-per-class", r.support_per_class)?,
        test_per_class: cfg.or(a.test_per_class, "test-per-class", r.test_per_class)?,
        dim: cfg.or(a.dim, "dim", r.dim)?,
        center_scale: cfg.or(a.center_scale, "center-scale", r.center_scale)?,
        noise_scale: cfg.or(a.noise_scale, "noise-scale", r.noise_scale)?,
        seed: cfg.or(a.seed, "seed", r.seed)?,
    };
    let format: PackFormat = parse(&cfg.or(a.format, "format", "jsonl".into())?)?;
    let out_support: PathBuf = cfg.required(a.out_support, "out-support")?;
    let out_test: PathBuf = cfg.required(a.out_test, "out-test")?;
    for w in spec.warnings() {
        eprintln!("keco: warning: {w}");
    }
    let (support, test) = eval::generate_synthetic(&spec)?;
    support.save(&out_support, format)?;
    test.save(&out_test, format)?;
    print_json(&json!({
        "command": "synth",
        "config": spec,
        "support": {"path": out_support, "records": support.len()},
        "test": {"path": out_test, "records": test.len()},
    }));
    Ok(())
}
