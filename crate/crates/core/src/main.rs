use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use srlm::config::{validate_config, RunConfig};
use srlm::datasets::{
    self, load_browsecomp, load_longbench, load_oolong, BrowseCompOptions, DatasetKind, DatasetSpec, LoadContext,
    LongBenchOptions, OolongOptions, TokenCache, LONG_CONTEXT_THRESHOLD,
};
use srlm::domain::TaskInstance;
use srlm::llm::{ByteHeuristic, ChatProvider, HttpProvider, RecordingProvider, ReplayProvider, RetryingProvider};
use srlm::orchestrator::Timing;
use srlm::runner::report::{render_text, report_files, ReportOptions};
use srlm::runner::{run_experiment, Method, RunEnv};
use srlm::sandbox::conformance::{run_suite, SuiteOptions};
use srlm::sandbox::process::WorkerCommand;
use srlm::sandbox::{ProcessSandboxFactory, SandboxFactory, ScriptedSandboxFactory};

#[derive(Parser)]
#[command(name = "srlm", version, about = "Uncertainty-guided program search over long contexts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method over a dataset, appending to a results file.
    Run(Box<RunArgs>),
    /// Aggregate results files into accuracy tables.
    Report(ReportArgs),
    /// Check a config file and print the effective values.
    Validate { config: PathBuf },
    /// Drive a sandbox worker through the protocol conformance suite.
    SandboxCheck {
        /// Worker command line, e.g. "python3 -u worker.py".
        #[arg(long)]
        worker: String,
        #[arg(long, default_value_t = 10_000)]
        truncation_chars: usize,
        #[arg(long, default_value_t = 2_000)]
        timeout_ms: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SandboxKind {
    /// Out-of-process interpreter worker (needs --worker).
    Process,
    /// In-process interpreter for a small statement subset; for demos and replays.
    Scripted,
}

#[derive(Args)]
struct RunArgs {
    /// KIND:PATH with KIND one of native, oolong, longbench, browsecomp.
    #[arg(long)]
    dataset: DatasetSpec,
    #[arg(long)]
    method: Method,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Serve model calls from a cassette; no network.
    #[arg(long, conflicts_with = "record")]
    replay: Option<PathBuf>,
    /// Call the live endpoint and append every exchange to a cassette.
    #[arg(long)]
    record: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = SandboxKind::Process)]
    sandbox: SandboxKind,
    #[arg(long)]
    worker: Option<String>,
    /// Overrides the config worker pool size.
    #[arg(long)]
    workers: Option<usize>,
    /// Keep only the first N loaded tasks.
    #[arg(long)]
    limit: Option<usize>,
    /// longbench: keep domains whose slug starts with this.
    #[arg(long)]
    domain: Option<String>,
    /// longbench: token bounds.
    #[arg(long)]
    min_tokens: Option<u64>,
    #[arg(long)]
    max_tokens: Option<u64>,
    /// oolong: source dataset ("all" keeps every subset).
    #[arg(long)]
    subset: Option<String>,
    /// oolong: keep one length tag.
    #[arg(long)]
    context_len: Option<u64>,
    /// browsecomp: documents per task.
    #[arg(long)]
    n_docs: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Split accuracy at the context-length threshold.
    #[arg(long)]
    bins: bool,
    #[arg(long, default_value_t = LONG_CONTEXT_THRESHOLD)]
    threshold: u64,
    #[arg(long)]
    by_domain: bool,
    /// Recompute selection policies from stored candidates.
    #[arg(long)]
    ablations: bool,
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(*args),
        Command::Report(args) => report(args),
        Command::Validate { config } => validate_config(&config)
            .map(|c| print!("{}", toml::to_string(&c).expect("config serializes")))
            .map_err(|e| e.to_string()),
        Command::SandboxCheck { worker, truncation_chars, timeout_ms } => sandbox_check(&worker, truncation_chars, timeout_ms),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_tasks(args: &RunArgs, config: &RunConfig) -> Result<Vec<TaskInstance>, String> {
    let counter = ByteHeuristic;
    let cache = TokenCache::for_dataset(&args.dataset.path, &counter);
    let cx = LoadContext { counter: &counter, window_limit: config.window_limit, cache: &cache };
    let path = &args.dataset.path;
    let (mut tasks, report) = match args.dataset.kind {
        DatasetKind::Oolong => {
            let mut o = OolongOptions { context_len: args.context_len, ..Default::default() };
            if let Some(s) = &args.subset {
                o.subset = (s != "all").then(|| s.clone());
            }
            load_oolong(path, &o, &cx)
        }
        DatasetKind::LongBench => {
            let o = LongBenchOptions {
                domain_filter: args.domain.clone(),
                min_tokens: args.min_tokens,
                max_tokens: args.max_tokens,
            };
            load_longbench(path, &o, &cx)
        }
        DatasetKind::BrowseComp => {
            let mut o = BrowseCompOptions { seed: config.seed, ..Default::default() };
            if let Some(n) = args.n_docs {
                o.n_docs = n;
            }
            load_browsecomp(path, &o, &cx)
        }
        DatasetKind::Native => datasets::load(&args.dataset, &cx, config.seed),
    }
    .map_err(|e| e.to_string())?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    log::info!("loaded {} tasks, skipped {}", report.loaded, report.skipped);
    if let Some(n) = args.limit {
        tasks.truncate(n);
    }
    Ok(tasks)
}

fn provider(args: &RunArgs, config: &RunConfig) -> Result<Box<dyn ChatProvider>, String> {
    if let Some(path) = &args.replay {
        return Ok(Box::new(ReplayProvider::open(path).map_err(|e| e.to_string())?));
    }
    if config.provider != "openai-compatible" {
        return Err(format!("unsupported provider {:?} (expected openai-compatible)", config.provider));
    }
    let live = RetryingProvider::new(
        HttpProvider::from_env(Duration::from_millis(config.step_time_budget_ms)),
        config.max_retries,
        Duration::from_millis(config.retry_backoff_ms),
    );
    Ok(match &args.record {
        Some(path) => Box::new(RecordingProvider::create(live, path).map_err(|e| e.to_string())?),
        None => Box::new(live),
    })
}

fn sandboxes(args: &RunArgs, config: &RunConfig) -> Result<Box<dyn SandboxFactory>, String> {
    match args.sandbox {
        SandboxKind::Scripted => Ok(Box::new(ScriptedSandboxFactory { truncation_chars: config.output_truncation_chars })),
        SandboxKind::Process => {
            let line = args.worker.as_deref().ok_or("--sandbox process needs --worker COMMAND")?;
            let command = WorkerCommand::parse(line, config.output_truncation_chars).ok_or("empty --worker command")?;
            Ok(Box::new(ProcessSandboxFactory { command }))
        }
    }
}

fn run(args: RunArgs) -> Result<(), String> {
    let mut config = match &args.config {
        Some(p) => validate_config(p).map_err(|e| e.to_string())?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(w) = args.workers {
        config.task_workers = w;
    }
    config.check().map_err(|e| e.to_string())?;
    let tasks = load_tasks(&args, &config)?;
    let provider = provider(&args, &config)?;
    let sandboxes = sandboxes(&args, &config)?;
    let env = RunEnv {
        provider: provider.as_ref(),
        sandboxes: sandboxes.as_ref(),
        counter: &ByteHeuristic,
        // Replayed latencies stand in for wall time so reruns are byte-identical.
        timing: if args.replay.is_some() { Timing::Virtual } else { Timing::Wall },
    };
    let summary = run_experiment(&tasks, args.method, &config, env, &args.out).map_err(|e| e.to_string())?;
    log::info!(
        "{}: wrote {} tasks, {} already present in {}",
        args.method,
        summary.written,
        summary.skipped_existing,
        args.out.display()
    );
    Ok(())
}

fn report(args: ReportArgs) -> Result<(), String> {
    let options =
        ReportOptions { bins: args.bins, threshold: args.threshold, by_domain: args.by_domain, ablations: args.ablations };
    let report = report_files(&args.inputs, &options).map_err(|e| e.to_string())?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        print!("{}", render_text(&report));
    }
    Ok(())
}

fn sandbox_check(worker: &str, truncation_chars: usize, timeout_ms: u64) -> Result<(), String> {
    let command = WorkerCommand::parse(worker, truncation_chars).ok_or("empty --worker command")?;
    let factory = ProcessSandboxFactory { command };
    let outcomes = run_suite(&factory, &SuiteOptions { truncation_chars, timeout_ms });
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    for o in &outcomes {
        println!("{} {}{}", if o.passed { "PASS" } else { "FAIL" }, o.name, if o.detail.is_empty() { String::new() } else { format!(": {}", o.detail) });
    }
    println!("{}/{} cases passed", outcomes.len() - failed, outcomes.len());
    if failed > 0 {
        return Err(format!("{failed} conformance cases failed"));
    }
    Ok(())
}
