mod config;

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use seeker_core::corpus::{read_documents_jsonl, CorpusIndex};
use seeker_core::eval::{
    aggregate_turn_annotations, build_topical_prompts, eval_generations, turn_table, GoldExample, Prediction,
};
use seeker_core::jsonl::{read_jsonl, write_jsonl, write_jsonl_to};
use seeker_core::modelio::HttpBackendConfig;
use seeker_core::pipeline::{ConversationState, Pipeline};
use seeker_core::taskgen::{dialogue_tasks, generate_lm_tasks, remap_records, DialogueRecord, RemapRecord, TaskKind};
use seeker_service::{build_backend, build_pipelines, build_provider, ServiceConfig, TurnRecord, COPY_ORACLE};

use config::CliConfig;

#[derive(Parser)]
#[command(name = "seeker", version, about = "Search, knowledge and response generation toolkit")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build or query a lexical corpus index.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Construct fine-tuning examples.
    #[command(subcommand)]
    Taskgen(TaskgenCmd),
    /// Interactive dialogue on stdin/stdout.
    Chat(ChatArgs),
    /// Complete every prompt in a JSONL file.
    Complete(CompleteArgs),
    /// Automatic metrics, topical prompts and annotation summaries.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Run the HTTP chat service (configured from SEEKER_* variables).
    Serve(ServeArgs),
}

#[derive(Subcommand)]
enum CorpusCmd {
    Build {
        /// Documents as JSONL `{id, url, title, content}`.
        #[arg(long)]
        docs: PathBuf,
        #[arg(long, default_value = "index.bin")]
        out: PathBuf,
    },
    Search {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(short, long, default_value_t = 5)]
        k: usize,
        /// Rank sentences instead of documents.
        #[arg(long)]
        sentences: bool,
    },
}

#[derive(Subcommand)]
enum TaskgenCmd {
    /// Language-modeling tasks mined from an indexed corpus.
    Lm {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated subset of search, knowledge, response.
        #[arg(long, value_delimiter = ',', default_value = "search,knowledge,response")]
        kinds: Vec<TaskKind>,
    },
    /// Replace extractive answers with their best-overlapping passage sentence.
    Remap {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the configured `msmarco_f1_min`.
        #[arg(long)]
        f1_min: Option<f64>,
    },
    /// Search, knowledge and response examples from dialogue records.
    Dialogue {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Clone)]
struct BackendArgs {
    /// Generation endpoint, or `copy-oracle`.
    #[arg(long)]
    backend: Option<String>,
    /// Remote search endpoint.
    #[arg(long)]
    search_url: Option<String>,
    /// Local index file used for retrieval.
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    allowlist: Option<PathBuf>,
    /// Append this string to every search query.
    #[arg(long)]
    date_suffix: Option<String>,
    /// Continue without documents when search fails.
    #[arg(long)]
    allow_empty_retrieval: bool,
}

#[derive(Args)]
struct ChatArgs {
    #[command(flatten)]
    backend: BackendArgs,
    /// Append one trace per turn to this JSONL file.
    #[arg(long)]
    trace_log: Option<PathBuf>,
    #[arg(long)]
    persona: Option<String>,
}

#[derive(Args)]
struct CompleteArgs {
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// F1 and knowledge F1 of predictions against gold examples.
    Run {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, default_value = "model")]
        label: String,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Topical completion prompts, one topic per line.
    Topical {
        #[arg(long)]
        topics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-turn annotation percentages from exported session logs.
    Annotations {
        /// `model=path` pairs or bare paths (model defaults to the file stem).
        #[arg(required = true)]
        logs: Vec<String>,
    },
}

#[derive(Args)]
struct ServeArgs {
    /// Overrides SEEKER_LISTEN.
    #[arg(long)]
    listen: Option<String>,
    /// Overrides SEEKER_DATA_DIR.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Overrides SEEKER_STATIC_DIR.
    #[arg(long)]
    static_dir: Option<PathBuf>,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(io::stderr)
        .init();
    let cli = Cli::parse();
    let cfg = CliConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Corpus(cmd) => corpus(cmd),
        Command::Taskgen(cmd) => taskgen(cmd, &cfg),
        Command::Chat(args) => chat(args, cfg),
        Command::Complete(args) => complete(args, cfg),
        Command::Eval(cmd) => eval(cmd),
        Command::Serve(args) => serve(args, cfg),
    }
}

fn corpus(cmd: CorpusCmd) -> Result<()> {
    match cmd {
        CorpusCmd::Build { docs, out } => {
            let docs = read_documents_jsonl(&docs)?;
            let index = CorpusIndex::build(docs)?;
            index.save(&out)?;
            println!(
                "indexed {} documents, {} sentences -> {}",
                index.documents().len(),
                index.sentence_count(),
                out.display()
            );
        }
        CorpusCmd::Search { index, query, k, sentences } => {
            let index = CorpusIndex::load(&index)?;
            let hits = if sentences {
                index.search_sentences(&query, k)
            } else {
                index.lexical_search(&query, k)
            };
            for hit in hits {
                let doc = index.document(&hit.doc_id).expect("hit refers to an indexed document");
                let sentence = hit
                    .matched_sentence
                    .and_then(|i| doc.sentences.get(i))
                    .map_or("", |s| s.text.as_str());
                println!("{:.4}\t{}\t{}\t{}", hit.score, hit.doc_id, doc.title, sentence);
            }
        }
    }
    Ok(())
}

fn taskgen(cmd: TaskgenCmd, cfg: &CliConfig) -> Result<()> {
    match cmd {
        TaskgenCmd::Lm { index, out, seed, kinds } => {
            let index = CorpusIndex::load(&index)?;
            let kinds: BTreeSet<TaskKind> = kinds.into_iter().collect();
            let report = generate_lm_tasks(&index, &cfg.taskgen, seed, &kinds)?;
            let n = write_jsonl(&report.examples, &out)?;
            println!("wrote {n} examples to {}", out.display());
            for (reason, count) in &report.skipped {
                println!("skipped {count} targets: {}", serde_json::to_string(reason)?.trim_matches('"'));
            }
            if report.degenerate_titles > 0 {
                println!("skipped {} title tasks with empty simplified titles", report.degenerate_titles);
            }
        }
        TaskgenCmd::Remap { input, out, f1_min } => {
            let records: Vec<RemapRecord> = read_jsonl(&input)?;
            let f1_min = f1_min.unwrap_or(cfg.taskgen.msmarco_f1_min);
            let report = remap_records(&records, f1_min, &cfg.taskgen.tokens)?;
            write_jsonl(&report.examples, &out)?;
            println!(
                "retained {}/{} records (F1 >= {f1_min}); wrote {} examples to {}",
                report.retained,
                report.total,
                report.examples.len(),
                out.display()
            );
        }
        TaskgenCmd::Dialogue { input, out } => {
            let records: Vec<DialogueRecord> = read_jsonl(&input)?;
            let mut examples = Vec::new();
            for r in &records {
                examples.extend(dialogue_tasks(r, &cfg.taskgen)?);
            }
            write_jsonl(&examples, &out)?;
            println!("wrote {} examples from {} records to {}", examples.len(), records.len(), out.display());
        }
    }
    Ok(())
}

fn pipeline_for(args: &BackendArgs, cfg: CliConfig) -> Result<Pipeline> {
    let mut pipeline_cfg = cfg.pipeline;
    if let Some(s) = &args.date_suffix {
        pipeline_cfg.date_suffix = Some(s.clone());
    }
    pipeline_cfg.allow_empty_retrieval |= args.allow_empty_retrieval;
    let mut backend = cfg.backend.unwrap_or_else(|| HttpBackendConfig {
        endpoint: COPY_ORACLE.into(),
        ..Default::default()
    });
    if let Some(b) = &args.backend {
        backend.endpoint = b.clone();
    }
    let service = ServiceConfig {
        backend,
        search_url: args.search_url.clone().or(cfg.search.url),
        index_path: args.index.clone().or(cfg.search.index),
        allowlist_path: args.allowlist.clone().or(cfg.search.allowlist),
        ..Default::default()
    };
    if let Some(path) = &service.allowlist_path {
        pipeline_cfg.allowlist = Some(seeker_core::corpus::DomainAllowlist::load(path)?);
    }
    let backend = build_backend(&service.backend, &pipeline_cfg);
    let provider = build_provider(&service)?;
    Ok(Pipeline::new(backend, provider, pipeline_cfg)?)
}

fn chat(args: ChatArgs, cfg: CliConfig) -> Result<()> {
    let pipeline = pipeline_for(&args.backend, cfg)?;
    let mut state = ConversationState::new("cli");
    state.persona = args.persona;
    let mut log = match &args.trace_log {
        Some(path) => Some(BufWriter::new(
            File::options().create(true).append(true).open(path).with_context(|| format!("opening {}", path.display()))?,
        )),
        None => None,
    };
    let stdin = io::stdin();
    let mut out = io::stdout().lock();
    write!(out, "> ")?;
    out.flush()?;
    for line in stdin.lock().lines() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            write!(out, "> ")?;
            out.flush()?;
            continue;
        }
        if text == "/quit" {
            break;
        }
        match pipeline.run_turn(&mut state, text) {
            Ok(trace) => {
                writeln!(out, "[search]    {}", trace.query)?;
                for d in &trace.retrieved {
                    writeln!(out, "[doc]       {} <{}>", d.title, d.url)?;
                }
                writeln!(out, "[knowledge] {}", trace.knowledge)?;
                writeln!(out, "[response]  {}", trace.response)?;
                if let Some(log) = log.as_mut() {
                    write_jsonl_to(std::slice::from_ref(&trace), &mut *log)?;
                }
            }
            Err(e) => writeln!(out, "[error]     {e}")?,
        }
        write!(out, "> ")?;
        out.flush()?;
    }
    writeln!(out)?;
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PromptLine {
    Text(String),
    Record { prompt: String },
}

fn complete(args: CompleteArgs, cfg: CliConfig) -> Result<()> {
    let pipeline = pipeline_for(&args.backend, cfg)?;
    let prompts: Vec<PromptLine> = read_jsonl(&args.prompts)?;
    let mut completions = Vec::with_capacity(prompts.len());
    let mut failed = 0;
    for p in prompts {
        let prompt = match p {
            PromptLine::Text(t) | PromptLine::Record { prompt: t } => t,
        };
        match pipeline.complete(&prompt) {
            Ok(c) => completions.push(c),
            Err(e) => {
                failed += 1;
                eprintln!("failed: {prompt}: {e}");
            }
        }
    }
    write_jsonl(&completions, &args.out)?;
    println!("wrote {} completions to {} ({failed} failed)", completions.len(), args.out.display());
    Ok(())
}

fn eval(cmd: EvalCmd) -> Result<()> {
    match cmd {
        EvalCmd::Run { preds, gold, label, json } => {
            let preds: Vec<Prediction> = read_jsonl(&preds)?;
            let golds: Vec<GoldExample> = read_jsonl(&gold)?;
            let texts: Vec<&str> = preds.iter().map(Prediction::text).collect();
            let report = eval_generations(&texts, &golds)?;
            print!("{}", report.table(&label));
            if report.kf1_missing_knowledge > 0 {
                println!("{} examples had no gold knowledge (KF1 = 0)", report.kf1_missing_knowledge);
            }
            if let Some(path) = json {
                std::fs::write(&path, serde_json::to_string_pretty(&report)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
        }
        EvalCmd::Topical { topics, out } => {
            let text = std::fs::read_to_string(&topics).with_context(|| format!("reading {}", topics.display()))?;
            let topics: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
            let prompts = build_topical_prompts(&topics);
            write_jsonl(&prompts, &out)?;
            println!(
                "wrote {} prompts ({} topics filtered) to {}",
                prompts.len(),
                topics.len() - prompts.len(),
                out.display()
            );
        }
        EvalCmd::Annotations { logs } => {
            let mut records = Vec::new();
            for spec in &logs {
                let (model, path) = match spec.split_once('=') {
                    Some((m, p)) => (m.to_string(), PathBuf::from(p)),
                    None => (stem(Path::new(spec)), PathBuf::from(spec)),
                };
                let turns: Vec<TurnRecord> = read_jsonl(&path)?;
                records.extend(turns.into_iter().filter_map(|t| t.annotation).map(|a| (model.clone(), a)));
            }
            if records.is_empty() {
                bail!("no annotated turns found");
            }
            let rows: Vec<_> = aggregate_turn_annotations(&records)
                .into_iter()
                .map(|(m, s)| (format!("{m} (n={})", s.counts.n), s.row()))
                .collect();
            print!("{}", turn_table(&rows));
        }
    }
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

fn serve(args: ServeArgs, cfg: CliConfig) -> Result<()> {
    let mut service = ServiceConfig::from_env().map_err(anyhow::Error::msg)?;
    if let Some(l) = args.listen {
        service.listen = l.parse().with_context(|| format!("bad listen address `{l}`"))?;
    }
    if let Some(d) = args.data_dir {
        service.data_dir = d;
    }
    if args.static_dir.is_some() {
        service.static_dir = args.static_dir;
    }
    if std::env::var("SEEKER_BACKEND_URL").is_err() {
        if let Some(b) = cfg.backend {
            service.backend = b;
        }
    }
    service.search_url = service.search_url.or(cfg.search.url);
    service.index_path = service.index_path.or(cfg.search.index);
    service.allowlist_path = service.allowlist_path.or(cfg.search.allowlist);
    let pipelines = build_pipelines(&service, cfg.pipeline)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(seeker_service::serve(service, pipelines))?;
    Ok(())
}

