//! `ck`: synth, train, index, search, eval, bench-memory and serve.
//!
//! Exit status: 0 on success, 1 on usage or configuration errors, 2 on data
//! errors (unreadable or malformed inputs, hash mismatches, service errors).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ck_client::{Client, ClientError};
use ck_core::bench::{self, DEFAULT_BUDGET, DEFAULT_LENGTHS};
use ck_core::checkpoint::Checkpoint;
use ck_core::corpus::{self, Collection};
use ck_core::index::SearchIndex;
use ck_core::metrics::{self, MetricReport};
use ck_core::pipeline::{self, TrainingInputs};
use ck_core::synth::{self, SynthConfig};
use ck_core::trec::{self, Qrels, Run};
use ck_core::Config;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "ck",
    version,
    about = "Conformer-Kernel ranking with query term independence"
)]
struct Cli {
    /// Log progress to stderr (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic collection, queries, qrels and training files.
    Synth(SynthArgs),
    /// Train a model and write checkpoints.
    Train(TrainArgs),
    /// Precompute the impact index of a corpus.
    Index(IndexArgs),
    /// Run queries against an index (or a running service) into a TREC run.
    Search(SearchArgs),
    /// Score a run against qrels.
    Eval(EvalArgs),
    /// Peak-memory curves of separable vs standard attention as CSV.
    BenchMemory(BenchArgs),
    /// Serve an index over HTTP/JSON.
    Serve(ServeArgs),
    /// Print the default configuration file.
    DefaultConfig,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SynthConfig::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = SynthConfig::default().docs)]
    docs: usize,
    #[arg(long, default_value_t = SynthConfig::default().vocab)]
    vocab: usize,
    #[arg(long, default_value_t = SynthConfig::default().eval_queries)]
    queries: usize,
    #[arg(long, default_value_t = SynthConfig::default().train_queries)]
    train_queries: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` config file; defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    /// Training queries, `qid<TAB>text`.
    #[arg(long)]
    queries: PathBuf,
    /// Positive pairs, `qid<TAB>docid`.
    #[arg(long)]
    pairs: PathBuf,
    /// TREC run of candidate documents per training query.
    #[arg(long)]
    candidates: PathBuf,
    /// Final checkpoint; periodic ones go to `<out>.step<N>`.
    #[arg(long)]
    out: PathBuf,
    /// Overrides `steps` from the config.
    #[arg(long)]
    steps: Option<u64>,
    /// Write a calibrated but untrained checkpoint instead.
    #[arg(long)]
    untrained: bool,
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Zero the latent channel (explicit-only ablation).
    #[arg(long)]
    explicit_only: bool,
}

#[derive(Args)]
struct SearchArgs {
    /// Index file; not needed with `--server`.
    #[arg(long, required_unless_present = "server")]
    index: Option<PathBuf>,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    k: usize,
    /// Refuse an index not built from this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "ck")]
    tag: String,
    /// Base URL of a running service, e.g. http://127.0.0.1:8080.
    #[arg(long)]
    server: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    /// Evaluate on a running service instead of locally.
    #[arg(long)]
    server: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated, strictly increasing.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_LENGTHS)]
    lengths: Vec<usize>,
    /// Attention dimensions come from this config (defaults otherwise).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Live-element budget; lengths exceeding it are recorded as `oom`.
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    budget: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    qrels: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<ck_core::Error> for Failure {
    fn from(e: ck_core::Error) -> Self {
        match e {
            ck_core::Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn load_config(path: Option<&Path>) -> Result<Config, Failure> {
    match path {
        Some(p) => Config::load(p).map_err(|e| match e {
            ck_core::Error::Io { .. } => Failure::Data(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }),
        None => Ok(Config::default()),
    }
}

fn ingest(path: &Path, config: &Config) -> Result<Collection, Failure> {
    let (collection, skips) = Collection::ingest(path, config.max_extra_terms)?;
    if skips.skipped > 0 {
        eprintln!("warning: skipped {} malformed corpus lines", skips.skipped);
    }
    Ok(collection)
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn step_path(out: &Path, step: u64) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(format!(".step{step}"));
    PathBuf::from(s)
}

fn synth_cmd(a: SynthArgs) -> Outcome {
    let cfg = SynthConfig {
        seed: a.seed,
        docs: a.docs,
        vocab: a.vocab,
        eval_queries: a.queries,
        train_queries: a.train_queries,
        ..SynthConfig::default()
    };
    let set = synth::make_synthetic_corpus(&cfg)?;
    set.write(&a.out)?;
    println!(
        "wrote {} documents, {} queries, {} training pairs to {}",
        set.docs.len(),
        set.queries.len(),
        set.train_pairs.len(),
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Outcome {
    let mut config = load_config(a.config.as_deref())?;
    if let Some(steps) = a.steps {
        config.steps = steps;
    }
    let collection = ingest(&a.corpus, &config)?;
    let queries = corpus::read_queries(&a.queries)?;
    let pairs = corpus::read_training_pairs(&a.pairs)?;
    let candidates = trec::read_run(&a.candidates)?;
    let inputs = TrainingInputs {
        collection: &collection,
        queries: &queries,
        pairs: &pairs,
        candidates: &candidates,
    };
    let ck = if a.untrained {
        pipeline::untrained(&config, &inputs)?
    } else {
        let final_step = config.steps;
        let (ck, reports) = pipeline::train(&config, &inputs, |ck| {
            if ck.step < final_step {
                ck.save(&step_path(&a.out, ck.step))?;
            }
            Ok(())
        })?;
        if let (Some(first), Some(last)) = (reports.first(), reports.last()) {
            println!(
                "loss {:.4} -> {:.4} over {} steps",
                first.loss,
                last.loss,
                reports.len()
            );
        }
        ck
    };
    ck.save(&a.out)?;
    println!("checkpoint {} hash {:016x}", a.out.display(), ck.model_hash());
    Ok(())
}

fn index_cmd(a: IndexArgs) -> Outcome {
    let mut ck = Checkpoint::load(&a.checkpoint)?;
    if a.explicit_only {
        ck.model = ck.model.explicit_only();
    }
    let collection = ingest(&a.corpus, &ck.model.config)?;
    let index = pipeline::build_index(&ck, &collection, a.threads)?;
    index.save(&a.out)?;
    println!(
        "indexed {} documents, {} terms, {} postings",
        index.index.num_docs,
        index.index.num_terms(),
        index.index.num_postings()
    );
    Ok(())
}

fn search_cmd(a: SearchArgs) -> Outcome {
    if a.k == 0 {
        return Err(Failure::Usage("--k must be at least 1".into()));
    }
    let queries = corpus::read_queries(&a.queries)?;
    let run: Run = match (&a.server, &a.index) {
        (Some(url), _) => runtime()?.block_on(Client::new(url).search_batch(&queries, a.k))?,
        (None, Some(path)) => {
            let (hash, max_terms) = match &a.checkpoint {
                Some(p) => {
                    let ck = Checkpoint::load(p)?;
                    (Some(ck.model_hash()), ck.model.config.max_query_terms)
                }
                None => (None, Config::default().max_query_terms),
            };
            SearchIndex::load(path, hash, max_terms)?.search_all(&queries, a.k)
        }
        (None, None) => return Err(Failure::Usage("either --index or --server is required".into())),
    };
    trec::write_run(&a.out, &run, &a.tag)?;
    println!("wrote {} queries to {}", run.len(), a.out.display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Outcome {
    let text = std::fs::read_to_string(&a.run).map_err(|e| ck_core::Error::io(&a.run, e))?;
    trec::validate_run(&text)?;
    let report: MetricReport = match &a.server {
        Some(url) => {
            let qrels = std::fs::read_to_string(&a.qrels).map_err(|e| ck_core::Error::io(&a.qrels, e))?;
            runtime()?.block_on(Client::new(url).eval(&text, Some(&qrels)))?.into()
        }
        None => metrics::evaluate(&trec::parse_run(&text)?, &Qrels::load(&a.qrels)?),
    };
    print!("{}\n{}", report.to_table(), report.to_key_values());
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> Outcome {
    let config = load_config(a.config.as_deref())?;
    let report = bench::bench_memory(&a.lengths, &config.attention(), a.budget, a.seed)?;
    let csv = report.to_csv();
    match &a.out {
        Some(p) => std::fs::write(p, csv).map_err(|e| ck_core::Error::io(p, e))?,
        None => print!("{csv}"),
    }
    eprint!("{}", report.summary());
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> Outcome {
    let state = ck_service::load_state(&ck_service::ServiceFiles {
        index: a.index,
        checkpoint: a.checkpoint,
        qrels: a.qrels,
    })?;
    runtime()?.block_on(async {
        let listener = tokio::net::TcpListener::bind(&a.addr).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        ck_service::serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    })?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let default_level = if cli.verbose { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default_level)),
        )
        .with_writer(std::io::stderr)
        .init();
    let outcome = match cli.command {
        Command::Synth(a) => synth_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Index(a) => index_cmd(a),
        Command::Search(a) => search_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::BenchMemory(a) => bench_cmd(a),
        Command::Serve(a) => serve_cmd(a),
        Command::DefaultConfig => {
            print!("{}", Config::default().to_text());
            Ok(())
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
