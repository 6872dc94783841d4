use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use docprompt::corpus::{self, DocPool, Example, Language, Split};
use docprompt::dense::{contrastive_loss, dense_search, Batch, BatchPair, EmbeddingSet};
use docprompt::generation::{generate, EndpointConfig, GenerateOptions, MockCompleter, PromptBundle};
use docprompt::jsonl;
use docprompt::metrics::{self, EvalReport, Unit};
use docprompt::oracle::{annotate_function_docs, annotate_shell, OracleError};
use docprompt::pipeline::{self, Backend, ExperimentConfig, GenerationConfig, RetrievedRecord};
use docprompt::sparse::{build_index, build_name_index, two_stage_search, Bm25Params, Granularity, InvertedIndex};
use docprompt::split::{self, NameGranularity, SplitMode, SplitSpec};

/// Documentation retrieval, prompt assembly and evaluation for NL-to-code generation.
#[derive(Parser)]
#[command(name = "docprompt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a doc pool and example set from manuals, records and tldr pages.
    Ingest(IngestArgs),
    /// Build or query BM25 indexes.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Exact cosine search and contrastive loss over precomputed embeddings.
    #[command(subcommand)]
    Dense(DenseCommand),
    /// Attach oracle documentation to examples.
    Oracle(OracleArgs),
    /// Assign examples to train/dev/test.
    Split(SplitArgs),
    /// Retrieve docs for the intents of one split.
    Retrieve(RetrieveArgs),
    /// Assemble prompts from shots, intents and retrieved docs.
    Prompt(PromptArgs),
    /// Sample completions for prompts.
    Generate(GenerateArgs),
    /// Compute evaluation metrics.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Run a full experiment from a TOML config.
    Run(RunArgs),
    /// Per-metric deltas between two reports (second minus first).
    Diff {
        a: PathBuf,
        b: PathBuf,
    },
}

#[derive(Args)]
struct IngestArgs {
    /// Directory of `<command>.txt` manuals.
    #[arg(long, conflicts_with = "records")]
    manuals: Option<PathBuf>,
    /// JSONL pool records (doc_id, parent_key, seq, title, body).
    #[arg(long)]
    records: Option<PathBuf>,
    /// Directory of `<command>.md` tldr pages.
    #[arg(long)]
    pages: Option<PathBuf>,
    #[arg(long)]
    pool_out: PathBuf,
    /// Required with --pages.
    #[arg(long)]
    examples_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum IndexKind {
    Paragraph,
    Manual,
    /// Function-path index for the function-doc oracle.
    Names,
}

#[derive(Subcommand)]
enum IndexCommand {
    Build {
        #[arg(long)]
        pool: PathBuf,
        #[arg(long, value_enum, default_value = "paragraph")]
        kind: IndexKind,
        #[arg(long, default_value_t = 1.2)]
        k1: f64,
        #[arg(long, default_value_t = 0.75)]
        b: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Single-index search, one JSON result per line.
    Search {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Best manual first, then paragraphs within it.
    TwoStage {
        #[arg(long)]
        manual_index: PathBuf,
        #[arg(long)]
        paragraph_index: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
}

#[derive(Subcommand)]
enum DenseCommand {
    Search {
        #[arg(long)]
        embeddings: PathBuf,
        /// Comma-separated query vector.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, conflicts_with = "query_key")]
        query_vector: Option<Vec<f64>>,
        /// Key of a vector in --query-embeddings.
        #[arg(long, requires = "query_embeddings")]
        query_key: Option<String>,
        #[arg(long)]
        query_embeddings: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// In-batch contrastive loss for a JSONL batch of (query_key, positive_doc_id).
    Loss {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        batch: PathBuf,
    },
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    pool: PathBuf,
    #[arg(long)]
    examples: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Functions kept per Python example.
    #[arg(long, default_value_t = docprompt::oracle::DEFAULT_FUNCTION_K)]
    k: usize,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    examples: PathBuf,
    #[arg(long, value_parser = parse_from_str::<SplitMode>)]
    mode: SplitMode,
    #[arg(long)]
    seed: u64,
    /// train,dev,test sizes: groups for disjoint splits, examples for unseen splits.
    #[arg(long, value_delimiter = ',', required = true)]
    targets: Vec<usize>,
    #[arg(long, value_enum, default_value = "call-path")]
    granularity: NameGranularityArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum NameGranularityArg {
    CallPath,
    BaseName,
}

impl From<NameGranularityArg> for NameGranularity {
    fn from(g: NameGranularityArg) -> Self {
        match g {
            NameGranularityArg::CallPath => NameGranularity::CallPath,
            NameGranularityArg::BaseName => NameGranularity::BaseName,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Sparse,
    TwoStage,
    Dense,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    examples: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, value_enum, default_value = "two-stage")]
    method: Method,
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// Index for `sparse`; paragraph index for `two-stage`.
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    manual_index: Option<PathBuf>,
    #[arg(long)]
    doc_embeddings: Option<PathBuf>,
    #[arg(long)]
    query_embeddings: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PromptModeArg {
    Fewshot,
    Fid,
}

#[derive(Args)]
struct PromptArgs {
    #[arg(long)]
    pool: PathBuf,
    /// Split examples; shots are the first train examples with oracle docs.
    #[arg(long)]
    examples: PathBuf,
    #[arg(long)]
    retrieved: PathBuf,
    #[arg(long, value_enum, default_value = "fewshot")]
    mode: PromptModeArg,
    #[arg(long, default_value_t = 3)]
    shots: usize,
    #[arg(long)]
    no_docs: bool,
    #[arg(long, default_value_t = docprompt::generation::DEFAULT_DOC_CAP)]
    doc_cap: usize,
    #[arg(long, default_value_t = docprompt::generation::DEFAULT_DOC_TOKEN_BUDGET)]
    budget: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    failures_out: Option<PathBuf>,
    /// Serve completions from the built-in mock instead of an endpoint.
    #[arg(long)]
    mock: bool,
    /// Canned mock completion; without it the mock answers `<command> <flag>` read off the test docs.
    #[arg(long, requires = "mock")]
    canned: Option<String>,
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    base_url: String,
    #[arg(long, default_value = "code-model")]
    model: String,
    /// Environment variable holding the bearer token.
    #[arg(long)]
    token_env: Option<String>,
    #[arg(long, default_value_t = 60)]
    timeout_secs: u64,
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.2")]
    temperatures: Vec<f64>,
    /// Sweep temperatures 0.2, 0.4, 0.6, 0.8 and 1.0.
    #[arg(long, conflicts_with = "temperatures")]
    sweep: bool,
    #[arg(long, default_value_t = docprompt::generation::DEFAULT_TOP_P)]
    top_p: f64,
    #[arg(long, default_value = docprompt::generation::STOP_END)]
    stop: Vec<String>,
    #[arg(long, default_value_t = 128)]
    max_tokens: usize,
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,
    #[arg(long, default_value_t = 3)]
    max_retries: u32,
    #[arg(long, default_value_t = 200)]
    backoff_ms: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum LanguageArg {
    Bash,
    Python,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Generation metrics. Files are JSONL (examples with `code`, samples
    /// with `completion`) when named *.jsonl, otherwise one command per line.
    Gen {
        #[arg(long)]
        refs: PathBuf,
        #[arg(long)]
        hyps: PathBuf,
        #[arg(long, value_enum)]
        language: LanguageArg,
        /// Call paths seen in training, one per line.
        #[arg(long)]
        train_vocab: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// recall@k of retrieved docs against oracle docs.
    Retrieval {
        /// JSONL of (example_id, results).
        #[arg(long)]
        results: PathBuf,
        /// Examples JSONL with oracle_doc_ids.
        #[arg(long)]
        oracles: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,20")]
        ks: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Unbiased pass@k from JSONL records of (example_id, n, c).
    PassAtK {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,10,50,100,200")]
        k: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distinct n-gram recall of targets against paired sources, one text per line.
    Overlap {
        #[arg(long)]
        sources: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        #[arg(long, default_value_t = 4)]
        n_max: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `work_dir` from the config.
    #[arg(long)]
    work_dir: Option<PathBuf>,
}

fn parse_from_str<T: std::str::FromStr<Err = String>>(s: &str) -> Result<T, String> {
    s.parse()
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn emit_report(report: &EvalReport, out: Option<&Path>) -> anyhow::Result<()> {
    let text = report.to_json();
    if let Some(path) = out {
        fs::write(path, &text).with_context(|| format!("cannot write {}", path.display()))?;
    }
    print!("{text}");
    Ok(())
}

fn ingest(args: IngestArgs) -> anyhow::Result<()> {
    let pool = match (&args.manuals, &args.records) {
        (Some(dir), None) => {
            let mut docs = Vec::new();
            for (command, path) in files_with_ext(dir, "txt")? {
                docs.extend(corpus::split_manual(&fs::read_to_string(&path)?, &command));
            }
            DocPool::from_docs(docs)?
        }
        (None, Some(path)) => {
            let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
            corpus::ingest_pool(BufReader::new(file))?
        }
        _ => bail!("pass exactly one of --manuals and --records"),
    };
    let mut n_examples = 0;
    if let Some(dir) = &args.pages {
        let out = args.examples_out.as_ref().context("--pages needs --examples-out")?;
        let mut examples = Vec::new();
        for (command, path) in files_with_ext(dir, "md")? {
            examples.extend(corpus::tldr_examples(&fs::read_to_string(&path)?, &command)?);
        }
        n_examples = examples.len();
        corpus::write_examples(out, &examples)?;
    }
    pool.save(&args.pool_out)?;
    print_json(&serde_json::json!({ "docs": pool.len(), "manuals": pool.parents().count(), "examples": n_examples }))
}

fn files_with_ext(dir: &Path, ext: &str) -> anyhow::Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("cannot list {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            let stem = path.file_stem().and_then(|s| s.to_str()).context("non-UTF-8 file name")?;
            out.push((stem.to_string(), path.clone()));
        }
    }
    out.sort();
    Ok(out)
}

fn index(cmd: IndexCommand) -> anyhow::Result<()> {
    match cmd {
        IndexCommand::Build { pool, kind, k1, b, out } => {
            let pool = DocPool::load(&pool)?;
            let params = Bm25Params { k1, b }.validate()?;
            let index = match kind {
                IndexKind::Paragraph => build_index(&pool, Granularity::Paragraph, params)?,
                IndexKind::Manual => build_index(&pool, Granularity::Manual, params)?,
                IndexKind::Names => build_name_index(&pool, params)?,
            };
            index.save(&out)?;
            print_json(&serde_json::json!({ "units": index.n_docs(), "vocab": index.vocab_size() }))
        }
        IndexCommand::Search { index, query, k } => {
            for hit in InvertedIndex::load(&index)?.search(&query, k) {
                print_json(&hit)?;
            }
            Ok(())
        }
        IndexCommand::TwoStage { manual_index, paragraph_index, query, k } => {
            let manual = InvertedIndex::load(&manual_index)?;
            let paragraph = InvertedIndex::load(&paragraph_index)?;
            for hit in two_stage_search(&manual, &paragraph, &query, k) {
                print_json(&hit)?;
            }
            Ok(())
        }
    }
}

fn dense(cmd: DenseCommand) -> anyhow::Result<()> {
    match cmd {
        DenseCommand::Search { embeddings, query_vector, query_key, query_embeddings, k } => {
            let docs = EmbeddingSet::load(&embeddings)?;
            let query = match (query_vector, query_key, query_embeddings) {
                (Some(v), _, _) => v,
                (None, Some(key), Some(path)) => EmbeddingSet::load(&path)?
                    .get(&key)
                    .with_context(|| format!("no embedding for `{key}`"))?
                    .to_vec(),
                _ => bail!("pass --query-vector or --query-key with --query-embeddings"),
            };
            for hit in dense_search(&docs, &query, k)? {
                print_json(&hit)?;
            }
            Ok(())
        }
        DenseCommand::Loss { embeddings, batch } => {
            let emb = EmbeddingSet::load(&embeddings)?;
            let pairs: Vec<BatchPair> = jsonl::read(&batch)?;
            print_json(&contrastive_loss(&Batch::new(pairs)?, &emb)?)
        }
    }
}

fn oracle(args: OracleArgs) -> anyhow::Result<()> {
    let pool = DocPool::load(&args.pool)?;
    let mut examples = corpus::read_examples(&args.examples)?;
    let names = if examples.iter().any(|e| e.language == Language::Python) {
        Some(build_name_index(&pool, Bm25Params::default())?)
    } else {
        None
    };
    for ex in &mut examples {
        ex.oracle_doc_ids = match ex.language {
            Language::Bash => match annotate_shell(ex, &pool) {
                Ok(ids) => ids,
                Err(OracleError::UnknownCommand(_)) => Vec::new(),
            },
            Language::Python => annotate_function_docs(ex, names.as_ref().expect("built above"), &pool, args.k),
        };
    }
    let annotated = examples.iter().filter(|e| !e.oracle_doc_ids.is_empty()).count();
    corpus::write_examples(&args.out, &examples)?;
    print_json(&serde_json::json!({ "examples": examples.len(), "annotated": annotated }))
}

fn run_split(args: SplitArgs) -> anyhow::Result<()> {
    let [train, dev, test] = args.targets[..] else {
        bail!("--targets takes exactly three values, got {}", args.targets.len());
    };
    let mut examples = corpus::read_examples(&args.examples)?;
    let spec = SplitSpec {
        mode: args.mode,
        seed: args.seed,
        targets: [train, dev, test],
        granularity: args.granularity.into(),
    };
    let assignment = split::split(&examples, &spec)?;
    let violations = split::verify_split(&examples, &assignment, spec.mode, spec.granularity);
    if !violations.is_empty() {
        bail!("split has {} violations, first: {}", violations.len(), violations[0]);
    }
    split::apply_assignment(&mut examples, &assignment);
    corpus::write_examples(&args.out, &examples)?;
    let sizes: BTreeMap<String, serde_json::Value> = split::split_sizes(&examples, &assignment)
        .into_iter()
        .map(|(s, (n, g))| (s.to_string(), serde_json::json!({ "examples": n, "groups": g })))
        .collect();
    print_json(&serde_json::json!({ "sizes": sizes, "violations": 0 }))
}

fn retrieve(args: RetrieveArgs) -> anyhow::Result<()> {
    let examples: Vec<Example> = corpus::read_examples(&args.examples)?
        .into_iter()
        .filter(|e| match args.split {
            SplitArg::Train => e.split == Split::Train,
            SplitArg::Dev => e.split == Split::Dev,
            SplitArg::Test => e.split == Split::Test,
            SplitArg::All => true,
        })
        .collect();
    let records: Vec<RetrievedRecord> = match args.method {
        Method::Sparse => {
            let index = InvertedIndex::load(args.index.as_ref().context("--index is required")?)?;
            examples
                .iter()
                .map(|e| RetrievedRecord { example_id: e.example_id.clone(), results: index.search(&e.intent, args.k) })
                .collect()
        }
        Method::TwoStage => {
            let paragraph = InvertedIndex::load(args.index.as_ref().context("--index is required")?)?;
            let manual = InvertedIndex::load(args.manual_index.as_ref().context("--manual-index is required")?)?;
            examples
                .iter()
                .map(|e| RetrievedRecord {
                    example_id: e.example_id.clone(),
                    results: two_stage_search(&manual, &paragraph, &e.intent, args.k),
                })
                .collect()
        }
        Method::Dense => {
            let docs = EmbeddingSet::load(args.doc_embeddings.as_ref().context("--doc-embeddings is required")?)?;
            let queries =
                EmbeddingSet::load(args.query_embeddings.as_ref().context("--query-embeddings is required")?)?;
            examples
                .iter()
                .map(|e| {
                    let q = queries.get(&e.example_id).with_context(|| format!("no query embedding for `{}`", e.example_id))?;
                    Ok(RetrievedRecord { example_id: e.example_id.clone(), results: dense_search(&docs, q, args.k)? })
                })
                .collect::<anyhow::Result<_>>()?
        }
    };
    jsonl::write(&args.out, &records)?;
    print_json(&serde_json::json!({ "queries": records.len() }))
}

fn prompt(args: PromptArgs) -> anyhow::Result<()> {
    use docprompt::generation::{build_fewshot_prompt_capped, build_fid_inputs, Shot};
    let pool = DocPool::load(&args.pool)?;
    let examples = corpus::read_examples(&args.examples)?;
    let docs_for = |ids: Vec<&str>| -> Vec<corpus::Doc> {
        ids.into_iter()
            .filter_map(|id| pool.get(id).or_else(|| pool.paragraphs(id).and_then(|mut p| p.next())))
            .cloned()
            .collect()
    };
    let mut train: Vec<&Example> =
        examples.iter().filter(|e| e.split == Split::Train && !e.oracle_doc_ids.is_empty()).collect();
    train.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    let shots: Vec<Shot> = train
        .iter()
        .take(args.shots)
        .map(|e| Shot {
            intent: e.intent.clone(),
            code: e.code.clone(),
            docs: docs_for(e.oracle_doc_ids.iter().map(String::as_str).collect()),
        })
        .collect();
    let by_id: BTreeMap<&str, &Example> = examples.iter().map(|e| (e.example_id.as_str(), e)).collect();
    let retrieved: Vec<RetrievedRecord> = jsonl::read(&args.retrieved)?;
    let bundles = retrieved
        .iter()
        .map(|r| {
            let ex = by_id.get(r.example_id.as_str()).with_context(|| format!("unknown example `{}`", r.example_id))?;
            let docs = docs_for(r.results.iter().map(|x| x.doc_ref.as_str()).collect());
            Ok(match args.mode {
                PromptModeArg::Fewshot => PromptBundle::FewshotConcat {
                    example_id: ex.example_id.clone(),
                    prompt: build_fewshot_prompt_capped(&shots, &ex.intent, &docs, !args.no_docs, args.doc_cap),
                },
                PromptModeArg::Fid => PromptBundle::FidPairs {
                    example_id: ex.example_id.clone(),
                    segments: build_fid_inputs(&ex.intent, &docs, args.budget),
                    doc_token_budget: args.budget,
                },
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    jsonl::write(&args.out, &bundles)?;
    print_json(&serde_json::json!({ "prompts": bundles.len(), "shots": shots.len() }))
}

fn run_generate(args: GenerateArgs) -> anyhow::Result<()> {
    let bundles: Vec<PromptBundle> = jsonl::read(&args.prompts)?;
    let config = GenerationConfig {
        backend: if args.mock { Backend::Mock } else { Backend::Http },
        mock: args.canned.map(MockCompleter::Canned).unwrap_or(MockCompleter::DocEcho),
        endpoint: EndpointConfig {
            base_url: args.base_url,
            model: args.model,
            token_env: args.token_env,
            timeout_secs: args.timeout_secs,
        },
        options: GenerateOptions {
            n_samples: args.n,
            temperatures: if args.sweep { docprompt::generation::TEMPERATURE_SWEEP.to_vec() } else { args.temperatures },
            top_p: args.top_p,
            stop: args.stop,
            max_tokens: args.max_tokens,
            max_in_flight: args.max_in_flight,
            max_retries: args.max_retries,
            backoff_ms: args.backoff_ms,
        },
    };
    if config.options.n_samples == 0 {
        bail!("--n must be at least 1");
    }
    let completer = pipeline::completer(&config)?;
    let out = generate(&bundles, completer.as_ref(), &config.options);
    jsonl::write(&args.out, &out.samples)?;
    if let Some(path) = &args.failures_out {
        jsonl::write(path, &out.failures)?;
    }
    for f in &out.failures {
        eprintln!("{}", serde_json::to_string(f)?);
    }
    print_json(&serde_json::json!({ "samples": out.samples.len(), "failures": out.failures.len() }))
}

#[derive(Deserialize)]
struct TextRecord {
    example_id: String,
    #[serde(alias = "completion")]
    code: String,
    #[serde(default)]
    sample_index: usize,
    #[serde(default)]
    temperature: Option<f64>,
}

/// (ids, texts) from a JSONL file of examples or samples, or from plain lines.
fn read_texts(path: &Path) -> anyhow::Result<(Vec<String>, Vec<String>)> {
    if path.extension().and_then(|e| e.to_str()) == Some("jsonl") {
        let records: Vec<TextRecord> = jsonl::read(path)?;
        let mut first: BTreeMap<String, (f64, String)> = BTreeMap::new();
        for r in records.into_iter().filter(|r| r.sample_index == 0) {
            let t = r.temperature.unwrap_or(0.0);
            let keep = first.get(&r.example_id).map_or(true, |(best, _)| t < *best);
            if keep {
                first.insert(r.example_id, (t, r.code));
            }
        }
        Ok(first.into_iter().map(|(id, (_, code))| (id, code)).unzip())
    } else {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        Ok(text.lines().enumerate().map(|(i, l)| (format!("line-{}", i + 1), l.to_string())).unzip())
    }
}

#[derive(Deserialize)]
struct PassRecord {
    example_id: String,
    n: u64,
    c: u64,
}

fn eval(cmd: EvalCommand) -> anyhow::Result<()> {
    match cmd {
        EvalCommand::Gen { refs, hyps, language, train_vocab, out } => {
            let (ids, refs) = read_texts(&refs)?;
            let (hyp_ids, hyps) = read_texts(&hyps)?;
            let hyps: Vec<String> = if hyp_ids == ids {
                hyps
            } else {
                let by_id: BTreeMap<String, String> = hyp_ids.into_iter().zip(hyps).collect();
                ids.iter().map(|id| by_id.get(id).cloned().unwrap_or_default()).collect()
            };
            let report = match language {
                LanguageArg::Bash => metrics::evaluate_bash(&ids, &refs, &hyps)?,
                LanguageArg::Python => {
                    let vocab: BTreeSet<String> = match train_vocab {
                        Some(p) => fs::read_to_string(&p)?.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect(),
                        None => BTreeSet::new(),
                    };
                    metrics::evaluate_python(&ids, &refs, &hyps, &vocab)?
                }
            };
            emit_report(&report, out.as_deref())
        }
        EvalCommand::Retrieval { results, oracles, ks, out } => {
            let examples = corpus::read_examples(&oracles)?;
            let retrieved: BTreeMap<String, Vec<String>> = jsonl::read::<RetrievedRecord>(&results)?
                .into_iter()
                .map(|r| (r.example_id, r.results.into_iter().map(|x| x.doc_ref).collect()))
                .collect();
            let examples: Vec<&Example> = examples.iter().filter(|e| retrieved.contains_key(&e.example_id)).collect();
            let ids: Vec<String> = examples.iter().map(|e| e.example_id.clone()).collect();
            let ranked: Vec<Vec<String>> = ids.iter().map(|id| retrieved[id].clone()).collect();
            let gold: Vec<Vec<String>> = examples.iter().map(|e| e.oracle_doc_ids.clone()).collect();
            emit_report(&metrics::evaluate_retrieval(&ids, &ranked, &gold, &ks)?, out.as_deref())
        }
        EvalCommand::PassAtK { samples, k, out } => {
            let records: Vec<PassRecord> = jsonl::read(&samples)?;
            let pairs: Vec<(u64, u64)> = records.iter().map(|r| (r.n, r.c)).collect();
            let mut report = EvalReport::default();
            for &k in &k {
                report.push(format!("pass@{k}"), Unit::Percent, 100.0 * metrics::pass_at_k(&pairs, k)?);
            }
            report.rows = records
                .iter()
                .map(|r| {
                    let values = k
                        .iter()
                        .filter_map(|&k| metrics::pass_at_k_single(r.n, r.c, k).ok().map(|v| (format!("pass@{k}"), 100.0 * v)))
                        .collect();
                    metrics::ExampleRow { example_id: r.example_id.clone(), values }
                })
                .collect();
            emit_report(&report, out.as_deref())
        }
        EvalCommand::Overlap { sources, targets, n_max, out } => {
            let (_, s) = read_texts(&sources)?;
            let (_, t) = read_texts(&targets)?;
            let mut report = EvalReport::default();
            for (n, v) in metrics::ngram_overlap(&s, &t, n_max)? {
                report.push(format!("overlap@{n}"), Unit::Percent, v);
            }
            emit_report(&report, out.as_deref())
        }
    }
}

fn run(args: RunArgs) -> anyhow::Result<()> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(dir) = args.work_dir {
        config.work_dir = dir;
    }
    let summary = pipeline::run_pipeline(&config)?;
    for (stage, status) in &summary.stages {
        eprintln!("{}", serde_json::json!({ "stage": stage, "status": status }));
    }
    emit_report(&summary.report, None)
}

fn diff(a: &Path, b: &Path) -> anyhow::Result<()> {
    let load = |p: &Path| -> anyhow::Result<EvalReport> {
        Ok(EvalReport::from_json(&fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?)?)
    };
    for delta in pipeline::report_diff(&load(a)?, &load(b)?) {
        print_json(&serde_json::json!({
            "name": delta.name,
            "unit": delta.unit,
            "a": delta.a,
            "b": delta.b,
            "delta": delta.delta,
            "comparable": delta.comparable(),
        }))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Index(c) => index(c),
        Command::Dense(c) => dense(c),
        Command::Oracle(a) => oracle(a),
        Command::Split(a) => run_split(a),
        Command::Retrieve(a) => retrieve(a),
        Command::Prompt(a) => prompt(a),
        Command::Generate(a) => run_generate(a),
        Command::Eval(c) => eval(c),
        Command::Run(a) => run(a),
        Command::Diff { a, b } => diff(&a, &b),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("{}", serde_json::json!({ "error": format!("{e:#}"), "causes": chain }));
            ExitCode::FAILURE
        }
    }
}
