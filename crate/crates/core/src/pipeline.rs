//! End-to-end experiment runner: ingest → index → annotate → split →
//! retrieve → prompt → generate → eval.
//!
//! Every stage writes its artifacts under `work_dir` and records a SHA-256
//! digest of its inputs and settings in `work_dir/.stages/<stage>.sha256`.
//! A stage whose digest is unchanged and whose outputs all exist is skipped.
//! When a stage fails, `work_dir/FAILED` names it and the partial artifacts
//! stay on disk.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{self, Doc, DocPool, Example, Language, Split};
use crate::dense::{dense_search, EmbeddingSet};
use crate::generation::{
    build_fewshot_prompt_capped, build_fid_inputs, generate, Completer, EndpointConfig, GenSample,
    GenerateOptions, HttpCompleter, MockCompleter, PromptBundle, Shot, DEFAULT_DOC_CAP, DEFAULT_DOC_TOKEN_BUDGET,
};
use crate::jsonl;
use crate::metrics::{self, EvalReport, Unit};
use crate::oracle::{annotate_function_docs, annotate_shell, OracleError, DEFAULT_FUNCTION_K};
use crate::sparse::{build_index, build_name_index, two_stage_search, Bm25Params, Granularity, InvertedIndex, RetrievalResult};
use crate::split::{self, NameGranularity, SplitMode, SplitSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub language: Language,
    pub work_dir: PathBuf,
    pub input: InputConfig,
    #[serde(default)]
    pub index: Bm25Params,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub prompt: PromptConfig,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

/// Docs come from `pool` (JSONL records) or `manuals_dir` (`<command>.txt`);
/// examples from `examples` (JSONL) or `tldr_dir` (`<command>.md`).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    pub pool: Option<PathBuf>,
    pub manuals_dir: Option<PathBuf>,
    pub examples: Option<PathBuf>,
    pub tldr_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub mode: SplitMode,
    /// Exact train/dev/test sizes. When absent, sizes follow `fractions`.
    pub targets: Option<[usize; 3]>,
    pub fractions: [f64; 3],
    pub granularity: NameGranularity,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            mode: SplitMode::DisjointGroup,
            targets: None,
            fractions: [0.7, 0.2, 0.1],
            granularity: NameGranularity::CallPath,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Retriever {
    Sparse,
    TwoStage,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub method: Retriever,
    pub k: usize,
    /// Unit granularity for the plain sparse retriever.
    pub granularity: Granularity,
    /// Doc vectors keyed by doc_id, for the dense retriever.
    pub doc_embeddings: Option<PathBuf>,
    /// Intent vectors keyed by example_id, for the dense retriever.
    pub query_embeddings: Option<PathBuf>,
    /// Split whose examples are retrieved for, prompted and evaluated.
    pub eval_split: Split,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            method: Retriever::TwoStage,
            k: 20,
            granularity: Granularity::Paragraph,
            doc_embeddings: None,
            query_embeddings: None,
            eval_split: Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    FewshotConcat,
    FidPairs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub mode: PromptMode,
    pub shots: usize,
    pub with_docs: bool,
    pub doc_cap: usize,
    pub doc_token_budget: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            mode: PromptMode::FewshotConcat,
            shots: 3,
            with_docs: true,
            doc_cap: DEFAULT_DOC_CAP,
            doc_token_budget: DEFAULT_DOC_TOKEN_BUDGET,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub backend: Backend,
    pub mock: MockCompleter,
    pub endpoint: EndpointConfig,
    #[serde(flatten)]
    pub options: GenerateOptions,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            backend: Backend::Mock,
            mock: MockCompleter::DocEcho,
            endpoint: EndpointConfig::default(),
            options: GenerateOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Metric names to keep in the report; empty keeps all.
    pub metrics: Vec<String>,
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            metrics: Vec::new(),
            ks: vec![1, 5, 10, 20],
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML and resolves relative paths against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> anyhow::Result<Self> {
        let mut config: ExperimentConfig = toml::from_str(text).context("invalid experiment config")?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        resolve(&mut config.work_dir);
        for p in [
            &mut config.input.pool,
            &mut config.input.manuals_dir,
            &mut config.input.examples,
            &mut config.input.tldr_dir,
            &mut config.retrieval.doc_embeddings,
            &mut config.retrieval.query_embeddings,
        ]
        .into_iter()
        .flatten()
        {
            resolve(p);
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let input = &self.input;
        ensure!(
            input.pool.is_some() != input.manuals_dir.is_some(),
            "input needs exactly one of `pool` and `manuals_dir`"
        );
        ensure!(
            input.examples.is_some() != input.tldr_dir.is_some(),
            "input needs exactly one of `examples` and `tldr_dir`"
        );
        for path in self.input_paths() {
            ensure!(path.exists(), "input path does not exist: {}", path.display());
        }
        ensure!(self.retrieval.k >= 1, "retrieval.k must be at least 1");
        ensure!(self.eval.ks.iter().all(|&k| k >= 1), "eval.ks entries must be at least 1");
        ensure!(self.retrieval.eval_split != Split::Unassigned, "retrieval.eval_split must be train, dev or test");
        if self.retrieval.method == Retriever::Dense {
            ensure!(
                self.retrieval.doc_embeddings.is_some() && self.retrieval.query_embeddings.is_some(),
                "dense retrieval needs `doc_embeddings` and `query_embeddings`"
            );
        }
        ensure!(self.generation.options.n_samples >= 1, "generation.n_samples must be at least 1");
        ensure!(!self.generation.options.temperatures.is_empty(), "generation.temperatures is empty");
        self.index.validate()?;
        Ok(())
    }

    fn input_paths(&self) -> Vec<&PathBuf> {
        let i = &self.input;
        [&i.pool, &i.manuals_dir, &i.examples, &i.tldr_dir, &self.retrieval.doc_embeddings, &self.retrieval.query_embeddings]
            .into_iter()
            .flatten()
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub stages: Vec<(String, StageStatus)>,
    pub report: EvalReport,
    pub report_path: PathBuf,
}

/// Artifact locations inside `work_dir`.
pub struct Artifacts {
    root: PathBuf,
}

impl Artifacts {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Artifacts { root: root.into() }
    }

    fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn pool(&self) -> PathBuf {
        self.file("pool.jsonl")
    }
    pub fn examples(&self) -> PathBuf {
        self.file("examples.jsonl")
    }
    pub fn manual_index(&self) -> PathBuf {
        self.file("manual.bm25")
    }
    pub fn paragraph_index(&self) -> PathBuf {
        self.file("paragraph.bm25")
    }
    pub fn name_index(&self) -> PathBuf {
        self.file("names.bm25")
    }
    pub fn annotated(&self) -> PathBuf {
        self.file("annotated.jsonl")
    }
    pub fn split(&self) -> PathBuf {
        self.file("split.jsonl")
    }
    pub fn split_report(&self) -> PathBuf {
        self.file("split_report.json")
    }
    pub fn retrieved(&self) -> PathBuf {
        self.file("retrieved.jsonl")
    }
    pub fn prompts(&self) -> PathBuf {
        self.file("prompts.jsonl")
    }
    pub fn samples(&self) -> PathBuf {
        self.file("samples.jsonl")
    }
    pub fn failures(&self) -> PathBuf {
        self.file("failures.jsonl")
    }
    pub fn report(&self) -> PathBuf {
        self.file("report.json")
    }
    pub fn failed_marker(&self) -> PathBuf {
        self.file("FAILED")
    }
    fn stage_record(&self, stage: &str) -> PathBuf {
        self.root.join(".stages").join(format!("{stage}.sha256"))
    }
}

/// Ranked results for one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedRecord {
    pub example_id: String,
    pub results: Vec<RetrievalResult>,
}

fn hash_path(hasher: &mut Sha256, path: &Path) -> anyhow::Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        entries.sort();
        for entry in entries {
            hasher.update(entry.file_name().unwrap_or_default().as_encoded_bytes());
            hasher.update([0]);
            hash_path(hasher, &entry)?;
        }
    } else {
        let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(())
}

/// SHA-256 over the stage name, its settings and the contents of its inputs.
pub fn stage_digest(stage: &str, settings: &serde_json::Value, inputs: &[PathBuf]) -> anyhow::Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(stage.as_bytes());
    hasher.update([0]);
    hasher.update(settings.to_string().as_bytes());
    for input in inputs {
        hasher.update([1]);
        hash_path(&mut hasher, input)?;
    }
    Ok(hex::encode(hasher.finalize()))
}

struct Runner<'a> {
    artifacts: &'a Artifacts,
    statuses: Vec<(String, StageStatus)>,
}

impl Runner<'_> {
    fn stage(
        &mut self,
        name: &str,
        settings: serde_json::Value,
        inputs: Vec<PathBuf>,
        outputs: Vec<PathBuf>,
        body: impl FnOnce() -> anyhow::Result<()>,
    ) -> anyhow::Result<()> {
        let result: anyhow::Result<StageStatus> = (|| {
            let digest = stage_digest(name, &settings, &inputs)?;
            let record = self.artifacts.stage_record(name);
            let fresh = fs::read_to_string(&record).map(|d| d.trim() == digest).unwrap_or(false)
                && outputs.iter().all(|p| p.exists());
            if fresh {
                return Ok(StageStatus::Skipped);
            }
            let _ = fs::remove_file(&record);
            body()?;
            fs::create_dir_all(record.parent().expect("record has a parent"))?;
            fs::write(&record, format!("{digest}\n"))?;
            Ok(StageStatus::Ran)
        })();
        match result {
            Ok(status) => {
                self.statuses.push((name.to_string(), status));
                Ok(())
            }
            Err(e) => {
                let marker = serde_json::json!({ "stage": name, "error": format!("{e:#}") });
                let _ = fs::write(self.artifacts.failed_marker(), format!("{marker}\n"));
                Err(e.context(format!("stage `{name}` failed")))
            }
        }
    }
}

fn sorted_files(dir: &Path, ext: &str) -> anyhow::Result<Vec<(String, PathBuf)>> {
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

fn ingest(config: &ExperimentConfig, artifacts: &Artifacts) -> anyhow::Result<()> {
    let pool = match (&config.input.pool, &config.input.manuals_dir) {
        (Some(path), _) => DocPool::load(path)?,
        (None, Some(dir)) => {
            let mut docs = Vec::new();
            for (command, path) in sorted_files(dir, "txt")? {
                docs.extend(corpus::split_manual(&fs::read_to_string(&path)?, &command));
            }
            DocPool::from_docs(docs)?
        }
        (None, None) => bail!("no document source configured"),
    };
    let examples = match (&config.input.examples, &config.input.tldr_dir) {
        (Some(path), _) => corpus::read_examples(path)?,
        (None, Some(dir)) => {
            let mut examples = Vec::new();
            for (command, path) in sorted_files(dir, "md")? {
                let page = fs::read_to_string(&path)?;
                examples.extend(
                    corpus::tldr_examples(&page, &command).with_context(|| format!("in {}", path.display()))?,
                );
            }
            examples
        }
        (None, None) => bail!("no example source configured"),
    };
    for ex in &examples {
        ex.validate(Some(&pool))?;
    }
    pool.save(&artifacts.pool())?;
    corpus::write_examples(&artifacts.examples(), &examples)?;
    Ok(())
}

fn build_indexes(config: &ExperimentConfig, artifacts: &Artifacts) -> anyhow::Result<()> {
    let pool = DocPool::load(&artifacts.pool())?;
    build_index(&pool, Granularity::Manual, config.index)?.save(&artifacts.manual_index())?;
    build_index(&pool, Granularity::Paragraph, config.index)?.save(&artifacts.paragraph_index())?;
    build_name_index(&pool, config.index)?.save(&artifacts.name_index())?;
    Ok(())
}

fn annotate(config: &ExperimentConfig, artifacts: &Artifacts) -> anyhow::Result<()> {
    let pool = DocPool::load(&artifacts.pool())?;
    let mut examples = corpus::read_examples(&artifacts.examples())?;
    match config.language {
        Language::Bash => {
            for ex in &mut examples {
                ex.oracle_doc_ids = match annotate_shell(ex, &pool) {
                    Ok(ids) => ids,
                    Err(OracleError::UnknownCommand(_)) => Vec::new(),
                };
            }
        }
        Language::Python => {
            let names = InvertedIndex::load(&artifacts.name_index())?;
            for ex in &mut examples {
                ex.oracle_doc_ids = annotate_function_docs(ex, &names, &pool, DEFAULT_FUNCTION_K);
            }
        }
    }
    corpus::write_examples(&artifacts.annotated(), &examples)?;
    Ok(())
}

/// Train/dev/test sizes from explicit targets or from fractions of `units`.
/// Dev and test get at least one unit each; train takes the remainder.
pub fn resolve_targets(config: &SplitConfig, units: usize) -> anyhow::Result<[usize; 3]> {
    if let Some(t) = config.targets {
        return Ok(t);
    }
    let [_, fd, ft] = config.fractions;
    let dev = ((fd * units as f64).round() as usize).max(1);
    let test = ((ft * units as f64).round() as usize).max(1);
    ensure!(dev + test < units, "{units} units are too few for a three-way split");
    Ok([units - dev - test, dev, test])
}

fn run_split(config: &ExperimentConfig, artifacts: &Artifacts) -> anyhow::Result<()> {
    let mut examples = corpus::read_examples(&artifacts.annotated())?;
    let units = match config.split.mode {
        SplitMode::DisjointGroup => examples.iter().map(|e| &e.group_key).collect::<BTreeSet<_>>().len(),
        SplitMode::UnseenFunction => examples.len(),
    };
    let spec = SplitSpec {
        mode: config.split.mode,
        seed: config.seed,
        targets: resolve_targets(&config.split, units)?,
        granularity: config.split.granularity,
    };
    let assignment = split::split(&examples, &spec)?;
    let violations = split::verify_split(&examples, &assignment, spec.mode, spec.granularity);
    if let Some(v) = violations.first() {
        bail!("split has {} violations, first: {v}", violations.len());
    }
    split::apply_assignment(&mut examples, &assignment);
    let sizes: BTreeMap<String, serde_json::Value> = split::split_sizes(&examples, &assignment)
        .into_iter()
        .map(|(s, (n, g))| (s.to_string(), serde_json::json!({ "examples": n, "groups": g })))
        .collect();
    let report = serde_json::json!({ "spec": spec, "sizes": sizes });
    fs::write(artifacts.split_report(), format!("{}\n", serde_json::to_string_pretty(&report)?))?;
    corpus::write_examples(&artifacts.split(), &examples)?;
    Ok(())
}

fn eval_examples(config: &ExperimentConfig, artifacts: &Artifacts) -> anyhow::Result<Vec<Example>> {
    let mut examples: Vec<Example> = corpus::read_examples(&artifacts.split())?
        .into_iter()
        .filter(|e| e.split == config.retrieval.eval_split)
        .collect();
    examples.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    Ok(examples)
}

fn retrieve(config: &ExperimentConfig, artifacts: &Artifacts) -> anyhow::Result<()> {
    let examples = eval_examples(config, artifacts)?;
    let k = config.retrieval.k;
    let records: Vec<RetrievedRecord> = match config.retrieval.method {
        Retriever::Sparse => {
            let index = InvertedIndex::load(&match config.retrieval.granularity {
                Granularity::Paragraph => artifacts.paragraph_index(),
                Granularity::Manual => artifacts.manual_index(),
            })?;
            examples
                .par_iter()
                .map(|e| RetrievedRecord {
                    example_id: e.example_id.clone(),
                    results: index.search(&e.intent, k),
                })
                .collect()
        }
        Retriever::TwoStage => {
            let manual = InvertedIndex::load(&artifacts.manual_index())?;
            let paragraph = InvertedIndex::load(&artifacts.paragraph_index())?;
            examples
                .par_iter()
                .map(|e| RetrievedRecord {
                    example_id: e.example_id.clone(),
                    results: two_stage_search(&manual, &paragraph, &e.intent, k),
                })
                .collect()
        }
        Retriever::Dense => {
            let docs = EmbeddingSet::load(config.retrieval.doc_embeddings.as_ref().expect("validated"))?;
            let queries = EmbeddingSet::load(config.retrieval.query_embeddings.as_ref().expect("validated"))?;
            examples
                .par_iter()
                .map(|e| {
                    let q = queries
                        .get(&e.example_id)
                        .with_context(|| format!("no query embedding for `{}`", e.example_id))?;
                    Ok(RetrievedRecord {
                        example_id: e.example_id.clone(),
                        results: dense_search(&docs, q, k)?,
                    })
                })
                .collect::<anyhow::Result<_>>()?
        }
    };
    jsonl::write(&artifacts.retrieved(), &records)?;
    Ok(())
}

/// A paragraph id resolves to itself; a parent key to its first paragraph.
fn resolve_doc<'a>(pool: &'a DocPool, doc_ref: &str) -> Option<&'a Doc> {
    pool.get(doc_ref).or_else(|| pool.paragraphs(doc_ref).and_then(|mut p| p.next()))
}

fn build_prompts(config: &ExperimentConfig, artifacts: &Artifacts) -> anyhow::Result<()> {
    let pool = DocPool::load(&artifacts.pool())?;
    let all = corpus::read_examples(&artifacts.split())?;
    let mut train: Vec<&Example> = all
        .iter()
        .filter(|e| e.split == Split::Train && !e.oracle_doc_ids.is_empty())
        .collect();
    train.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    let docs_for = |ids: &mut dyn Iterator<Item = &str>| -> Vec<Doc> {
        ids.filter_map(|id| resolve_doc(&pool, id)).cloned().collect()
    };
    let shots: Vec<Shot> = train
        .iter()
        .take(config.prompt.shots)
        .map(|e| Shot {
            intent: e.intent.clone(),
            code: e.code.clone(),
            docs: docs_for(&mut e.oracle_doc_ids.iter().map(String::as_str)),
        })
        .collect();
    let retrieved: BTreeMap<String, Vec<RetrievalResult>> = jsonl::read::<RetrievedRecord>(&artifacts.retrieved())?
        .into_iter()
        .map(|r| (r.example_id, r.results))
        .collect();
    let p = &config.prompt;
    let bundles: Vec<PromptBundle> = eval_examples(config, artifacts)?
        .iter()
        .map(|e| {
            let docs = docs_for(
                &mut retrieved
                    .get(&e.example_id)
                    .into_iter()
                    .flatten()
                    .map(|r| r.doc_ref.as_str()),
            );
            match p.mode {
                PromptMode::FewshotConcat => PromptBundle::FewshotConcat {
                    example_id: e.example_id.clone(),
                    prompt: build_fewshot_prompt_capped(&shots, &e.intent, &docs, p.with_docs, p.doc_cap),
                },
                PromptMode::FidPairs => PromptBundle::FidPairs {
                    example_id: e.example_id.clone(),
                    segments: build_fid_inputs(&e.intent, &docs, p.doc_token_budget),
                    doc_token_budget: p.doc_token_budget,
                },
            }
        })
        .collect();
    jsonl::write(&artifacts.prompts(), &bundles)?;
    Ok(())
}

/// Builds the configured completion backend.
pub fn completer(config: &GenerationConfig) -> anyhow::Result<Box<dyn Completer>> {
    Ok(match config.backend {
        Backend::Mock => Box::new(config.mock.clone()),
        Backend::Http => Box::new(HttpCompleter::new(config.endpoint.clone())?),
    })
}

fn run_generation(config: &ExperimentConfig, artifacts: &Artifacts) -> anyhow::Result<()> {
    let bundles: Vec<PromptBundle> = jsonl::read(&artifacts.prompts())?;
    let completer = completer(&config.generation)?;
    let out = generate(&bundles, completer.as_ref(), &config.generation.options);
    jsonl::write(&artifacts.samples(), &out.samples)?;
    jsonl::write(&artifacts.failures(), &out.failures)?;
    Ok(())
}

/// One hypothesis per example: sample 0 at the first configured temperature,
/// or the empty string when generation failed.
fn first_hypotheses(samples: &[GenSample], temperature: f64) -> BTreeMap<&str, &str> {
    samples
        .iter()
        .filter(|s| s.sample_index == 0 && s.temperature == temperature)
        .map(|s| (s.example_id.as_str(), s.completion.as_str()))
        .collect()
}

fn evaluate(config: &ExperimentConfig, artifacts: &Artifacts) -> anyhow::Result<EvalReport> {
    let examples = eval_examples(config, artifacts)?;
    ensure!(!examples.is_empty(), "no {} examples to evaluate", config.retrieval.eval_split);
    let samples: Vec<GenSample> = jsonl::read(&artifacts.samples())?;
    let hyps_by_id = first_hypotheses(&samples, config.generation.options.temperatures[0]);
    let ids: Vec<String> = examples.iter().map(|e| e.example_id.clone()).collect();
    let refs: Vec<String> = examples.iter().map(|e| e.code.clone()).collect();
    let hyps: Vec<String> = ids
        .iter()
        .map(|id| hyps_by_id.get(id.as_str()).copied().unwrap_or("").to_string())
        .collect();
    let mut report = match config.language {
        Language::Bash => metrics::evaluate_bash(&ids, &refs, &hyps)?,
        Language::Python => {
            let vocab: BTreeSet<String> = corpus::read_examples(&artifacts.split())?
                .iter()
                .filter(|e| e.split == Split::Train)
                .flat_map(|e| config.split.granularity.names(&e.code))
                .collect();
            metrics::evaluate_python(&ids, &refs, &hyps, &vocab)?
        }
    };
    let retrieved: BTreeMap<String, Vec<String>> = jsonl::read::<RetrievedRecord>(&artifacts.retrieved())?
        .into_iter()
        .map(|r| (r.example_id, r.results.into_iter().map(|x| x.doc_ref).collect()))
        .collect();
    let results: Vec<Vec<String>> = ids.iter().map(|id| retrieved.get(id).cloned().unwrap_or_default()).collect();
    let oracles: Vec<Vec<String>> = examples.iter().map(|e| e.oracle_doc_ids.clone()).collect();
    if oracles.iter().any(|o| !o.is_empty()) {
        report.extend(metrics::evaluate_retrieval(&ids, &results, &oracles, &config.eval.ks)?);
    }
    report.push("examples", Unit::Count, ids.len() as f64);
    let failures: Vec<serde_json::Value> = jsonl::read(&artifacts.failures())?;
    report.push("generation_failures", Unit::Count, failures.len() as f64);
    if !config.eval.metrics.is_empty() {
        let keep: BTreeSet<&str> = config.eval.metrics.iter().map(String::as_str).collect();
        report.metrics.retain(|m| keep.contains(m.name.as_str()));
        for row in &mut report.rows {
            row.values.retain(|name, _| keep.contains(name.as_str()));
        }
    }
    Ok(report)
}

fn settings<T: Serialize>(value: &T) -> serde_json::Value {
    serde_json::to_value(value).expect("config serializes")
}

/// Runs every stage in order and returns the final report, which is also
/// written to `work_dir/report.json`.
pub fn run_pipeline(config: &ExperimentConfig) -> anyhow::Result<RunSummary> {
    config.validate()?;
    fs::create_dir_all(&config.work_dir)
        .with_context(|| format!("cannot create work dir {}", config.work_dir.display()))?;
    let a = Artifacts::new(&config.work_dir);
    let _ = fs::remove_file(a.failed_marker());
    let mut runner = Runner {
        artifacts: &a,
        statuses: Vec::new(),
    };
    let sources: Vec<PathBuf> = [&config.input.pool, &config.input.manuals_dir, &config.input.examples, &config.input.tldr_dir]
        .into_iter()
        .flatten()
        .cloned()
        .collect();
    runner.stage("ingest", settings(&config.input), sources, vec![a.pool(), a.examples()], || ingest(config, &a))?;
    runner.stage(
        "index",
        settings(&config.index),
        vec![a.pool()],
        vec![a.manual_index(), a.paragraph_index(), a.name_index()],
        || build_indexes(config, &a),
    )?;
    runner.stage(
        "annotate",
        settings(&config.language),
        vec![a.pool(), a.examples(), a.name_index()],
        vec![a.annotated()],
        || annotate(config, &a),
    )?;
    runner.stage(
        "split",
        settings(&(config.seed, &config.split)),
        vec![a.annotated()],
        vec![a.split(), a.split_report()],
        || run_split(config, &a),
    )?;
    let mut retrieve_inputs = vec![a.split(), a.manual_index(), a.paragraph_index()];
    retrieve_inputs.extend(config.retrieval.doc_embeddings.iter().cloned());
    retrieve_inputs.extend(config.retrieval.query_embeddings.iter().cloned());
    runner.stage("retrieve", settings(&config.retrieval), retrieve_inputs, vec![a.retrieved()], || {
        retrieve(config, &a)
    })?;
    runner.stage(
        "prompt",
        settings(&config.prompt),
        vec![a.pool(), a.split(), a.retrieved()],
        vec![a.prompts()],
        || build_prompts(config, &a),
    )?;
    runner.stage(
        "generate",
        settings(&config.generation),
        vec![a.prompts()],
        vec![a.samples(), a.failures()],
        || run_generation(config, &a),
    )?;
    let mut report = None;
    runner.stage(
        "eval",
        settings(&(&config.eval, &config.language, &config.generation.options.temperatures)),
        vec![a.split(), a.retrieved(), a.samples(), a.failures()],
        vec![a.report()],
        || {
            let r = evaluate(config, &a)?;
            fs::write(a.report(), r.to_json())?;
            report = Some(r);
            Ok(())
        },
    )?;
    let report = match report {
        Some(r) => r,
        None => EvalReport::from_json(&fs::read_to_string(a.report())?)?,
    };
    Ok(RunSummary {
        stages: runner.statuses,
        report,
        report_path: a.report(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub name: String,
    pub unit: Option<Unit>,
    pub a: Option<f64>,
    pub b: Option<f64>,
    /// `b - a`; `None` when the metric is missing from one side or the units
    /// disagree.
    pub delta: Option<f64>,
}

impl MetricDelta {
    pub fn comparable(&self) -> bool {
        self.delta.is_some()
    }
}

/// Aligns metrics by name: those of `a` in order, then those only in `b`.
pub fn report_diff(a: &EvalReport, b: &EvalReport) -> Vec<MetricDelta> {
    let mut names: Vec<&str> = a.metrics.iter().map(|m| m.name.as_str()).collect();
    for m in &b.metrics {
        if !names.contains(&m.name.as_str()) {
            names.push(&m.name);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let (ma, mb) = (a.get(name), b.get(name));
            let delta = match (ma, mb) {
                (Some(x), Some(y)) if x.unit == y.unit => Some(y.value - x.value),
                _ => None,
            };
            let unit = match (ma, mb) {
                (Some(x), Some(y)) if x.unit != y.unit => None,
                _ => ma.or(mb).map(|m| m.unit),
            };
            MetricDelta {
                name: name.to_string(),
                unit,
                a: ma.map(|m| m.value),
                b: mb.map(|m| m.value),
                delta,
            }
        })
        .collect()
}
