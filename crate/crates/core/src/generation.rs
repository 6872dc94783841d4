//! Prompt assembly and completion-endpoint driving.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::Doc;

pub const DEFAULT_DOC_CAP: usize = 5;
pub const DEFAULT_DOC_TOKEN_BUDGET: usize = 200;
pub const DEFAULT_TOP_P: f64 = 0.95;
pub const STOP_END: &str = "# END";
pub const TEMPERATURE_SWEEP: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

/// One in-context demonstration.
#[derive(Debug, Clone)]
pub struct Shot {
    pub intent: String,
    pub code: String,
    pub docs: Vec<Doc>,
}

fn doc_text(doc: &Doc) -> String {
    doc.body.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn push_docs(out: &mut String, docs: &[Doc], cap: usize) {
    for (i, doc) in docs.iter().take(cap).enumerate() {
        out.push_str(&format!("Potential document {i}: {}\n\n", doc_text(doc)));
    }
}

/// Few-shot prompt with at most [`DEFAULT_DOC_CAP`] docs per block.
pub fn build_fewshot_prompt(shots: &[Shot], test_intent: &str, test_docs: &[Doc], with_docs: bool) -> String {
    build_fewshot_prompt_capped(shots, test_intent, test_docs, with_docs, DEFAULT_DOC_CAP)
}

/// Each shot renders as `# {intent}\n{code}\n# END\n\n`, optionally preceded
/// by up to `doc_cap` `Potential document {i}: ...` blocks. The prompt ends
/// with the test docs and `# {test_intent}\n`.
pub fn build_fewshot_prompt_capped(
    shots: &[Shot],
    test_intent: &str,
    test_docs: &[Doc],
    with_docs: bool,
    doc_cap: usize,
) -> String {
    let mut out = String::new();
    for shot in shots {
        if with_docs {
            push_docs(&mut out, &shot.docs, doc_cap);
        }
        out.push_str(&format!("# {}\n{}\n{STOP_END}\n\n", shot.intent, shot.code));
    }
    if with_docs {
        push_docs(&mut out, test_docs, doc_cap);
    }
    out.push_str(&format!("# {test_intent}\n"));
    out
}

/// One FiD segment per doc in rank order, each holding the intent, a
/// `Document (<id>):` header and the first `budget` whitespace tokens of the
/// doc body. With no docs, a single segment holds the intent alone.
pub fn build_fid_inputs(intent: &str, docs: &[Doc], budget: usize) -> Vec<String> {
    if docs.is_empty() {
        return vec![intent.to_string()];
    }
    docs.iter()
        .map(|doc| {
            let text: Vec<&str> = doc.body.split_whitespace().take(budget).collect();
            format!("{intent}\nDocument ({}):\n{}", doc.doc_id, text.join(" "))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PromptBundle {
    FewshotConcat {
        example_id: String,
        prompt: String,
    },
    FidPairs {
        example_id: String,
        segments: Vec<String>,
        doc_token_budget: usize,
    },
}

impl PromptBundle {
    pub fn example_id(&self) -> &str {
        match self {
            PromptBundle::FewshotConcat { example_id, .. } | PromptBundle::FidPairs { example_id, .. } => example_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSample {
    pub example_id: String,
    pub temperature: f64,
    pub sample_index: usize,
    pub completion: String,
}

/// Body of `POST {base_url}/completions`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segments: Option<Vec<String>>,
    pub max_tokens: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub n: usize,
    pub stop: Vec<String>,
}

impl CompletionRequest {
    fn for_bundle(bundle: &PromptBundle, model: &str, opts: &GenerateOptions, temperature: f64) -> Self {
        let (prompt, segments) = match bundle {
            PromptBundle::FewshotConcat { prompt, .. } => (prompt.clone(), None),
            PromptBundle::FidPairs { segments, .. } => (segments.join("\n\n"), Some(segments.clone())),
        };
        CompletionRequest {
            model: model.to_string(),
            prompt,
            segments,
            max_tokens: opts.max_tokens,
            temperature,
            top_p: opts.top_p,
            n: opts.n_samples,
            stop: opts.stop.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EndpointError {
    #[error("transient endpoint failure (status {status:?}): {message}")]
    Transient { status: Option<u16>, message: String },
    #[error("endpoint rejected request (status {status:?}): {message}")]
    Fatal { status: Option<u16>, message: String },
}

impl EndpointError {
    pub fn status(&self) -> Option<u16> {
        match self {
            EndpointError::Transient { status, .. } | EndpointError::Fatal { status, .. } => *status,
        }
    }
}

pub trait Completer: Sync {
    fn model(&self) -> &str;
    fn complete(&self, request: &CompletionRequest) -> Result<Vec<String>, EndpointError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding a bearer token.
    pub token_env: Option<String>,
    pub timeout_secs: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: "http://127.0.0.1:8080".into(),
            model: "code-model".into(),
            token_env: None,
            timeout_secs: 60,
        }
    }
}

/// Blocking HTTP client for a minimal completion schema. Responses may be
/// `{"completions": [...]}` or `{"choices": [{"text": ...}]}`.
pub struct HttpCompleter {
    config: EndpointConfig,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct Choice {
    text: String,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CompletionResponse {
    Plain { completions: Vec<String> },
    Choices { choices: Vec<Choice> },
}

impl HttpCompleter {
    pub fn new(config: EndpointConfig) -> Result<Self, EndpointError> {
        let token = match &config.token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| EndpointError::Fatal {
                status: None,
                message: format!("environment variable {var} is not set"),
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| EndpointError::Fatal {
                status: None,
                message: e.to_string(),
            })?;
        Ok(HttpCompleter { config, token, client })
    }
}

impl Completer for HttpCompleter {
    fn model(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Vec<String>, EndpointError> {
        let url = format!("{}/completions", self.config.base_url.trim_end_matches('/'));
        let mut builder = self.client.post(url).json(request);
        if let Some(token) = &self.token {
            builder = builder.bearer_auth(token);
        }
        let response = builder.send().map_err(|e| EndpointError::Transient {
            status: None,
            message: e.to_string(),
        })?;
        let status = response.status();
        if !status.is_success() {
            let message = response.text().unwrap_or_default();
            let status = Some(status.as_u16());
            return Err(if status == Some(429) || status >= Some(500) {
                EndpointError::Transient { status, message }
            } else {
                EndpointError::Fatal { status, message }
            });
        }
        let body: CompletionResponse = response.json().map_err(|e| EndpointError::Fatal {
            status: Some(status.as_u16()),
            message: format!("malformed response: {e}"),
        })?;
        Ok(match body {
            CompletionResponse::Plain { completions } => completions,
            CompletionResponse::Choices { choices } => choices.into_iter().map(|c| c.text).collect(),
        })
    }
}

/// In-process endpoint for tests and dry runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockCompleter {
    /// Returns the same text for every sample.
    Canned(String),
    /// Answers `<command> <flag>` read off the test-time documents: the
    /// command from the first `name - description` doc and the flag from the
    /// first doc that starts with one. Falls back to `echo`. A stop marker and
    /// trailing junk follow the answer.
    DocEcho,
}

impl MockCompleter {
    fn doc_echo(prompt: &str, segments: Option<&[String]>) -> String {
        let docs: Vec<String> = match segments {
            Some(segs) => segs
                .iter()
                .filter_map(|s| s.split_once("):\n").map(|(_, d)| d.to_string()))
                .collect(),
            None => {
                let tail = prompt.rsplit(&format!("{STOP_END}\n\n")).next().unwrap_or(prompt);
                tail.lines()
                    .filter_map(|l| l.strip_prefix("Potential document "))
                    .filter_map(|l| l.split_once(": ").map(|(_, d)| d.to_string()))
                    .collect()
            }
        };
        let command = docs.iter().find_map(|d| {
            let mut words = d.split_whitespace();
            match (words.next(), words.next()) {
                (Some(name), Some("-")) => Some(name.to_string()),
                _ => None,
            }
        });
        let flag = docs
            .iter()
            .filter_map(|d| d.split_whitespace().next())
            .find(|w| w.starts_with('-') && w.len() > 1)
            .map(|w| w.trim_end_matches(',').to_string());
        let answer: Vec<String> = command.into_iter().chain(flag).collect();
        let answer = if answer.is_empty() { "echo".to_string() } else { answer.join(" ") };
        format!("{answer}\n{STOP_END}\n# unrelated trailing text")
    }
}

impl Completer for MockCompleter {
    fn model(&self) -> &str {
        "mock"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Vec<String>, EndpointError> {
        let text = match self {
            MockCompleter::Canned(text) => text.clone(),
            MockCompleter::DocEcho => Self::doc_echo(&request.prompt, request.segments.as_deref()),
        };
        Ok(vec![text; request.n])
    }
}

/// Cuts `text` at the earliest stop sequence and trims trailing whitespace.
pub fn trim_at_stop(text: &str, stop: &[String]) -> String {
    let cut = stop
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    text[..cut].trim_end().to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateOptions {
    pub n_samples: usize,
    pub temperatures: Vec<f64>,
    pub top_p: f64,
    pub stop: Vec<String>,
    pub max_tokens: usize,
    pub max_in_flight: usize,
    pub max_retries: u32,
    pub backoff_ms: u64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            n_samples: 1,
            temperatures: vec![TEMPERATURE_SWEEP[0]],
            top_p: DEFAULT_TOP_P,
            stop: vec![STOP_END.to_string()],
            max_tokens: 128,
            max_in_flight: 4,
            max_retries: 3,
            backoff_ms: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenFailure {
    pub example_id: String,
    pub temperature: f64,
    pub status: Option<u16>,
    pub attempts: u32,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenerationOutput {
    pub samples: Vec<GenSample>,
    pub failures: Vec<GenFailure>,
}

fn with_retries(
    completer: &dyn Completer,
    request: &CompletionRequest,
    opts: &GenerateOptions,
) -> (Result<Vec<String>, EndpointError>, u32) {
    let mut attempt = 0;
    loop {
        attempt += 1;
        match completer.complete(request) {
            Err(EndpointError::Transient { .. }) if attempt <= opts.max_retries => {
                let delay = opts.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            other => return (other, attempt),
        }
    }
}

/// Requests `n_samples` completions per (bundle, temperature) with at most
/// `max_in_flight` concurrent requests. Samples come back sorted by
/// (example_id, temperature, sample_index); failed jobs are listed in
/// `failures`.
pub fn generate(bundles: &[PromptBundle], completer: &dyn Completer, opts: &GenerateOptions) -> GenerationOutput {
    let jobs: Vec<(&PromptBundle, f64)> = bundles
        .iter()
        .flat_map(|b| opts.temperatures.iter().map(move |&t| (b, t)))
        .collect();
    let next = AtomicUsize::new(0);
    let results = Mutex::new(GenerationOutput::default());
    let workers = opts.max_in_flight.clamp(1, jobs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(bundle, temperature)) = jobs.get(i) else {
                    break;
                };
                let request = CompletionRequest::for_bundle(bundle, completer.model(), opts, temperature);
                let (outcome, attempts) = with_retries(completer, &request, opts);
                let example_id = bundle.example_id().to_string();
                let mut out = results.lock().expect("results lock");
                match outcome {
                    Ok(texts) => {
                        if texts.len() < opts.n_samples {
                            out.failures.push(GenFailure {
                                example_id: example_id.clone(),
                                temperature,
                                status: None,
                                attempts,
                                message: format!("endpoint returned {} of {} samples", texts.len(), opts.n_samples),
                            });
                        }
                        for (sample_index, text) in texts.iter().take(opts.n_samples).enumerate() {
                            out.samples.push(GenSample {
                                example_id: example_id.clone(),
                                temperature,
                                sample_index,
                                completion: trim_at_stop(text, &opts.stop),
                            });
                        }
                    }
                    Err(e) => out.failures.push(GenFailure {
                        example_id,
                        temperature,
                        status: e.status(),
                        attempts,
                        message: e.to_string(),
                    }),
                }
            });
        }
    });
    let mut out = results.into_inner().expect("results lock");
    out.samples.sort_by(|a, b| {
        a.example_id
            .cmp(&b.example_id)
            .then(a.temperature.total_cmp(&b.temperature))
            .then(a.sample_index.cmp(&b.sample_index))
    });
    out.failures.sort_by(|a, b| {
        a.example_id
            .cmp(&b.example_id)
            .then(a.temperature.total_cmp(&b.temperature))
    });
    out
}
