//! Documentation pools, NL→code examples and the parsers that produce them.
//!
//! All text is normalized to Unicode NFC on the way in. Case is preserved;
//! tokenizers decide how to fold it.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{self, BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::jsonl::{self, JsonlError};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("line {line}: intent has no following code line")]
    MissingCode { line: usize },
    #[error("line {line}: code line has no preceding intent")]
    OrphanCode { line: usize },
    #[error("duplicate doc_id `{0}`")]
    DuplicateDocId(String),
    #[error("record {index}: missing body")]
    MissingBody { index: usize },
    #[error("record {index}: seq {found} for `{parent}` but expected {expected}")]
    NonDenseSeq {
        index: usize,
        parent: String,
        found: u32,
        expected: u32,
    },
    #[error("record {index}: {source}")]
    Record {
        index: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("example `{example}` references unknown doc `{doc_id}`")]
    UnknownOracleDoc { example: String, doc_id: String },
    #[error("example `{0}` has an empty intent or code")]
    EmptyExample(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

pub(crate) fn nfc(text: &str) -> String {
    text.nfc().collect()
}

/// Text up to and including the first `.`, `!` or `?` that is followed by
/// whitespace or the end of the text. Falls back to the whole (trimmed) text.
pub fn first_sentence(body: &str) -> String {
    let body = body.trim();
    let mut chars = body.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            match chars.peek() {
                None => return body.to_string(),
                Some(&(_, next)) if next.is_whitespace() => {
                    return body[..i + c.len_utf8()].to_string();
                }
                _ => {}
            }
        }
    }
    body.to_string()
}

/// One retrievable documentation unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Doc {
    pub doc_id: String,
    /// Command name (`toilet`) or fully-qualified function path
    /// (`matplotlib.pyplot.plot`).
    pub parent_key: String,
    pub seq: u32,
    pub title: Option<String>,
    pub body: String,
    pub first_sentence: String,
}

impl Doc {
    pub fn new(
        doc_id: impl Into<String>,
        parent_key: impl Into<String>,
        seq: u32,
        title: Option<String>,
        body: &str,
    ) -> Self {
        let body = nfc(body);
        Doc {
            doc_id: nfc(&doc_id.into()),
            parent_key: nfc(&parent_key.into()),
            seq,
            title: title.map(|t| nfc(&t)),
            first_sentence: first_sentence(&body),
            body,
        }
    }

    /// Title (when present) and body joined by a newline; this is what gets
    /// indexed.
    pub fn full_text(&self) -> String {
        match &self.title {
            Some(title) => format!("{title}\n{}", self.body),
            None => self.body.clone(),
        }
    }
}

/// Incoming pool record. Everything except `parent_key` and `body` is
/// optional; `doc_id` defaults to `{parent_key}#{seq}`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PoolRecord {
    #[serde(default)]
    pub doc_id: Option<String>,
    pub parent_key: String,
    #[serde(default)]
    pub seq: Option<u32>,
    #[serde(default)]
    pub title: Option<String>,
    #[serde(default)]
    pub body: Option<String>,
}

/// The global collection of documentation units.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DocPool {
    docs: Vec<Doc>,
    ids: HashMap<String, usize>,
    by_parent: BTreeMap<String, Vec<usize>>,
}

impl DocPool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a pool from already-formed docs, checking id uniqueness and
    /// that `seq` is dense per parent in arrival order.
    pub fn from_docs(docs: impl IntoIterator<Item = Doc>) -> Result<Self> {
        let mut pool = DocPool::new();
        for (index, doc) in docs.into_iter().enumerate() {
            pool.push(index, doc)?;
        }
        Ok(pool)
    }

    fn next_seq(&self, parent: &str) -> u32 {
        self.by_parent.get(parent).map_or(0, |v| v.len() as u32)
    }

    fn push(&mut self, index: usize, doc: Doc) -> Result<()> {
        let expected = self.next_seq(&doc.parent_key);
        if doc.seq != expected {
            return Err(CorpusError::NonDenseSeq {
                index,
                parent: doc.parent_key,
                found: doc.seq,
                expected,
            });
        }
        if self.ids.contains_key(&doc.doc_id) {
            return Err(CorpusError::DuplicateDocId(doc.doc_id));
        }
        let slot = self.docs.len();
        self.ids.insert(doc.doc_id.clone(), slot);
        self.by_parent
            .entry(doc.parent_key.clone())
            .or_default()
            .push(slot);
        self.docs.push(doc);
        Ok(())
    }

    /// Adds one record, assigning `seq` and (if absent) `doc_id`.
    pub fn push_record(&mut self, index: usize, record: PoolRecord) -> Result<&Doc> {
        let body = record.body.ok_or(CorpusError::MissingBody { index })?;
        let parent = nfc(&record.parent_key);
        let seq = self.next_seq(&parent);
        if let Some(found) = record.seq {
            if found != seq {
                return Err(CorpusError::NonDenseSeq {
                    index,
                    parent,
                    found,
                    expected: seq,
                });
            }
        }
        let doc_id = record
            .doc_id
            .unwrap_or_else(|| format!("{parent}#{seq}"));
        let doc = Doc::new(doc_id, parent, seq, record.title, &body);
        self.push(index, doc)?;
        Ok(self.docs.last().expect("just pushed"))
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Docs in insertion order.
    pub fn docs(&self) -> &[Doc] {
        &self.docs
    }

    pub fn get(&self, doc_id: &str) -> Option<&Doc> {
        self.ids.get(doc_id).map(|&i| &self.docs[i])
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.ids.contains_key(doc_id)
    }

    /// Parent keys in ascending order.
    pub fn parents(&self) -> impl Iterator<Item = &str> {
        self.by_parent.keys().map(String::as_str)
    }

    /// Paragraphs of `parent` in `seq` order.
    pub fn paragraphs(&self, parent: &str) -> Option<impl Iterator<Item = &Doc>> {
        self.by_parent
            .get(parent)
            .map(|slots| slots.iter().map(|&i| &self.docs[i]))
    }

    pub fn doc_ids_for(&self, parent: &str) -> Vec<&str> {
        self.paragraphs(parent)
            .map(|it| it.map(|d| d.doc_id.as_str()).collect())
            .unwrap_or_default()
    }

    pub fn write_to<W: Write>(&self, writer: W) -> io::Result<()> {
        jsonl::write_to(writer, &self.docs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(jsonl::write(path, &self.docs)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        ingest_pool(io::BufReader::new(file))
    }
}

/// Streams line-delimited JSON records into a pool. Blank lines are skipped;
/// record indices in errors count only non-blank lines, from 0.
pub fn ingest_pool<R: BufRead>(reader: R) -> Result<DocPool> {
    let mut pool = DocPool::new();
    let mut index = 0;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PoolRecord =
            serde_json::from_str(&line).map_err(|source| CorpusError::Record { index, source })?;
        pool.push_record(index, record)?;
        index += 1;
    }
    Ok(pool)
}

/// Same as [`ingest_pool`] for records that are already deserialized.
pub fn ingest_records(records: impl IntoIterator<Item = PoolRecord>) -> Result<DocPool> {
    let mut pool = DocPool::new();
    for (index, record) in records.into_iter().enumerate() {
        pool.push_record(index, record)?;
    }
    Ok(pool)
}

/// Splits a plain-text manual into paragraphs at runs of blank lines.
pub fn split_manual(manual_text: &str, command_name: &str) -> Vec<Doc> {
    let text = nfc(manual_text);
    let mut docs = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    let flush = |current: &mut Vec<&str>, docs: &mut Vec<Doc>| {
        if current.is_empty() {
            return;
        }
        let para = current.join("\n");
        let para = para.trim();
        if !para.is_empty() {
            let seq = docs.len() as u32;
            docs.push(Doc::new(
                format!("{command_name}#{seq}"),
                command_name,
                seq,
                None,
                para,
            ));
        }
        current.clear();
    };
    for line in text.lines() {
        if line.trim().is_empty() {
            flush(&mut current, &mut docs);
        } else {
            current.push(line);
        }
    }
    flush(&mut current, &mut docs);
    docs
}

fn rewrite_placeholders(code: &str) -> String {
    let mut out = String::with_capacity(code.len());
    let mut rest = code;
    while let Some(start) = rest.find("{{") {
        match rest[start + 2..].find("}}") {
            Some(len) => {
                out.push_str(&rest[..start]);
                out.push('[');
                out.push_str(&rest[start + 2..start + 2 + len]);
                out.push(']');
                rest = &rest[start + 2 + len + 2..];
            }
            None => break,
        }
    }
    out.push_str(rest);
    out
}

fn is_intent_line(line: &str) -> bool {
    line.starts_with("- ") && line.ends_with(':')
}

fn code_line(line: &str) -> Option<&str> {
    (line.len() >= 2 && line.starts_with('`') && line.ends_with('`'))
        .then(|| &line[1..line.len() - 1])
}

/// Parses a tldr page into `(intent, code)` pairs in page order.
///
/// Intent lines look like `- do something:`; the next non-blank line must be
/// a single-backtick code line. `{{placeholder}}` becomes `[placeholder]`.
/// `command_name` is only used by callers for context; the page's own `#`
/// header is not checked against it.
pub fn parse_tldr_page(markdown_text: &str, _command_name: &str) -> Result<Vec<(String, String)>> {
    let text = nfc(markdown_text);
    let mut pairs = Vec::new();
    let mut pending: Option<(usize, &str)> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if is_intent_line(line) {
            if let Some((at, _)) = pending {
                return Err(CorpusError::MissingCode { line: at });
            }
            let intent = line[2..line.len() - 1].trim();
            pending = Some((line_no, intent));
        } else if let Some(code) = code_line(line) {
            match pending.take() {
                Some((_, intent)) => {
                    pairs.push((intent.to_string(), rewrite_placeholders(code.trim())));
                }
                None => return Err(CorpusError::OrphanCode { line: line_no }),
            }
        } else if let Some((at, _)) = pending {
            return Err(CorpusError::MissingCode { line: at });
        }
    }
    if let Some((at, _)) = pending {
        return Err(CorpusError::MissingCode { line: at });
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Bash,
    Python,
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Language::Bash => "bash",
            Language::Python => "python",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
    #[default]
    Unassigned,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One NL intent with its reference code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub example_id: String,
    pub intent: String,
    pub code: String,
    pub language: Language,
    /// Command name for shell data, StackOverflow post id for Python data.
    pub group_key: String,
    #[serde(default)]
    pub oracle_doc_ids: Vec<String>,
    #[serde(default)]
    pub split: Split,
}

impl Example {
    pub fn validate(&self, pool: Option<&DocPool>) -> Result<()> {
        if self.intent.trim().is_empty() || self.code.trim().is_empty() {
            return Err(CorpusError::EmptyExample(self.example_id.clone()));
        }
        if let Some(pool) = pool {
            if let Some(missing) = self.oracle_doc_ids.iter().find(|id| !pool.contains(id)) {
                return Err(CorpusError::UnknownOracleDoc {
                    example: self.example_id.clone(),
                    doc_id: missing.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Parses a tldr page straight into examples with ids `{command}/{i}`.
pub fn tldr_examples(markdown_text: &str, command_name: &str) -> Result<Vec<Example>> {
    let command = nfc(command_name);
    Ok(parse_tldr_page(markdown_text, &command)?
        .into_iter()
        .enumerate()
        .map(|(i, (intent, code))| Example {
            example_id: format!("{command}/{i}"),
            intent,
            code,
            language: Language::Bash,
            group_key: command.clone(),
            oracle_doc_ids: Vec::new(),
            split: Split::Unassigned,
        })
        .collect())
}

pub fn read_examples(path: &Path) -> Result<Vec<Example>> {
    Ok(jsonl::read(path)?)
}

pub fn write_examples(path: &Path, examples: &[Example]) -> Result<()> {
    Ok(jsonl::write(path, examples)?)
}
