//! BM25 inverted index over a [`DocPool`].
//!
//! Units (paragraphs, whole manuals, or function paths) are stored sorted by
//! key, so ascending internal doc number is ascending `doc_ref`. Every tie in
//! ranking is broken that way.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::DocPool;

/// First line of every persisted index file.
pub const INDEX_HEADER: &str = "docprompt-bm25 v1";

#[derive(Debug, thiserror::Error)]
pub enum SparseError {
    #[error("cannot build an index over an empty pool")]
    EmptyPool,
    #[error("invalid BM25 parameters k1={k1} b={b} (need k1 > 0, 0 <= b <= 1)")]
    InvalidParams { k1: f64, b: f64 },
    #[error("unknown doc_ref `{0}`")]
    UnknownDoc(String),
    #[error("duplicate unit key `{0}`")]
    DuplicateKey(String),
    #[error("unsupported index header {0:?}")]
    BadHeader(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = SparseError> = std::result::Result<T, E>;

fn is_word(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Default analyzer for prose and shell code.
///
/// Lowercases and splits on whitespace. Inside each chunk, surrounding
/// punctuation is stripped except a leading dash run directly before a word
/// character, so `-f` and `--short` survive as flags. Remaining chunks split
/// on any non-word character (`_` counts as a word character); flag chunks do
/// not split on `-` but lose any trailing dashes.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut tokens = Vec::new();
    for chunk in lower.split_whitespace() {
        let chunk = chunk.trim_end_matches(|c: char| !is_word(c));
        let Some(first) = chunk.find(is_word) else {
            continue;
        };
        let prefix = &chunk[..first];
        let dashes = prefix.len() - prefix.trim_end_matches('-').len();
        if dashes > 0 {
            let core = &chunk[first - dashes..];
            tokens.extend(
                core.split(|c: char| !(is_word(c) || c == '-'))
                    .filter(|p| p.chars().any(is_word))
                    .map(|p| p.trim_end_matches('-').to_string()),
            );
        } else {
            tokens.extend(
                chunk[first..]
                    .split(|c: char| !is_word(c))
                    .filter(|p| !p.is_empty())
                    .map(str::to_string),
            );
        }
    }
    tokens
}

/// Analyzer for dotted code paths: splits on every non-alphanumeric character
/// (including `.` and `_`) and on camel-case boundaries, then lowercases.
///
/// `pandas.DataFrame.to_csv` → `pandas data frame to csv`.
pub fn tokenize_identifier(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for part in text.split(|c: char| !c.is_alphanumeric()) {
        if part.is_empty() {
            continue;
        }
        let chars: Vec<char> = part.chars().collect();
        let mut start = 0;
        for i in 1..chars.len() {
            let (prev, cur) = (chars[i - 1], chars[i]);
            let next_lower = chars.get(i + 1).is_some_and(|c| c.is_lowercase());
            let boundary = (prev.is_lowercase() && cur.is_uppercase())
                || (prev.is_uppercase() && cur.is_uppercase() && next_lower)
                || (prev.is_numeric() && cur.is_uppercase());
            if boundary {
                tokens.push(chars[start..i].iter().collect::<String>().to_lowercase());
                start = i;
            }
        }
        tokens.push(chars[start..].iter().collect::<String>().to_lowercase());
    }
    tokens
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Analyzer {
    Text,
    Identifier,
}

impl Analyzer {
    pub fn tokens(self, text: &str) -> Vec<String> {
        match self {
            Analyzer::Text => tokenize(text),
            Analyzer::Identifier => tokenize_identifier(text),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Paragraph,
    Manual,
}

impl std::str::FromStr for Granularity {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "paragraph" => Ok(Granularity::Paragraph),
            "manual" => Ok(Granularity::Manual),
            other => Err(format!("unknown granularity `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(self) -> Result<Self> {
        if self.k1 > 0.0 && (0.0..=1.0).contains(&self.b) {
            Ok(self)
        } else {
            Err(SparseError::InvalidParams {
                k1: self.k1,
                b: self.b,
            })
        }
    }
}

/// `ln(1 + (N - df + 0.5) / (df + 0.5))`
pub fn idf(n_docs: usize, df: usize) -> f64 {
    let (n, df) = (n_docs as f64, df as f64);
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

/// One indexable unit before tokenization.
#[derive(Debug, Clone)]
pub struct IndexUnit {
    pub key: String,
    /// Parent the unit belongs to; equals `key` for manual-level units.
    pub group: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    /// doc_id for paragraph-level units, parent key for manual-level units.
    pub doc_ref: String,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertedIndex {
    analyzer: Analyzer,
    granularity: Granularity,
    params: Bm25Params,
    /// Sorted; a term's id is its position.
    terms: Vec<String>,
    postings: Vec<Vec<Posting>>,
    /// Sorted unit keys; a unit's doc number is its position.
    keys: Vec<String>,
    group_names: Vec<String>,
    groups: Vec<u32>,
    doc_len: Vec<u32>,
    avg_len: f64,
}

impl InvertedIndex {
    /// Indexes arbitrary units. Units are re-sorted by key.
    pub fn from_units(
        mut units: Vec<IndexUnit>,
        analyzer: Analyzer,
        granularity: Granularity,
        params: Bm25Params,
    ) -> Result<Self> {
        let params = params.validate()?;
        if units.is_empty() {
            return Err(SparseError::EmptyPool);
        }
        units.sort_by(|a, b| a.key.cmp(&b.key));
        if let Some(w) = units.windows(2).find(|w| w[0].key == w[1].key) {
            return Err(SparseError::DuplicateKey(w[0].key.clone()));
        }

        let mut group_ids: BTreeMap<&str, u32> = BTreeMap::new();
        for unit in &units {
            group_ids.entry(unit.group.as_str()).or_insert(0);
        }
        for (i, id) in group_ids.values_mut().enumerate() {
            *id = i as u32;
        }

        let mut table: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_len = Vec::with_capacity(units.len());
        let mut groups = Vec::with_capacity(units.len());
        for (doc, unit) in units.iter().enumerate() {
            let tokens = analyzer.tokens(&unit.text);
            doc_len.push(tokens.len() as u32);
            groups.push(group_ids[unit.group.as_str()]);
            let mut counts: HashMap<String, u32> = HashMap::new();
            for token in tokens {
                *counts.entry(token).or_default() += 1;
            }
            for (term, tf) in counts {
                table.entry(term).or_default().push(Posting {
                    doc: doc as u32,
                    tf,
                });
            }
        }
        let total: u64 = doc_len.iter().map(|&l| u64::from(l)).sum();
        let avg_len = total as f64 / doc_len.len() as f64;
        let (terms, postings) = table.into_iter().unzip();

        Ok(InvertedIndex {
            analyzer,
            granularity,
            params,
            terms,
            postings,
            group_names: group_ids.keys().map(|g| g.to_string()).collect(),
            keys: units.into_iter().map(|u| u.key).collect(),
            groups,
            doc_len,
            avg_len,
        })
    }

    pub fn analyzer(&self) -> Analyzer {
        self.analyzer
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn n_docs(&self) -> usize {
        self.keys.len()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn vocab_size(&self) -> usize {
        self.terms.len()
    }

    /// Unit keys in doc-number order.
    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn doc_len(&self, doc_ref: &str) -> Option<u32> {
        self.doc_number(doc_ref).map(|d| self.doc_len[d as usize])
    }

    pub fn group_of(&self, doc_ref: &str) -> Option<&str> {
        self.doc_number(doc_ref)
            .map(|d| self.group_names[self.groups[d as usize] as usize].as_str())
    }

    /// Postings for `term` as `(doc_ref, tf)`.
    pub fn postings(&self, term: &str) -> Vec<(&str, u32)> {
        self.term_id(term)
            .map(|t| {
                self.postings[t]
                    .iter()
                    .map(|p| (self.keys[p.doc as usize].as_str(), p.tf))
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        self.analyzer.tokens(text)
    }

    fn term_id(&self, term: &str) -> Option<usize> {
        self.terms.binary_search_by(|t| t.as_str().cmp(term)).ok()
    }

    fn doc_number(&self, doc_ref: &str) -> Option<u32> {
        self.keys
            .binary_search_by(|k| k.as_str().cmp(doc_ref))
            .ok()
            .map(|d| d as u32)
    }

    fn term_weight(&self, idf: f64, tf: u32, doc: u32) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let tf = f64::from(tf);
        let len = f64::from(self.doc_len[doc as usize]);
        idf * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * len / self.avg_len))
    }

    /// BM25 score of one unit. Every query token contributes, duplicates
    /// included; tokens outside the vocabulary contribute 0.
    pub fn bm25_score(&self, query_tokens: &[String], doc_ref: &str) -> Result<f64> {
        let doc = self
            .doc_number(doc_ref)
            .ok_or_else(|| SparseError::UnknownDoc(doc_ref.to_string()))?;
        let mut score = 0.0;
        for token in query_tokens {
            let Some(t) = self.term_id(token) else {
                continue;
            };
            let postings = &self.postings[t];
            if let Ok(pos) = postings.binary_search_by_key(&doc, |p| p.doc) {
                score += self.term_weight(idf(self.n_docs(), postings.len()), postings[pos].tf, doc);
            }
        }
        Ok(score)
    }

    fn accumulate(&self, tokens: &[String], group: Option<u32>) -> HashMap<u32, f64> {
        let mut acc: HashMap<u32, f64> = HashMap::new();
        for token in tokens {
            let Some(t) = self.term_id(token) else {
                continue;
            };
            let postings = &self.postings[t];
            let idf = idf(self.n_docs(), postings.len());
            for p in postings {
                if group.is_some_and(|g| self.groups[p.doc as usize] != g) {
                    continue;
                }
                *acc.entry(p.doc).or_insert(0.0) += self.term_weight(idf, p.tf, p.doc);
            }
        }
        acc
    }

    fn rank(&self, acc: HashMap<u32, f64>, k: usize) -> Vec<RetrievalResult> {
        let mut scored: Vec<(u32, f64)> = acc.into_iter().filter(|&(_, s)| s > 0.0).collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        scored
            .into_iter()
            .enumerate()
            .map(|(i, (doc, score))| RetrievalResult {
                doc_ref: self.keys[doc as usize].clone(),
                score,
                rank: i + 1,
            })
            .collect()
    }

    /// Top-`k` units with a positive score; ties by `doc_ref` ascending.
    pub fn search_tokens(&self, tokens: &[String], k: usize) -> Vec<RetrievalResult> {
        self.rank(self.accumulate(tokens, None), k)
    }

    pub fn search(&self, query: &str, k: usize) -> Vec<RetrievalResult> {
        self.search_tokens(&self.tokenize(query), k)
    }

    /// Like [`search`](Self::search) but only over units whose group is
    /// `group`. Corpus statistics stay global.
    pub fn search_within(&self, query: &str, group: &str, k: usize) -> Vec<RetrievalResult> {
        let Ok(g) = self.group_names.binary_search_by(|n| n.as_str().cmp(group)) else {
            return Vec::new();
        };
        self.rank(self.accumulate(&self.tokenize(query), Some(g as u32)), k)
    }

    pub fn write_to<W: Write>(&self, mut writer: W) -> Result<()> {
        writeln!(writer, "{INDEX_HEADER}")?;
        serde_json::to_writer(&mut writer, self)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut reader: R) -> Result<Self> {
        let mut header = String::new();
        reader.read_line(&mut header)?;
        let header = header.trim_end();
        if header != INDEX_HEADER {
            return Err(SparseError::BadHeader(header.to_string()));
        }
        let mut body = String::new();
        reader.read_to_string(&mut body)?;
        Ok(serde_json::from_str(&body)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Builds a paragraph- or manual-level index. Titles are prepended to bodies;
/// a manual unit is its paragraphs joined in `seq` order.
pub fn build_index(pool: &DocPool, granularity: Granularity, params: Bm25Params) -> Result<InvertedIndex> {
    let units = match granularity {
        Granularity::Paragraph => pool
            .docs()
            .iter()
            .map(|d| IndexUnit {
                key: d.doc_id.clone(),
                group: d.parent_key.clone(),
                text: d.full_text(),
            })
            .collect(),
        Granularity::Manual => pool
            .parents()
            .map(|parent| IndexUnit {
                key: parent.to_string(),
                group: parent.to_string(),
                text: pool
                    .paragraphs(parent)
                    .into_iter()
                    .flatten()
                    .map(|d| d.full_text())
                    .collect::<Vec<_>>()
                    .join("\n\n"),
            })
            .collect(),
    };
    InvertedIndex::from_units(units, Analyzer::Text, granularity, params)
}

/// One unit per parent key, indexed by the key itself under the identifier
/// analyzer. Used to match code against fully-qualified function paths.
pub fn build_name_index(pool: &DocPool, params: Bm25Params) -> Result<InvertedIndex> {
    let units = pool
        .parents()
        .map(|p| IndexUnit {
            key: p.to_string(),
            group: p.to_string(),
            text: p.to_string(),
        })
        .collect();
    InvertedIndex::from_units(units, Analyzer::Identifier, Granularity::Manual, params)
}

/// Retrieves the single best manual, then ranks that manual's paragraphs.
/// An empty result means stage one found nothing.
pub fn two_stage_search(
    manual_index: &InvertedIndex,
    paragraph_index: &InvertedIndex,
    query: &str,
    k: usize,
) -> Vec<RetrievalResult> {
    match manual_index.search(query, 1).into_iter().next() {
        Some(top) => paragraph_index.search_within(query, &top.doc_ref, k),
        None => Vec::new(),
    }
}
