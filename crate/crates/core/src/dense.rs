//! Exact cosine search over externally produced embeddings, and the
//! in-batch-negatives contrastive objective used to train such embeddings.
//!
//! Embedding file format (text, UTF-8):
//!
//! ```text
//! embeddings dim=3 normalized=false
//! doc#0<TAB>0.1 0.2 0.3
//! doc#1<TAB>-1 0 2.5e-3
//! ```
//!
//! Keys may contain spaces but not tabs or newlines.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::sparse::RetrievalResult;

const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum DenseError {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("cosine is undefined for a zero vector")]
    ZeroVector,
    #[error("unknown embedding key `{0}`")]
    UnknownKey(String),
    #[error("duplicate embedding key `{0}`")]
    DuplicateKey(String),
    #[error("vector for `{key}` has norm {norm}, expected unit norm")]
    NotNormalized { key: String, norm: f64 },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("query `{0}` appears twice in one batch")]
    DuplicateQuery(String),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = DenseError> = std::result::Result<T, E>;

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(DenseError::DimMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(DenseError::ZeroVector);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Key-addressed vectors of one fixed dimension, stored in key order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    normalized: bool,
    keys: Vec<String>,
    data: Vec<f64>,
    norms: Vec<f64>,
}

impl EmbeddingSet {
    /// Builds a set from `(key, vector)` pairs. When `normalized` is set every
    /// vector must have unit L2 norm within 1e-6.
    pub fn new(dim: usize, normalized: bool, entries: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self> {
        let mut sorted: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (key, vector) in entries {
            if vector.len() != dim {
                return Err(DenseError::DimMismatch {
                    expected: dim,
                    found: vector.len(),
                });
            }
            if normalized {
                let n = norm(&vector);
                if (n - 1.0).abs() > NORM_TOLERANCE {
                    return Err(DenseError::NotNormalized { key, norm: n });
                }
            }
            if sorted.contains_key(&key) {
                return Err(DenseError::DuplicateKey(key));
            }
            sorted.insert(key, vector);
        }
        let mut set = EmbeddingSet {
            dim,
            normalized,
            keys: Vec::with_capacity(sorted.len()),
            data: Vec::with_capacity(sorted.len() * dim),
            norms: Vec::with_capacity(sorted.len()),
        };
        for (key, vector) in sorted {
            set.norms.push(norm(&vector));
            set.keys.push(key);
            set.data.extend(vector);
        }
        Ok(set)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.keys
            .binary_search_by(|k| k.as_str().cmp(key))
            .ok()
            .map(|i| self.row(i))
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.keys.iter().enumerate().map(|(i, k)| (k.as_str(), self.row(i)))
    }

    fn resolve(&self, key: &str) -> Result<&[f64]> {
        self.get(key).ok_or_else(|| DenseError::UnknownKey(key.to_string()))
    }

    pub fn read_from<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let header = loop {
            match lines.next() {
                Some((_, line)) => {
                    let line = line?;
                    if !line.trim().is_empty() {
                        break line;
                    }
                }
                None => {
                    return Err(DenseError::Format {
                        line: 1,
                        message: "missing header".into(),
                    })
                }
            }
        };
        let (dim, normalized) = parse_header(&header)?;
        let mut entries = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let format_err = |message: String| DenseError::Format { line: i + 1, message };
            let (key, values) = line
                .split_once('\t')
                .ok_or_else(|| format_err("expected `key<TAB>values`".into()))?;
            let vector = values
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|e| format_err(format!("`{v}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if vector.len() != dim {
                return Err(format_err(format!("expected {dim} values, found {}", vector.len())));
            }
            entries.push((key.to_string(), vector));
        }
        Self::new(dim, normalized, entries)
    }

    pub fn write_to<W: Write>(&self, mut writer: W) -> io::Result<()> {
        writeln!(writer, "embeddings dim={} normalized={}", self.dim, self.normalized)?;
        for (key, vector) in self.iter() {
            write!(writer, "{key}\t")?;
            for (j, v) in vector.iter().enumerate() {
                if j > 0 {
                    writer.write_all(b" ")?;
                }
                write!(writer, "{v}")?;
            }
            writer.write_all(b"\n")?;
        }
        writer.flush()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.write_to(BufWriter::new(File::create(path)?))?)
    }
}

fn parse_header(line: &str) -> Result<(usize, bool)> {
    let bad = |message: &str| DenseError::Format {
        line: 1,
        message: message.to_string(),
    };
    let mut parts = line.split_whitespace();
    if parts.next() != Some("embeddings") {
        return Err(bad("header must start with `embeddings`"));
    }
    let (mut dim, mut normalized) = (None, None);
    for part in parts {
        match part.split_once('=') {
            Some(("dim", v)) => dim = v.parse::<usize>().ok(),
            Some(("normalized", v)) => normalized = v.parse::<bool>().ok(),
            _ => return Err(bad(&format!("unexpected header field `{part}`"))),
        }
    }
    match (dim, normalized) {
        (Some(d), Some(n)) if d > 0 => Ok((d, n)),
        _ => Err(bad("header needs dim=<n> and normalized=<true|false>")),
    }
}

/// Exact top-`k` by cosine, ties by key ascending.
pub fn dense_search(embeddings: &EmbeddingSet, query: &[f64], k: usize) -> Result<Vec<RetrievalResult>> {
    if query.len() != embeddings.dim {
        return Err(DenseError::DimMismatch {
            expected: embeddings.dim,
            found: query.len(),
        });
    }
    let qn = norm(query);
    if qn == 0.0 {
        return Err(DenseError::ZeroVector);
    }
    let mut scored: Vec<(usize, f64)> = (0..embeddings.len())
        .filter(|&i| embeddings.norms[i] > 0.0)
        .map(|i| {
            let c = dot(query, embeddings.row(i)) / (qn * embeddings.norms[i]);
            (i, c.clamp(-1.0, 1.0))
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored
        .into_iter()
        .enumerate()
        .map(|(rank, (i, score))| RetrievalResult {
            doc_ref: embeddings.keys[i].clone(),
            score,
            rank: rank + 1,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPair {
    pub query_key: String,
    pub positive_doc_id: String,
}

/// Query/positive pairs; each pair's positive is a negative for every other
/// pair unless it is also that pair's own positive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pairs: Vec<BatchPair>,
}

impl Batch {
    pub fn new(pairs: Vec<BatchPair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(DenseError::EmptyBatch);
        }
        let mut seen = BTreeSet::new();
        for p in &pairs {
            if !seen.insert(p.query_key.as_str()) {
                return Err(DenseError::DuplicateQuery(p.query_key.clone()));
            }
        }
        Ok(Batch { pairs })
    }

    pub fn pairs(&self) -> &[BatchPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Distinct positives of the other pairs, excluding pair `i`'s own.
    pub fn negatives(&self, i: usize) -> Vec<&str> {
        let own = self.pairs[i].positive_doc_id.as_str();
        let mut seen = BTreeSet::new();
        self.pairs
            .iter()
            .enumerate()
            .filter(|&(j, p)| j != i && p.positive_doc_id != own)
            .map(|(_, p)| p.positive_doc_id.as_str())
            .filter(|d| seen.insert(*d))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContrastiveLoss {
    pub per_pair: Vec<f64>,
    pub mean: f64,
}

/// Softmax cross-entropy of each positive against the in-batch negatives,
/// with cosine similarity as the logit and no temperature.
pub fn contrastive_loss(batch: &Batch, embeddings: &EmbeddingSet) -> Result<ContrastiveLoss> {
    let mut per_pair = Vec::with_capacity(batch.len());
    for (i, pair) in batch.pairs.iter().enumerate() {
        let query = embeddings.resolve(&pair.query_key)?;
        let positive = cosine(query, embeddings.resolve(&pair.positive_doc_id)?)?;
        let mut logits = vec![positive];
        for neg in batch.negatives(i) {
            logits.push(cosine(query, embeddings.resolve(neg)?)?);
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        per_pair.push((lse - positive).max(0.0));
    }
    let mean = per_pair.iter().sum::<f64>() / per_pair.len() as f64;
    Ok(ContrastiveLoss { per_pair, mean })
}
