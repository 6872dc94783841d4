//! Generation, retrieval and execution metrics.
//!
//! Shell metrics compare placeholder-normalized commands
//! (`mycli -u [user]` → `mycli -u $1`). Rates are percentages except
//! [`token_f1`], which returns a mean fraction; [`EvalReport`] entries carry
//! their unit explicitly.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::oracle::extract_call_names;

/// Added to zero n-gram match counts before taking logs.
pub const BLEU_EPSILON: f64 = 1e-9;
pub const BLEU_MAX_ORDER: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("{refs} references but {hyps} hypotheses")]
    LengthMismatch { refs: usize, hyps: usize },
    #[error("pass@k needs 0 <= c <= n and 1 <= k <= n (n={n}, c={c}, k={k})")]
    PassAtK { n: u64, c: u64, k: u64 },
    #[error("no example has a non-empty oracle set")]
    NoOracles,
    #[error("nothing to evaluate")]
    Empty,
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

fn paired<A, B>(refs: &[A], hyps: &[B]) -> Result<()> {
    if refs.len() != hyps.len() {
        return Err(MetricsError::LengthMismatch {
            refs: refs.len(),
            hyps: hyps.len(),
        });
    }
    Ok(())
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// A command with user-specific arguments replaced by `$1..$m`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NormalizedCommand {
    pub original: String,
    pub normalized: String,
    /// Distinct placeholders, as written, in first-appearance order.
    pub placeholder_map: Vec<String>,
}

/// Replaces every `[...]` and `{{...}}` placeholder by `$i`, numbering
/// distinct placeholder texts in order of first appearance.
pub fn normalize_placeholders(command: &str) -> NormalizedCommand {
    let mut normalized = String::with_capacity(command.len());
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut placeholder_map = Vec::new();
    let mut rest = command;
    loop {
        let square = rest.find('[');
        let curly = rest.find("{{");
        let (start, open, close) = match (square, curly) {
            (Some(s), Some(c)) if c < s => (c, 2, "}}"),
            (Some(s), _) => (s, 1, "]"),
            (None, Some(c)) => (c, 2, "}}"),
            (None, None) => break,
        };
        let Some(len) = rest[start + open..].find(close) else {
            break;
        };
        let end = start + open + len + close.len();
        let inner = rest[start + open..start + open + len].trim().to_string();
        let next = ids.len() + 1;
        let id = *ids.entry(inner).or_insert_with(|| {
            placeholder_map.push(rest[start..end].to_string());
            next
        });
        normalized.push_str(&rest[..start]);
        normalized.push('$');
        normalized.push_str(&id.to_string());
        rest = &rest[end..];
    }
    normalized.push_str(rest);
    NormalizedCommand {
        original: command.to_string(),
        normalized,
        placeholder_map,
    }
}

fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Placeholder-normalized, whitespace-collapsed form used by shell metrics.
pub fn canonical_command(command: &str) -> String {
    collapse_whitespace(&normalize_placeholders(command).normalized)
}

fn command_name(command: &str) -> Option<String> {
    canonical_command(command)
        .split_whitespace()
        .next()
        .map(str::to_string)
}

pub fn cmd_match(reference: &str, hypothesis: &str) -> bool {
    match (command_name(reference), command_name(hypothesis)) {
        (Some(r), Some(h)) => r == h,
        _ => false,
    }
}

/// Percent of examples whose command name (first token) is right.
pub fn cmd_accuracy<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Result<f64> {
    paired(refs, hyps)?;
    let scores = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| if cmd_match(r.as_ref(), h.as_ref()) { 100.0 } else { 0.0 });
    mean(scores).ok_or(MetricsError::Empty)
}

/// Percent of exact matches after placeholder normalization and whitespace
/// collapsing.
pub fn exact_match<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Result<f64> {
    paired(refs, hyps)?;
    let scores = refs.iter().zip(hyps).map(|(r, h)| {
        if canonical_command(r.as_ref()) == canonical_command(h.as_ref()) {
            100.0
        } else {
            0.0
        }
    });
    mean(scores).ok_or(MetricsError::Empty)
}

fn counts<'a>(tokens: impl IntoIterator<Item = &'a str>) -> HashMap<&'a str, usize> {
    let mut map = HashMap::new();
    for t in tokens {
        *map.entry(t).or_insert(0) += 1;
    }
    map
}

/// Multiset token F1 of one pair, in [0, 1].
pub fn token_f1_pair(reference: &str, hypothesis: &str) -> f64 {
    let r = canonical_command(reference);
    let h = canonical_command(hypothesis);
    let (rc, hc) = (counts(r.split_whitespace()), counts(h.split_whitespace()));
    let (rn, hn): (usize, usize) = (rc.values().sum(), hc.values().sum());
    if rn == 0 || hn == 0 {
        return 0.0;
    }
    let overlap: usize = hc
        .iter()
        .map(|(t, &n)| n.min(rc.get(t).copied().unwrap_or(0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / hn as f64;
    let recall = overlap as f64 / rn as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Mean multiset token F1 as a fraction in [0, 1].
pub fn token_f1<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Result<f64> {
    paired(refs, hyps)?;
    mean(refs.iter().zip(hyps).map(|(r, h)| token_f1_pair(r.as_ref(), h.as_ref()))).ok_or(MetricsError::Empty)
}

fn ngrams<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut map = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *map.entry(w).or_insert(0) += 1;
        }
    }
    map
}

/// Corpus BLEU (0–100) with clipped n-gram precision up to order 4, the
/// standard brevity penalty, and `BLEU_EPSILON` added to zero match counts.
pub fn corpus_bleu<T: Eq + Hash>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> Result<f64> {
    paired(refs, hyps)?;
    let mut matches = [0usize; BLEU_MAX_ORDER];
    let mut totals = [0usize; BLEU_MAX_ORDER];
    let (mut ref_len, mut hyp_len) = (0usize, 0usize);
    for (r, h) in refs.iter().zip(hyps) {
        ref_len += r.len();
        hyp_len += h.len();
        for n in 1..=BLEU_MAX_ORDER {
            let rc = ngrams(r, n);
            for (gram, count) in ngrams(h, n) {
                matches[n - 1] += count.min(rc.get(gram).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let log_precision: f64 = (0..BLEU_MAX_ORDER)
        .map(|i| {
            let num = if matches[i] == 0 { BLEU_EPSILON } else { matches[i] as f64 };
            (num / totals[i].max(1) as f64).ln()
        })
        .sum::<f64>()
        / BLEU_MAX_ORDER as f64;
    let brevity = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * brevity * log_precision.exp())
}

/// Word runs and single punctuation characters, e.g. `df.to_csv('f')` →
/// `df . to_csv ( ' f ' )`.
pub fn code_tokens(code: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in code.chars() {
        if c.is_alphanumeric() || c == '_' {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            tokens.push(c.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Character-level corpus BLEU over normalized commands, spaces included.
pub fn char_bleu<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Result<f64> {
    paired(refs, hyps)?;
    let chars = |s: &str| canonical_command(s).chars().collect::<Vec<char>>();
    let r: Vec<_> = refs.iter().map(|s| chars(s.as_ref())).collect();
    let h: Vec<_> = hyps.iter().map(|s| chars(s.as_ref())).collect();
    corpus_bleu(&r, &h)
}

/// Corpus BLEU-4 over [`code_tokens`].
pub fn bleu4<R: AsRef<str>, H: AsRef<str>>(refs: &[R], hyps: &[H]) -> Result<f64> {
    paired(refs, hyps)?;
    let r: Vec<_> = refs.iter().map(|s| code_tokens(s.as_ref())).collect();
    let h: Vec<_> = hyps.iter().map(|s| code_tokens(s.as_ref())).collect();
    corpus_bleu(&r, &h)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FunctionRecall {
    /// Percent; `None` when no reference calls any function.
    pub recall: Option<f64>,
    /// Percent over reference functions absent from the training vocabulary;
    /// `None` when no reference uses an unseen function.
    pub recall_unseen: Option<f64>,
    pub per_example: Vec<(Option<f64>, Option<f64>)>,
}

fn name_recall(hyp: &BTreeSet<String>, reference: &BTreeSet<String>) -> Option<f64> {
    (!reference.is_empty()).then(|| 100.0 * reference.intersection(hyp).count() as f64 / reference.len() as f64)
}

/// Recall of the reference's called functions, overall and restricted to
/// functions unseen in training.
pub fn function_recall<R: AsRef<str>, H: AsRef<str>>(
    refs: &[R],
    hyps: &[H],
    train_vocab: &BTreeSet<String>,
) -> Result<FunctionRecall> {
    paired(refs, hyps)?;
    let per_example: Vec<_> = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| {
            let ref_names: BTreeSet<String> = extract_call_names(r.as_ref()).into_iter().collect();
            let hyp_names: BTreeSet<String> = extract_call_names(h.as_ref()).into_iter().collect();
            let unseen: BTreeSet<String> = ref_names.iter().filter(|n| !train_vocab.contains(*n)).cloned().collect();
            (name_recall(&hyp_names, &ref_names), name_recall(&hyp_names, &unseen))
        })
        .collect();
    Ok(FunctionRecall {
        recall: mean(per_example.iter().filter_map(|p| p.0)),
        recall_unseen: mean(per_example.iter().filter_map(|p| p.1)),
        per_example,
    })
}

/// Mean fraction (as percent) of each example's oracle docs found in its
/// top-k results, for every k. Examples without oracle docs are skipped.
pub fn retrieval_recall_at_k<S: AsRef<str>, O: AsRef<str>>(
    results: &[Vec<S>],
    oracles: &[Vec<O>],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    paired(oracles, results)?;
    let mut sums: BTreeMap<usize, f64> = ks.iter().map(|&k| (k, 0.0)).collect();
    let mut evaluated = 0usize;
    for (ranked, oracle) in results.iter().zip(oracles) {
        let gold: HashSet<&str> = oracle.iter().map(AsRef::as_ref).collect();
        if gold.is_empty() {
            continue;
        }
        evaluated += 1;
        for (&k, sum) in sums.iter_mut() {
            let hits = ranked
                .iter()
                .take(k)
                .map(AsRef::as_ref)
                .collect::<HashSet<&str>>()
                .intersection(&gold)
                .count();
            *sum += hits as f64 / gold.len() as f64;
        }
    }
    if evaluated == 0 {
        return Err(MetricsError::NoOracles);
    }
    Ok(sums
        .into_iter()
        .map(|(k, s)| (k, 100.0 * s / evaluated as f64))
        .collect())
}

fn binomial(n: u64, k: u64) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul(u128::from(n - i))? / u128::from(i + 1);
    }
    Some(acc)
}

/// Unbiased pass@k for one problem: `1 - C(n-c, k) / C(n, k)`.
///
/// Uses exact integer binomials while they fit in 128 bits and the
/// product form `1 - Π_{i=n-c+1}^{n} (1 - k/i)` beyond that.
pub fn pass_at_k_single(n: u64, c: u64, k: u64) -> Result<f64> {
    if c > n || k == 0 || k > n {
        return Err(MetricsError::PassAtK { n, c, k });
    }
    if n - c < k {
        return Ok(1.0);
    }
    if let (Some(total), Some(fail)) = (binomial(n, k), binomial(n - c, k)) {
        return Ok((total - fail) as f64 / total as f64);
    }
    let prod: f64 = (n - c + 1..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - prod)
}

/// Mean pass@k over `(n, c)` pairs, as a fraction.
pub fn pass_at_k(samples: &[(u64, u64)], k: u64) -> Result<f64> {
    let values = samples
        .iter()
        .map(|&(n, c)| pass_at_k_single(n, c, k))
        .collect::<Result<Vec<_>>>()?;
    mean(values).ok_or(MetricsError::Empty)
}

fn ngram_set(tokens: &[&str], n: usize) -> HashSet<Vec<String>> {
    if tokens.len() < n {
        return HashSet::new();
    }
    tokens
        .windows(n)
        .map(|w| w.iter().map(|t| t.to_string()).collect())
        .collect()
}

/// Share (percent) of each target's distinct n-grams that also occur in the
/// paired source, micro-averaged over the corpus, for n = 1..=n_max. Orders
/// with no target n-grams at all are omitted.
pub fn ngram_overlap<S: AsRef<str>, T: AsRef<str>>(
    sources: &[S],
    targets: &[T],
    n_max: usize,
) -> Result<BTreeMap<usize, f64>> {
    paired(sources, targets)?;
    let mut out = BTreeMap::new();
    let prepared: Vec<(String, String)> = sources
        .iter()
        .zip(targets)
        .map(|(s, t)| (canonical_command(s.as_ref()), canonical_command(t.as_ref())))
        .collect();
    for n in 1..=n_max {
        let (mut hits, mut total) = (0usize, 0usize);
        for (source, target) in &prepared {
            let s: Vec<&str> = source.split_whitespace().collect();
            let t: Vec<&str> = target.split_whitespace().collect();
            let sset = ngram_set(&s, n);
            let tset = ngram_set(&t, n);
            total += tset.len();
            hits += tset.iter().filter(|g| sset.contains(*g)).count();
        }
        if total > 0 {
            out.insert(n, 100.0 * hits as f64 / total as f64);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Percent,
    Fraction,
    Count,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub name: String,
    pub unit: Unit,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleRow {
    pub example_id: String,
    pub values: BTreeMap<String, f64>,
}

/// Named metrics plus a per-example breakdown. Serialized as pretty JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Vec<MetricValue>,
    #[serde(default)]
    pub rows: Vec<ExampleRow>,
}

impl EvalReport {
    pub fn push(&mut self, name: impl Into<String>, unit: Unit, value: f64) {
        self.metrics.push(MetricValue {
            name: name.into(),
            unit,
            value,
        });
    }

    pub fn get(&self, name: &str) -> Option<&MetricValue> {
        self.metrics.iter().find(|m| m.name == name)
    }

    pub fn extend(&mut self, other: EvalReport) {
        self.metrics.extend(other.metrics);
        let mut by_id: BTreeMap<String, BTreeMap<String, f64>> =
            std::mem::take(&mut self.rows).into_iter().map(|r| (r.example_id, r.values)).collect();
        for row in other.rows {
            by_id.entry(row.example_id).or_default().extend(row.values);
        }
        self.rows = by_id
            .into_iter()
            .map(|(example_id, values)| ExampleRow { example_id, values })
            .collect();
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

fn rows(ids: &[String], columns: Vec<(&str, Vec<Option<f64>>)>) -> Vec<ExampleRow> {
    ids.iter()
        .enumerate()
        .map(|(i, id)| ExampleRow {
            example_id: id.clone(),
            values: columns
                .iter()
                .filter_map(|(name, vals)| vals[i].map(|v| (name.to_string(), v)))
                .collect(),
        })
        .collect()
}

/// CMD Acc, EM, token F1 and charBLEU for shell commands, all in percent.
pub fn evaluate_bash(ids: &[String], refs: &[String], hyps: &[String]) -> Result<EvalReport> {
    paired(refs, hyps)?;
    paired(ids, refs)?;
    let mut report = EvalReport::default();
    report.push("cmd_acc", Unit::Percent, cmd_accuracy(refs, hyps)?);
    report.push("exact_match", Unit::Percent, exact_match(refs, hyps)?);
    report.push("token_f1", Unit::Percent, 100.0 * token_f1(refs, hyps)?);
    report.push("char_bleu", Unit::Percent, char_bleu(refs, hyps)?);
    let pairs: Vec<(&String, &String)> = refs.iter().zip(hyps).collect();
    let col = |f: &dyn Fn(&str, &str) -> f64| pairs.iter().map(|(r, h)| Some(f(r, h))).collect();
    report.rows = rows(
        ids,
        vec![
            ("cmd_acc", col(&|r, h| if cmd_match(r, h) { 100.0 } else { 0.0 })),
            ("exact_match", col(&|r, h| if canonical_command(r) == canonical_command(h) { 100.0 } else { 0.0 })),
            ("token_f1", col(&|r, h| 100.0 * token_f1_pair(r, h))),
            ("char_bleu", col(&|r, h| char_bleu(&[r], &[h]).unwrap_or(0.0))),
        ],
    );
    Ok(report)
}

/// BLEU-4, exact match (whitespace-collapsed) and function recall for Python.
pub fn evaluate_python(
    ids: &[String],
    refs: &[String],
    hyps: &[String],
    train_vocab: &BTreeSet<String>,
) -> Result<EvalReport> {
    paired(refs, hyps)?;
    paired(ids, refs)?;
    let mut report = EvalReport::default();
    report.push("bleu4", Unit::Percent, bleu4(refs, hyps)?);
    let em: Vec<Option<f64>> = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| Some(if collapse_whitespace(r) == collapse_whitespace(h) { 100.0 } else { 0.0 }))
        .collect();
    report.push("exact_match", Unit::Percent, mean(em.iter().flatten().copied()).ok_or(MetricsError::Empty)?);
    let recall = function_recall(refs, hyps, train_vocab)?;
    if let Some(v) = recall.recall {
        report.push("recall", Unit::Percent, v);
    }
    if let Some(v) = recall.recall_unseen {
        report.push("recall_unseen", Unit::Percent, v);
    }
    report.rows = rows(
        ids,
        vec![
            ("bleu4", refs.iter().zip(hyps).map(|(r, h)| bleu4(&[r], &[h]).ok()).collect()),
            ("exact_match", em),
            ("recall", recall.per_example.iter().map(|p| p.0).collect()),
            ("recall_unseen", recall.per_example.iter().map(|p| p.1).collect()),
        ],
    );
    Ok(report)
}

/// `recall@k` for each k, plus the number of examples evaluated.
pub fn evaluate_retrieval(
    ids: &[String],
    results: &[Vec<String>],
    oracles: &[Vec<String>],
    ks: &[usize],
) -> Result<EvalReport> {
    paired(ids, results)?;
    let mut report = EvalReport::default();
    for (k, v) in retrieval_recall_at_k(results, oracles, ks)? {
        report.push(format!("recall@{k}"), Unit::Percent, v);
    }
    report.push(
        "retrieval_examples",
        Unit::Count,
        oracles.iter().filter(|o| !o.is_empty()).count() as f64,
    );
    let columns = ks
        .iter()
        .map(|&k| {
            let vals = results
                .iter()
                .zip(oracles)
                .map(|(r, o)| {
                    retrieval_recall_at_k(std::slice::from_ref(r), std::slice::from_ref(o), &[k])
                        .ok()
                        .map(|m| m[&k])
                })
                .collect();
            (k, vals)
        })
        .collect::<Vec<_>>();
    let names: Vec<String> = columns.iter().map(|(k, _)| format!("recall@{k}")).collect();
    report.rows = rows(
        ids,
        names
            .iter()
            .zip(columns)
            .map(|(n, (_, v))| (n.as_str(), v))
            .collect(),
    );
    Ok(report)
}
