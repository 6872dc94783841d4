//! Generators and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use docprompt::corpus::{Doc, DocPool, Example, Language, Split};
use rand::seq::SliceRandom;
use rand::Rng;

/// Lowercase words and flags that the default analyzer keeps verbatim, so
/// `split_whitespace` is an exact stand-in for it.
pub const VOCAB: &[&str] = &[
    "archive", "file", "list", "create", "extract", "verbose", "directory", "user", "show", "print",
    "output", "input", "format", "size", "disk", "copy", "move", "remove", "search", "pattern",
    "count", "line", "word", "host", "port", "-f", "-v", "-x", "--all", "--short",
];

/// Skewed word choice so that frequent terms, repeated terms and score ties
/// all occur.
pub fn word<R: Rng>(rng: &mut R) -> &'static str {
    let a = rng.gen_range(0..VOCAB.len());
    let b = rng.gen_range(0..VOCAB.len());
    VOCAB[a.min(b)]
}

pub fn sentence<R: Rng>(rng: &mut R, min: usize, max: usize) -> String {
    let n = rng.gen_range(min..=max);
    (0..n).map(|_| word(rng)).collect::<Vec<_>>().join(" ")
}

/// A pool of at most `max_docs` paragraphs spread over a few parents.
/// Some bodies duplicate others to force exact ties.
pub fn random_pool<R: Rng>(rng: &mut R, max_docs: usize) -> DocPool {
    let n_docs = rng.gen_range(1..=max_docs);
    let n_parents = rng.gen_range(1..=n_docs.min(8));
    let mut seqs = vec![0u32; n_parents];
    let mut bodies: Vec<String> = Vec::new();
    let mut docs = Vec::new();
    for _ in 0..n_docs {
        let p = rng.gen_range(0..n_parents);
        let body = if !bodies.is_empty() && rng.gen_bool(0.1) {
            bodies.choose(rng).unwrap().clone()
        } else {
            sentence(rng, 1, 12)
        };
        bodies.push(body.clone());
        let parent = format!("cmd{p}");
        docs.push(Doc::new(format!("{parent}#{}", seqs[p]), parent, seqs[p], None, &body));
        seqs[p] += 1;
    }
    DocPool::from_docs(docs).unwrap()
}

/// (key, group, tokens) for every paragraph.
pub fn paragraph_units(pool: &DocPool) -> Vec<(String, String, Vec<String>)> {
    pool.docs()
        .iter()
        .map(|d| (d.doc_id.clone(), d.parent_key.clone(), ws_tokens(&d.full_text())))
        .collect()
}

/// (key, group, tokens) for every manual: its paragraphs concatenated.
pub fn manual_units(pool: &DocPool) -> Vec<(String, String, Vec<String>)> {
    let mut by_parent: BTreeMap<String, Vec<&Doc>> = BTreeMap::new();
    for d in pool.docs() {
        by_parent.entry(d.parent_key.clone()).or_default().push(d);
    }
    by_parent
        .into_iter()
        .map(|(parent, mut docs)| {
            docs.sort_by_key(|d| d.seq);
            let tokens = docs.iter().flat_map(|d| ws_tokens(&d.full_text())).collect();
            (parent.clone(), parent, tokens)
        })
        .collect()
}

pub fn ws_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Scores every unit directly from the textbook BM25 definition and returns
/// positive scores sorted by score descending, then key ascending.
pub fn brute_bm25(
    units: &[(String, String, Vec<String>)],
    query: &[String],
    k1: f64,
    b: f64,
    group: Option<&str>,
) -> Vec<(String, f64)> {
    let n = units.len();
    let total: u64 = units.iter().map(|u| u.2.len() as u64).sum();
    let avg = total as f64 / n as f64;
    let mut df: HashMap<&str, usize> = HashMap::new();
    for (_, _, tokens) in units {
        let mut seen: Vec<&str> = tokens.iter().map(String::as_str).collect();
        seen.sort();
        seen.dedup();
        for t in seen {
            *df.entry(t).or_default() += 1;
        }
    }
    let mut out: Vec<(String, f64)> = units
        .iter()
        .filter(|u| group.map_or(true, |g| u.1 == g))
        .map(|(key, _, tokens)| {
            let len = tokens.len() as f64;
            let mut score = 0.0;
            for q in query {
                let tf = tokens.iter().filter(|t| *t == q).count() as f64;
                if tf == 0.0 {
                    continue;
                }
                let d = df[q.as_str()] as f64;
                let idf = (1.0 + (n as f64 - d + 0.5) / (d + 0.5)).ln();
                score += idf * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * len / avg));
            }
            (key.clone(), score)
        })
        .filter(|(_, s)| *s > 0.0)
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

/// Shell-style examples spread over `n_groups` commands, each used at least once.
pub fn bash_examples<R: Rng>(rng: &mut R, n_examples: usize, n_groups: usize) -> Vec<Example> {
    assert!(n_examples >= n_groups);
    let mut group_of: Vec<usize> = (0..n_groups).collect();
    while group_of.len() < n_examples {
        group_of.push(rng.gen_range(0..n_groups));
    }
    group_of.shuffle(rng);
    group_of
        .into_iter()
        .enumerate()
        .map(|(i, g)| Example {
            example_id: format!("ex{i:05}"),
            intent: sentence(rng, 3, 8),
            code: format!("cmd{g} {}", sentence(rng, 1, 3)),
            language: Language::Bash,
            group_key: format!("cmd{g}"),
            oracle_doc_ids: Vec::new(),
            split: Split::Unassigned,
        })
        .collect()
}

/// Python-style examples grouped into posts of 1 to 3. Each example calls a
/// popular function and, most of the time, a rarely used one.
pub fn python_examples<R: Rng>(rng: &mut R, n_examples: usize) -> Vec<Example> {
    let mut out = Vec::with_capacity(n_examples);
    let mut post = 0;
    while out.len() < n_examples {
        let size = rng.gen_range(1..=3).min(n_examples - out.len());
        for _ in 0..size {
            let i = out.len();
            let popular = format!("lib{}.common{}", rng.gen_range(0..5), rng.gen_range(0..40));
            let rare = format!("pkg{}.func{}", rng.gen_range(0..50), rng.gen_range(0..4000));
            let code = if rng.gen_bool(0.9) {
                format!("x = {popular}(a)\ny = {rare}(x, key=1)")
            } else {
                format!("{popular}(a)")
            };
            out.push(Example {
                example_id: format!("py{i:05}"),
                intent: sentence(rng, 3, 8),
                code,
                language: Language::Python,
                group_key: format!("post{post}"),
                oracle_doc_ids: Vec::new(),
                split: Split::Unassigned,
            });
        }
        post += 1;
    }
    out
}

/// Every size-`k` subset of `0..n`, as bitmasks.
pub fn subsets(n: u32, k: u32) -> impl Iterator<Item = u32> {
    (0u32..(1 << n)).filter(move |m| m.count_ones() == k)
}
