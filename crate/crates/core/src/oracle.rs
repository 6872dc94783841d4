//! Oracle documentation for examples: which docs a correct program needs.
//!
//! Shell: the command's first manual paragraph plus every paragraph that
//! documents a flag used in the code. Python: BM25 over fully-qualified
//! function paths, queried with the code stripped down to call paths and
//! keyword-argument names.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::corpus::{DocPool, Example};
use crate::sparse::InvertedIndex;

/// Oracle functions kept per Python example.
pub const DEFAULT_FUNCTION_K: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("command `{0}` has no manual in the pool")]
    UnknownCommand(String),
}

const PY_KEYWORDS: &[&str] = &[
    "and", "as", "assert", "async", "await", "del", "elif", "else", "except", "for", "from", "if",
    "import", "in", "is", "lambda", "not", "or", "return", "while", "with", "yield", "raise",
];

fn ident_start(c: char) -> bool {
    c.is_alphabetic() || c == '_'
}

fn ident_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Lexical scan of a code snippet.
#[derive(Debug, Default)]
struct Scan {
    calls: Vec<String>,
    /// Call paths and keyword-argument names in order of appearance.
    kept: Vec<String>,
}

fn skip_string(chars: &[char], mut i: usize) -> usize {
    let quote = chars[i];
    let triple = chars.get(i + 1) == Some(&quote) && chars.get(i + 2) == Some(&quote);
    if triple {
        i += 3;
        while i < chars.len() {
            if chars[i] == '\\' {
                i += 2;
                continue;
            }
            if chars[i] == quote && chars.get(i + 1) == Some(&quote) && chars.get(i + 2) == Some(&quote) {
                return i + 3;
            }
            i += 1;
        }
        return chars.len();
    }
    i += 1;
    while i < chars.len() {
        match chars[i] {
            '\\' => i += 2,
            '\n' => return i + 1,
            c if c == quote => return i + 1,
            _ => i += 1,
        }
    }
    chars.len()
}

fn scan(code: &str) -> Scan {
    let chars: Vec<char> = code.chars().collect();
    let mut out = Scan::default();
    let mut depth = 0usize;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            '#' => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
            }
            '\'' | '"' => i = skip_string(&chars, i),
            '(' | '[' | '{' => {
                depth += 1;
                i += 1;
            }
            ')' | ']' | '}' => {
                depth = depth.saturating_sub(1);
                i += 1;
            }
            c if c.is_ascii_digit() => {
                while i < chars.len() && (ident_char(chars[i]) || chars[i] == '.') {
                    i += 1;
                }
            }
            c if ident_start(c) => {
                let start = i;
                let mut segments = 1;
                while i < chars.len() && ident_char(chars[i]) {
                    i += 1;
                }
                while i + 1 < chars.len() && chars[i] == '.' && ident_start(chars[i + 1]) {
                    i += 1;
                    while i < chars.len() && ident_char(chars[i]) {
                        i += 1;
                    }
                    segments += 1;
                }
                let name: String = chars[start..i].iter().collect();
                // string prefixes such as f"..." or rb'...'
                if segments == 1 && matches!(chars.get(i), Some('\'' | '"')) {
                    continue;
                }
                if chars.get(i) == Some(&'(') {
                    if !(segments == 1 && PY_KEYWORDS.contains(&name.as_str())) {
                        out.calls.push(name.clone());
                        out.kept.push(name);
                    }
                    continue;
                }
                if segments == 1 && depth > 0 {
                    let mut j = i;
                    while j < chars.len() && chars[j] == ' ' {
                        j += 1;
                    }
                    if chars.get(j) == Some(&'=') && chars.get(j + 1) != Some(&'=') {
                        out.kept.push(name);
                    }
                }
            }
            _ => i += 1,
        }
    }
    out
}

fn dedup(items: Vec<String>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    items.into_iter().filter(|s| seen.insert(s.clone())).collect()
}

/// Every maximal dotted identifier immediately followed by `(`, first
/// occurrence order, ignoring string literals and comments.
///
/// ```
/// use docprompt::oracle::extract_call_names;
/// assert_eq!(extract_call_names("df.to_csv('f.csv', header=False)"), ["df.to_csv"]);
/// ```
pub fn extract_call_names(code: &str) -> Vec<String> {
    dedup(scan(code).calls)
}

/// Code reduced to what identifies the functions it uses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CleanCode {
    pub original: String,
    /// Call paths and keyword-argument names, space separated. Literals and
    /// bare variables are dropped.
    pub cleaned: String,
    pub extracted_names: Vec<String>,
}

pub fn clean_code(code: &str) -> CleanCode {
    let scan = scan(code);
    CleanCode {
        original: code.to_string(),
        cleaned: dedup(scan.kept).join(" "),
        extracted_names: dedup(scan.calls),
    }
}

fn strip_flag_value(name: &str) -> &str {
    name.split(['=', '[']).next().unwrap_or(name)
}

fn is_flag(token: &str) -> bool {
    let rest = token.trim_start_matches('-');
    token.starts_with('-') && rest.len() < token.len() && rest.starts_with(|c: char| c.is_alphanumeric())
}

/// Flags used in a shell command, e.g. `-f` from `toilet 'x' -f 'font'`.
pub fn code_flags(code: &str) -> Vec<String> {
    let flags = code
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| matches!(c, '\'' | '"' | '(' | ')' | ';' | '`')))
        .filter(|t| is_flag(t))
        .map(|t| strip_flag_value(t).to_string())
        .collect();
    dedup(flags)
}

/// Flag names a paragraph opens with: `-f, --font=NAME Use NAME` yields
/// `-f` and `--font`; `-f FONT, --font FONT` yields the same.
pub fn leading_flags(body: &str) -> Vec<String> {
    let tokens: Vec<&str> = body.split_whitespace().collect();
    let mut names = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let tok = tokens[i];
        let name = tok.trim_end_matches(',');
        if is_flag(name) {
            names.push(strip_flag_value(name).to_string());
        } else if names.is_empty() || !tok.ends_with(',') {
            break;
        }
        if tok.ends_with(',') {
            i += 1;
            continue;
        }
        // `-f FONT, --font`: an argument placeholder closes the synonym.
        let arg_then_flag = tokens.get(i + 1).is_some_and(|t| t.ends_with(',') && !is_flag(t.trim_end_matches(',')))
            && tokens.get(i + 2).is_some_and(|t| is_flag(t.trim_end_matches(',')));
        if is_flag(name) && arg_then_flag {
            i += 2;
            continue;
        }
        break;
    }
    names
}

/// First paragraph of the command's manual plus paragraphs documenting a
/// flag from the code, in `seq` order.
pub fn annotate_shell(example: &Example, pool: &DocPool) -> Result<Vec<String>, OracleError> {
    let paragraphs = pool
        .paragraphs(&example.group_key)
        .ok_or_else(|| OracleError::UnknownCommand(example.group_key.clone()))?;
    let flags = code_flags(&example.code);
    Ok(paragraphs
        .filter(|doc| {
            doc.seq == 0 || leading_flags(&doc.body).iter().any(|f| flags.contains(f))
        })
        .map(|doc| doc.doc_id.clone())
        .collect())
}

/// Queries a function-path index (see
/// [`build_name_index`](crate::sparse::build_name_index)) with the cleaned
/// code and returns the leading doc of each of the top-`k` functions.
/// An empty cleaned query yields an empty list.
pub fn annotate_function_docs(example: &Example, name_index: &InvertedIndex, pool: &DocPool, k: usize) -> Vec<String> {
    let cleaned = clean_code(&example.code).cleaned;
    if cleaned.is_empty() {
        return Vec::new();
    }
    name_index
        .search(&cleaned, k)
        .into_iter()
        .filter_map(|hit| pool.paragraphs(&hit.doc_ref).and_then(|mut p| p.next()))
        .map(|doc| doc.doc_id.clone())
        .collect()
}
