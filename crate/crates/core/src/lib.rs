//! # docprompt
//!
//! Non-neural core of a documentation-retrieval pipeline for natural-language
//! to code generation:
//!
//! - [`corpus`]: tldr page parsing, manual paragraph splitting, documentation
//!   pools and example sets in line-delimited JSON.
//! - [`sparse`]: BM25 inverted index with flat and two-stage (manual, then
//!   paragraph) search.
//! - [`dense`]: exact cosine top-k over externally produced embeddings and the
//!   in-batch-negatives contrastive loss.
//! - [`oracle`]: oracle documentation annotation for shell and Python examples.
//! - [`split`]: leakage-free train/dev/test splits.
//! - [`metrics`]: generation, retrieval and pass@k evaluation.
//! - [`generation`]: few-shot and fusion-in-decoder prompt assembly and a
//!   completion endpoint client.
//! - [`pipeline`]: resumable end-to-end experiment runner.

pub mod corpus;
pub mod dense;
pub mod generation;
pub mod jsonl;
pub mod metrics;
pub mod oracle;
pub mod pipeline;
pub mod sparse;
pub mod split;

pub use corpus::{Doc, DocPool, Example, Language, Split};
pub use sparse::{InvertedIndex, RetrievalResult};
