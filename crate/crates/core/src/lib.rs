//! Learned sparse lexical retrieval over an explicit vocabulary.
//!
//! Documents are encoded offline into vocabulary-sized score vectors by a
//! small non-autoregressive model (or by BM25, used both as a baseline and
//! as the first-stage retriever). The vectors are stored in an
//! impact-ordered inverted index, and query evaluation reduces to
//! tokenizing the query and accumulating inner products over its posting
//! lists — no model runs at query time.
//!
//! Module map:
//! - [`vocab`]: vocabulary files, greedy longest-prefix tokenization, and
//!   query featurization;
//! - [`corpus`]: NDJSON corpora, TSV queries, relevance judgments, and
//!   ranked run files;
//! - [`index`]: score vectors, top-k sparsification, and the binary
//!   inverted index;
//! - [`scoring`]: inner-product and BM25 scoring, retrieval, and reranking;
//! - [`model`]: the document-side encoder, contrastive training, and
//!   checkpoints;
//! - [`eval`]: ranking metrics and the sparsification sweep.

mod binio;

pub mod corpus;
pub mod error;
pub mod eval;
pub mod index;
pub mod model;
pub mod scoring;
pub mod vocab;

pub use error::{Error, Result};
