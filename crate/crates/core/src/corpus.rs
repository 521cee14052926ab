//! Corpus, query, judgment, and run-file I/O.
//!
//! Formats: corpora are NDJSON lines `{"id": ..., "text": ...}`, queries are
//! `query_id TAB text`, judgments are 4-column TREC qrels, and retrieval
//! output is the 6-column TREC run format.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    #[serde(rename = "id")]
    pub doc_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryRecord {
    pub query_id: String,
    pub text: String,
}

/// Streaming reader over an NDJSON corpus; yields documents in file order
/// and checks doc-id uniqueness as it goes.
pub struct CorpusReader {
    path: PathBuf,
    lines: std::io::Lines<BufReader<std::fs::File>>,
    lineno: usize,
    seen: HashSet<String>,
    failed: bool,
}

impl Iterator for CorpusReader {
    type Item = Result<Document>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let line = match self.lines.next()? {
            Ok(line) => line,
            Err(e) => {
                self.failed = true;
                return Some(Err(Error::io(&self.path, e)));
            }
        };
        self.lineno += 1;
        let doc: Document = match serde_json::from_str(&line) {
            Ok(doc) => doc,
            Err(e) => {
                self.failed = true;
                return Some(Err(Error::format(
                    &self.path,
                    self.lineno,
                    format!("malformed document record: {e}"),
                )));
            }
        };
        if !self.seen.insert(doc.doc_id.clone()) {
            self.failed = true;
            return Some(Err(Error::format(
                &self.path,
                self.lineno,
                format!("duplicate doc_id '{}'", doc.doc_id),
            )));
        }
        Some(Ok(doc))
    }
}

/// Opens a corpus for streaming. Errors (including duplicate ids) surface on
/// the offending record; iteration stops after the first error.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<CorpusReader> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(CorpusReader {
        path: path.to_path_buf(),
        lines: BufReader::new(file).lines(),
        lineno: 0,
        seen: HashSet::new(),
        failed: false,
    })
}

/// Convenience: fully materialize a corpus.
pub fn load_corpus_vec(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    load_corpus(path)?.collect()
}

/// Loads `query_id TAB text` lines, order-preserving.
pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<QueryRecord>> {
    let path = path.as_ref();
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut queries = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in raw.lines().enumerate() {
        let (query_id, text) = line.split_once('\t').ok_or_else(|| {
            Error::format(path, lineno + 1, "expected 'query_id<TAB>text'")
        })?;
        if !seen.insert(query_id.to_string()) {
            return Err(Error::format(
                path,
                lineno + 1,
                format!("duplicate query_id '{query_id}'"),
            ));
        }
        queries.push(QueryRecord {
            query_id: query_id.to_string(),
            text: text.to_string(),
        });
    }
    Ok(queries)
}

/// Graded relevance judgments. Absent pairs have grade 0.
#[derive(Debug, Clone, Default)]
pub struct Qrels {
    /// query_id → (doc_id → grade). BTreeMap keeps query iteration
    /// deterministic for reporting.
    by_query: BTreeMap<String, HashMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a judgment; repeated pairs keep the last grade.
    pub fn insert(&mut self, query_id: &str, doc_id: &str, grade: u32) {
        self.by_query
            .entry(query_id.to_string())
            .or_default()
            .insert(doc_id.to_string(), grade);
    }

    pub fn grade(&self, query_id: &str, doc_id: &str) -> u32 {
        self.by_query
            .get(query_id)
            .and_then(|m| m.get(doc_id).copied())
            .unwrap_or(0)
    }

    /// Judgments for one query, if any were recorded.
    pub fn for_query(&self, query_id: &str) -> Option<&HashMap<String, u32>> {
        self.by_query.get(query_id)
    }

    pub fn contains_query(&self, query_id: &str) -> bool {
        self.by_query.contains_key(query_id)
    }

    /// Judged query ids in sorted order.
    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.by_query.keys().map(|s| s.as_str())
    }

    pub fn num_queries(&self) -> usize {
        self.by_query.len()
    }
}

/// Loads 4-column TREC qrels: `query_id 0 doc_id grade`, whitespace
/// separated. The second column is present for format compatibility and is
/// not interpreted.
pub fn load_qrels(path: impl AsRef<Path>) -> Result<Qrels> {
    let path = path.as_ref();
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut qrels = Qrels::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::format(
                path,
                lineno + 1,
                format!("expected 4 fields, found {}", fields.len()),
            ));
        }
        let grade: u32 = fields[3].parse().map_err(|_| {
            Error::format(
                path,
                lineno + 1,
                format!("relevance grade '{}' is not a non-negative integer", fields[3]),
            )
        })?;
        qrels.insert(fields[0], fields[2], grade);
    }
    Ok(qrels)
}

/// One line of a TREC run file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunEntry {
    pub query_id: String,
    pub doc_id: String,
    /// 1-based rank within the query.
    pub rank: u32,
    pub score: f64,
    pub tag: String,
}

/// Checks the run invariants: per query, ranks are 1..n without gaps and
/// scores never increase with rank.
fn validate_run(entries: &[RunEntry]) -> Result<()> {
    let mut per_query: BTreeMap<&str, Vec<(u32, f64)>> = BTreeMap::new();
    for e in entries {
        if !e.score.is_finite() {
            return Err(Error::Invariant(format!(
                "non-finite score for query '{}' doc '{}'",
                e.query_id, e.doc_id
            )));
        }
        per_query
            .entry(&e.query_id)
            .or_default()
            .push((e.rank, e.score));
    }
    for (qid, mut ranked) in per_query {
        ranked.sort_by_key(|&(rank, _)| rank);
        let mut prev_score = f64::INFINITY;
        for (i, (rank, score)) in ranked.iter().enumerate() {
            if *rank != i as u32 + 1 {
                return Err(Error::Invariant(format!(
                    "query '{qid}': ranks must be 1..n without gaps (found {rank} at position {})",
                    i + 1
                )));
            }
            if *score > prev_score {
                return Err(Error::Invariant(format!(
                    "query '{qid}': scores increase at rank {rank}"
                )));
            }
            prev_score = *score;
        }
    }
    Ok(())
}

/// Writes a run in the 6-column TREC format
/// `query_id Q0 doc_id rank score tag`. Nothing is written if the entries
/// violate the run invariants. Scores are fixed to 6 decimal places, which
/// is also the round-trip comparison precision.
pub fn write_run(entries: &[RunEntry], path: impl AsRef<Path>, tag: &str) -> Result<()> {
    validate_run(entries)?;
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    for e in entries {
        writeln!(
            out,
            "{} Q0 {} {} {:.6} {}",
            e.query_id, e.doc_id, e.rank, e.score, tag
        )
        .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Parses a 6-column TREC run file, preserving line order.
pub fn load_run(path: impl AsRef<Path>) -> Result<Vec<RunEntry>> {
    let path = path.as_ref();
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(Error::format(
                path,
                lineno + 1,
                format!("expected 6 fields, found {}", fields.len()),
            ));
        }
        let rank: u32 = fields[3].parse().map_err(|_| {
            Error::format(path, lineno + 1, format!("bad rank '{}'", fields[3]))
        })?;
        let score: f64 = fields[4].parse().map_err(|_| {
            Error::format(path, lineno + 1, format!("bad score '{}'", fields[4]))
        })?;
        entries.push(RunEntry {
            query_id: fields[0].to_string(),
            doc_id: fields[2].to_string(),
            rank,
            score,
            tag: fields[5].to_string(),
        });
    }
    Ok(entries)
}
