//! Document score vectors, sparsification, and the impact-ordered inverted
//! index.
//!
//! An impact index maps each vocabulary token to a posting list of
//! `(doc ordinal, score)` pairs — the score is whatever the document scorer
//! precomputed, so query time is pure lookup-and-sum. The on-disk format is
//! versioned, carries a vocabulary checksum, and round-trips bit-exactly.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocabulary};

/// Dense per-token scores for one document; length is exactly the
/// vocabulary size.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    scores: Vec<f32>,
}

impl ScoreVector {
    pub fn new(scores: Vec<f32>) -> Result<Self> {
        if let Some(bad) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Invariant(format!(
                "non-finite score at token {bad}"
            )));
        }
        Ok(ScoreVector { scores })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.scores
    }

    pub fn get(&self, t: TokenId) -> f32 {
        self.scores[t.index()]
    }
}

/// Sparse form: `(token id, score)` entries, strictly ascending by id,
/// zero-score entries omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SparseScoreVector {
    entries: Vec<(TokenId, f32)>,
}

impl SparseScoreVector {
    pub fn new(entries: Vec<(TokenId, f32)>) -> Result<Self> {
        for w in entries.windows(2) {
            if w[0].0 >= w[1].0 {
                return Err(Error::Invariant(
                    "sparse vector token ids must be strictly ascending".into(),
                ));
            }
        }
        if entries.iter().any(|&(_, s)| !s.is_finite()) {
            return Err(Error::Invariant("non-finite sparse score".into()));
        }
        Ok(SparseScoreVector { entries })
    }

    pub fn entries(&self) -> &[(TokenId, f32)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Expands to a dense vector of length `vocab_size`.
    pub fn to_dense(&self, vocab_size: usize) -> Result<ScoreVector> {
        let mut scores = vec![0.0f32; vocab_size];
        for &(t, s) in &self.entries {
            if t.index() >= vocab_size {
                return Err(Error::InvalidArgument(format!(
                    "token id {t} out of range for vocabulary of size {vocab_size}"
                )));
            }
            scores[t.index()] = s;
        }
        ScoreVector::new(scores)
    }
}

/// Keeps the top-k scoring tokens of a dense vector.
///
/// Ranking is by score descending with ties broken by smaller token id;
/// exact-zero entries are never candidates (they cannot change any inner
/// product), so the result may hold fewer than k entries. Retained scores
/// are the original values, and the entry set for k1 ≤ k2 is always a
/// subset of the k2 result.
pub fn sparsify(sv: &ScoreVector, k: usize) -> Result<SparseScoreVector> {
    if k == 0 {
        return Err(Error::InvalidArgument("sparsify requires k >= 1".into()));
    }
    let mut candidates: Vec<(TokenId, f32)> = sv
        .values()
        .iter()
        .enumerate()
        .filter(|&(_, &s)| s != 0.0)
        .map(|(i, &s)| (TokenId(i as u32), s))
        .collect();
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    candidates.truncate(k);
    candidates.sort_by_key(|&(t, _)| t);
    SparseScoreVector::new(candidates)
}

pub const INDEX_MAGIC: &[u8; 8] = b"NAILIDX1";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct IndexMetadata {
    pub version: u32,
    pub vocab_size: u32,
    pub num_docs: u32,
    pub vocab_checksum: [u8; 32],
    /// Which scorer produced the postings (e.g. "bm25", "model").
    pub scorer_tag: String,
}

/// Impact-ordered inverted index: per-token posting lists of precomputed
/// document scores, plus the ordinal → doc_id table.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpactIndex {
    meta: IndexMetadata,
    doc_ids: Vec<String>,
    /// token id → (doc ordinal, score), ordinals strictly ascending.
    postings: BTreeMap<u32, Vec<(u32, f32)>>,
}

impl ImpactIndex {
    pub fn metadata(&self) -> &IndexMetadata {
        &self.meta
    }

    pub fn num_docs(&self) -> u32 {
        self.meta.num_docs
    }

    pub fn vocab_size(&self) -> u32 {
        self.meta.vocab_size
    }

    pub fn doc_id(&self, ordinal: u32) -> &str {
        &self.doc_ids[ordinal as usize]
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    /// Posting list for one token; empty when the token occurs in no
    /// document.
    pub fn postings_for(&self, t: TokenId) -> Result<&[(u32, f32)]> {
        if t.0 >= self.meta.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "token id {t} out of range for index vocabulary of size {}",
                self.meta.vocab_size
            )));
        }
        Ok(self
            .postings
            .get(&t.0)
            .map(|v| v.as_slice())
            .unwrap_or(&[]))
    }

    /// Total number of stored postings.
    pub fn nnz(&self) -> u64 {
        self.postings.values().map(|v| v.len() as u64).sum()
    }

    /// Fails with an incompatibility error unless the index was built
    /// against this exact vocabulary.
    pub fn require_vocabulary(&self, vocab: &Vocabulary) -> Result<()> {
        if self.meta.vocab_size as usize != vocab.size()
            || self.meta.vocab_checksum != vocab.checksum()
        {
            return Err(Error::Incompatible(
                "index was built against a different vocabulary".into(),
            ));
        }
        Ok(())
    }

    /// Reconstructs each document's sparse vector from the postings,
    /// ordinal order.
    pub fn doc_vectors(&self) -> Vec<SparseScoreVector> {
        let mut per_doc: Vec<Vec<(TokenId, f32)>> =
            vec![Vec::new(); self.meta.num_docs as usize];
        for (&t, list) in &self.postings {
            for &(ord, s) in list {
                per_doc[ord as usize].push((TokenId(t), s));
            }
        }
        per_doc
            .into_iter()
            .map(|entries| SparseScoreVector { entries })
            .collect()
    }
}

fn entries_for_doc(
    sv: &ScoreVector,
    sparsify_k: Option<usize>,
    vocab_size: usize,
) -> Result<SparseScoreVector> {
    if sv.len() != vocab_size {
        return Err(Error::Invariant(format!(
            "score vector length {} != vocabulary size {vocab_size}",
            sv.len()
        )));
    }
    match sparsify_k {
        Some(k) => sparsify(sv, k),
        // Unsparsified builds still drop exact zeros.
        None => sparsify(sv, sv.len().max(1)),
    }
}

/// Wraps a scorer error with the document that triggered it.
fn name_failing_doc(err: Error, doc_id: &str) -> Error {
    let tag = |m: String| format!("document '{doc_id}': {m}");
    match err {
        Error::InvalidArgument(m) => Error::InvalidArgument(tag(m)),
        Error::Incompatible(m) => Error::Incompatible(tag(m)),
        Error::Invariant(m) => Error::Invariant(tag(m)),
        other => other,
    }
}

struct IndexAssembler {
    vocab_size: usize,
    doc_ids: Vec<String>,
    seen: HashSet<String>,
    postings: BTreeMap<u32, Vec<(u32, f32)>>,
}

impl IndexAssembler {
    fn new(vocab_size: usize) -> Self {
        IndexAssembler {
            vocab_size,
            doc_ids: Vec::new(),
            seen: HashSet::new(),
            postings: BTreeMap::new(),
        }
    }

    fn push(&mut self, doc_id: String, entries: SparseScoreVector) -> Result<()> {
        if !self.seen.insert(doc_id.clone()) {
            return Err(Error::InvalidArgument(format!(
                "duplicate doc_id '{doc_id}'"
            )));
        }
        let ordinal = self.doc_ids.len() as u32;
        for &(t, s) in entries.entries() {
            if t.index() >= self.vocab_size {
                return Err(Error::Invariant(format!(
                    "document '{doc_id}': score vector token {t} exceeds vocabulary size {}",
                    self.vocab_size
                )));
            }
            self.postings.entry(t.0).or_default().push((ordinal, s));
        }
        self.doc_ids.push(doc_id);
        Ok(())
    }

    fn finish(self, vocab: &Vocabulary, scorer_tag: &str) -> ImpactIndex {
        ImpactIndex {
            meta: IndexMetadata {
                version: INDEX_VERSION,
                vocab_size: self.vocab_size as u32,
                num_docs: self.doc_ids.len() as u32,
                vocab_checksum: vocab.checksum(),
                scorer_tag: scorer_tag.to_string(),
            },
            doc_ids: self.doc_ids,
            postings: self.postings,
        }
    }
}

/// Builds an index by scoring documents in stream order. A scorer failure
/// aborts the build, naming the document.
pub fn build_index<I, F>(
    docs: I,
    scorer: F,
    sparsify_k: Option<usize>,
    vocab: &Vocabulary,
    scorer_tag: &str,
) -> Result<ImpactIndex>
where
    I: IntoIterator<Item = Result<Document>>,
    F: Fn(&Document) -> Result<ScoreVector>,
{
    if sparsify_k == Some(0) {
        return Err(Error::InvalidArgument("sparsify requires k >= 1".into()));
    }
    let mut assembler = IndexAssembler::new(vocab.size());
    for doc in docs {
        let doc = doc?;
        let sv = scorer(&doc).map_err(|e| name_failing_doc(e, &doc.doc_id))?;
        let entries = entries_for_doc(&sv, sparsify_k, vocab.size())
            .map_err(|e| name_failing_doc(e, &doc.doc_id))?;
        assembler.push(doc.doc_id, entries)?;
    }
    Ok(assembler.finish(vocab, scorer_tag))
}

/// Parallel build over a materialized corpus. Documents are scored across
/// `threads` workers (global pool when `None`) but assembled in ingestion
/// order, so the result is identical to the serial build.
pub fn build_index_parallel<F>(
    docs: &[Document],
    scorer: F,
    sparsify_k: Option<usize>,
    vocab: &Vocabulary,
    scorer_tag: &str,
    threads: Option<usize>,
) -> Result<ImpactIndex>
where
    F: Fn(&Document) -> Result<ScoreVector> + Sync,
{
    use rayon::prelude::*;

    if sparsify_k == Some(0) {
        return Err(Error::InvalidArgument("sparsify requires k >= 1".into()));
    }
    let score_all = || -> Vec<Result<SparseScoreVector>> {
        docs.par_iter()
            .map(|doc| {
                let sv = scorer(doc).map_err(|e| name_failing_doc(e, &doc.doc_id))?;
                entries_for_doc(&sv, sparsify_k, vocab.size())
                    .map_err(|e| name_failing_doc(e, &doc.doc_id))
            })
            .collect()
    };
    let scored = match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
            pool.install(score_all)
        }
        None => score_all(),
    };
    let mut assembler = IndexAssembler::new(vocab.size());
    // First failure in document order wins, independent of scheduling.
    for (doc, entries) in docs.iter().zip(scored) {
        assembler.push(doc.doc_id.clone(), entries?)?;
    }
    Ok(assembler.finish(vocab, scorer_tag))
}

/// Build timing/shape summary for reporting.
pub struct BuildReport {
    pub num_docs: u32,
    pub nnz: u64,
    pub elapsed: std::time::Duration,
}

/// Runs a parallel build and reports doc count, posting count, and wall
/// time.
pub fn build_index_reported<F>(
    docs: &[Document],
    scorer: F,
    sparsify_k: Option<usize>,
    vocab: &Vocabulary,
    scorer_tag: &str,
    threads: Option<usize>,
) -> Result<(ImpactIndex, BuildReport)>
where
    F: Fn(&Document) -> Result<ScoreVector> + Sync,
{
    let start = Instant::now();
    let index = build_index_parallel(docs, scorer, sparsify_k, vocab, scorer_tag, threads)?;
    let report = BuildReport {
        num_docs: index.num_docs(),
        nnz: index.nnz(),
        elapsed: start.elapsed(),
    };
    Ok((index, report))
}

/// Serializes the index: magic, metadata, doc-id table, then per-token
/// posting blocks with token ids ascending, all little-endian.
pub fn save_index(index: &ImpactIndex, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = Writer::new(INDEX_MAGIC);
    w.u32(index.meta.version);
    w.u32(index.meta.vocab_size);
    w.u32(index.meta.num_docs);
    w.bytes(&index.meta.vocab_checksum);
    w.string(&index.meta.scorer_tag);
    for doc_id in &index.doc_ids {
        w.string(doc_id);
    }
    w.u32(index.postings.len() as u32);
    for (&t, list) in &index.postings {
        w.u32(t);
        w.u32(list.len() as u32);
        for &(ord, score) in list {
            w.u32(ord);
            w.f32(score);
        }
    }
    w.finish(path)
}

/// Loads an index file. Fails on unknown magic, a different format version,
/// or structural corruption. Vocabulary compatibility is the caller's check
/// (see [`ImpactIndex::require_vocabulary`]) since the vocabulary is a
/// separate artifact.
pub fn load_index(path: impl AsRef<Path>) -> Result<ImpactIndex> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(&buf, path, INDEX_MAGIC)?;
    let version = r.u32()?;
    if version != INDEX_VERSION {
        return Err(Error::Incompatible(format!(
            "index format version {version} (supported: {INDEX_VERSION})"
        )));
    }
    let vocab_size = r.u32()?;
    let num_docs = r.u32()?;
    let vocab_checksum: [u8; 32] = r.array()?;
    let scorer_tag = r.string()?;
    let mut doc_ids = Vec::with_capacity(num_docs as usize);
    for _ in 0..num_docs {
        doc_ids.push(r.string()?);
    }
    let num_tokens = r.u32()?;
    let mut postings = BTreeMap::new();
    let mut prev_token: Option<u32> = None;
    for _ in 0..num_tokens {
        let t = r.u32()?;
        if t >= vocab_size {
            return Err(r.error(format!("posting token {t} out of range")));
        }
        if prev_token.is_some_and(|p| p >= t) {
            return Err(r.error("posting tokens out of order"));
        }
        prev_token = Some(t);
        let count = r.u32()?;
        let mut list = Vec::with_capacity(count as usize);
        let mut prev_ord: Option<u32> = None;
        for _ in 0..count {
            let ord = r.u32()?;
            if ord >= num_docs {
                return Err(r.error(format!("posting ordinal {ord} out of range")));
            }
            if prev_ord.is_some_and(|p| p >= ord) {
                return Err(r.error("posting ordinals out of order"));
            }
            prev_ord = Some(ord);
            list.push((ord, r.f32()?));
        }
        postings.insert(t, list);
    }
    r.finish()?;
    Ok(ImpactIndex {
        meta: IndexMetadata {
            version,
            vocab_size,
            num_docs,
            vocab_checksum,
            scorer_tag,
        },
        doc_ids,
        postings,
    })
}

/// Loads an index and verifies it matches `vocab`.
pub fn load_index_for(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<ImpactIndex> {
    let index = load_index(path)?;
    index.require_vocabulary(vocab)?;
    Ok(index)
}

#[derive(Serialize, Deserialize)]
struct VectorRecord {
    id: String,
    entries: Vec<(u32, f32)>,
}

/// Doc-id keyed sparse score vectors, preserving insertion order so that
/// exports are deterministic.
#[derive(Debug, Clone, Default)]
pub struct DocVectorStore {
    order: Vec<String>,
    map: HashMap<String, SparseScoreVector>,
}

impl DocVectorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, doc_id: String, v: SparseScoreVector) -> Result<()> {
        if self.map.contains_key(&doc_id) {
            return Err(Error::InvalidArgument(format!(
                "duplicate doc_id '{doc_id}'"
            )));
        }
        self.order.push(doc_id.clone());
        self.map.insert(doc_id, v);
        Ok(())
    }

    pub fn get(&self, doc_id: &str) -> Option<&SparseScoreVector> {
        self.map.get(doc_id)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &SparseScoreVector)> {
        self.order.iter().map(|id| (id.as_str(), &self.map[id]))
    }

    /// Rebuilds per-document vectors from an index's postings.
    pub fn from_index(index: &ImpactIndex) -> Self {
        let mut store = DocVectorStore::new();
        for (doc_id, entries) in index.doc_ids().iter().zip(index.doc_vectors()) {
            store
                .insert(doc_id.clone(), entries)
                .expect("index doc_ids are unique");
        }
        store
    }

    /// NDJSON interchange: one `{"id", "entries": [[token_id, score], ...]}`
    /// line per document, insertion order.
    pub fn save_ndjson(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for (id, v) in self.iter() {
            let record = VectorRecord {
                id: id.to_string(),
                entries: v.entries().iter().map(|&(t, s)| (t.0, s)).collect(),
            };
            out.push_str(&serde_json::to_string(&record).expect("vector record serializes"));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load_ndjson(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut store = DocVectorStore::new();
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let record: VectorRecord = serde_json::from_str(&line).map_err(|e| {
                Error::format(path, lineno + 1, format!("malformed vector record: {e}"))
            })?;
            let entries = record
                .entries
                .into_iter()
                .map(|(t, s)| (TokenId(t), s))
                .collect();
            let v = SparseScoreVector::new(entries).map_err(|e| {
                Error::format(path, lineno + 1, format!("invalid vector: {e}"))
            })?;
            store.insert(record.id, v).map_err(|e| {
                Error::format(path, lineno + 1, format!("{e}"))
            })?;
        }
        Ok(store)
    }
}
