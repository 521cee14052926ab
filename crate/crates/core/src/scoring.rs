//! Query-time scoring.
//!
//! Two scoring families share one interface: BM25 over term frequencies
//! (candidate generation) and inner products against precomputed document
//! score vectors (reranking and exhaustive retrieval). All accumulation is
//! f64, and every path sums a document's terms in ascending token-id order,
//! so posting traversal and dense scoring agree bit-for-bit.

use std::collections::BTreeMap;
use std::collections::HashMap;

use crate::corpus::{Document, RunEntry};
use crate::error::{Error, Result};
use crate::index::{DocVectorStore, ImpactIndex, ScoreVector, SparseScoreVector};
use crate::vocab::{QueryFeature, TokenId, TokenSequence, Vocabulary, UNK_ID};

/// One retrieved document with its final score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub score: f64,
}

/// Inner product of a query feature with a dense document vector:
/// `Σ_t qf[t] · sv[t]`, summed in ascending token order.
pub fn score_pair(qf: &QueryFeature, sv: &ScoreVector) -> f64 {
    let mut sum = 0.0f64;
    for &(t, w) in qf.entries() {
        sum += w * f64::from(sv.get(t));
    }
    sum
}

/// Inner product against a sparse vector; identical to [`score_pair`] on
/// the densified vector (absent entries contribute exact zeros).
pub fn score_pair_sparse(qf: &QueryFeature, sv: &SparseScoreVector) -> f64 {
    let entries = sv.entries();
    let mut sum = 0.0f64;
    let mut i = 0;
    for &(t, w) in qf.entries() {
        while i < entries.len() && entries[i].0 < t {
            i += 1;
        }
        if i < entries.len() && entries[i].0 == t {
            sum += w * f64::from(entries[i].1);
        }
    }
    sum
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 0.9, b: 0.4 }
    }
}

/// Corpus statistics backing BM25: document frequencies, lengths, and the
/// free parameters.
#[derive(Debug, Clone)]
pub struct Bm25Stats {
    pub num_docs: u32,
    /// token id → number of documents containing it (UNK excluded — it can
    /// never appear in a query feature).
    pub df: HashMap<u32, u32>,
    /// ordinal → emitted token count (UNK emissions included).
    pub doc_len: Vec<u32>,
    pub avgdl: f64,
    pub params: Bm25Params,
}

impl Bm25Stats {
    pub fn df_of(&self, t: TokenId) -> u32 {
        self.df.get(&t.0).copied().unwrap_or(0)
    }
}

/// Term-frequency inverted index with BM25 statistics.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    stats: Bm25Stats,
    doc_ids: Vec<String>,
    /// token id → (doc ordinal, term frequency), ordinals ascending.
    postings: BTreeMap<u32, Vec<(u32, u32)>>,
}

impl Bm25Index {
    /// Tokenizes and indexes a corpus.
    pub fn build<I>(docs: I, vocab: &Vocabulary, params: Bm25Params) -> Result<Self>
    where
        I: IntoIterator<Item = Result<Document>>,
    {
        let mut doc_ids = Vec::new();
        let mut doc_len = Vec::new();
        let mut postings: BTreeMap<u32, Vec<(u32, u32)>> = BTreeMap::new();
        for doc in docs {
            let doc = doc?;
            let ordinal = doc_ids.len() as u32;
            let seq = crate::vocab::tokenize(&doc.text, vocab);
            doc_len.push(seq.len() as u32);
            let mut counts: BTreeMap<u32, u32> = BTreeMap::new();
            for &t in &seq.ids {
                if t != UNK_ID {
                    *counts.entry(t.0).or_insert(0) += 1;
                }
            }
            for (t, tf) in counts {
                postings.entry(t).or_default().push((ordinal, tf));
            }
            doc_ids.push(doc.doc_id);
        }
        let num_docs = doc_ids.len() as u32;
        let df = postings
            .iter()
            .map(|(&t, list)| (t, list.len() as u32))
            .collect();
        let total_len: u64 = doc_len.iter().map(|&l| u64::from(l)).sum();
        let avgdl = if num_docs == 0 {
            0.0
        } else {
            total_len as f64 / f64::from(num_docs)
        };
        Ok(Bm25Index {
            stats: Bm25Stats {
                num_docs,
                df,
                doc_len,
                avgdl,
                params,
            },
            doc_ids,
            postings,
        })
    }

    pub fn stats(&self) -> &Bm25Stats {
        &self.stats
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn num_docs(&self) -> u32 {
        self.stats.num_docs
    }
}

/// BM25 contribution of one term occurrence pattern:
/// `idf(t) · tf·(k1+1) / (tf + k1·(1 − b + b·dl/avgdl))` with
/// `idf(t) = ln(1 + (N − df + 0.5)/(df + 0.5))`.
pub fn bm25_term_score(tf: u32, df: u32, dl: u32, stats: &Bm25Stats) -> f64 {
    if tf == 0 {
        return 0.0;
    }
    let n = f64::from(stats.num_docs);
    let df = f64::from(df);
    let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
    let tf = f64::from(tf);
    let norm = if stats.avgdl > 0.0 {
        f64::from(dl) / stats.avgdl
    } else {
        0.0
    };
    let Bm25Params { k1, b } = stats.params;
    idf * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * norm))
}

/// BM25 score of one document against a query: the sum of term scores over
/// the query's distinct tokens (query-side repetition does not re-weight).
pub fn bm25_score(qf: &QueryFeature, doc_tokens: &TokenSequence, stats: &Bm25Stats) -> f64 {
    let dl = doc_tokens.len() as u32;
    let mut counts: BTreeMap<TokenId, u32> = BTreeMap::new();
    for &t in &doc_tokens.ids {
        if t != UNK_ID {
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    let mut sum = 0.0f64;
    for &(t, _) in qf.entries() {
        let tf = counts.get(&t).copied().unwrap_or(0);
        if tf > 0 {
            sum += bm25_term_score(tf, stats.df_of(t), dl, stats);
        }
    }
    sum
}

/// Ranks matching documents by BM25: score descending, ties by ordinal
/// ascending, truncated to `top_n`. Documents sharing no query term are
/// absent.
pub fn retrieve_bm25(qf: &QueryFeature, index: &Bm25Index, top_n: usize) -> Vec<ScoredDoc> {
    let stats = &index.stats;
    let mut scores: HashMap<u32, f64> = HashMap::new();
    for &(t, _) in qf.entries() {
        let Some(list) = index.postings.get(&t.0) else {
            continue;
        };
        let df = list.len() as u32;
        for &(ord, tf) in list {
            let dl = stats.doc_len[ord as usize];
            *scores.entry(ord).or_insert(0.0) += bm25_term_score(tf, df, dl, stats);
        }
    }
    rank_and_truncate(scores, &index.doc_ids, top_n)
}

/// Re-scores `candidates` by inner product against their stored vectors and
/// stable-sorts descending, so equal scores keep the incoming (candidate)
/// order. The document set is unchanged.
pub fn rerank(
    candidates: &[ScoredDoc],
    qf: &QueryFeature,
    vectors: &DocVectorStore,
) -> Result<Vec<ScoredDoc>> {
    let mut rescored = Vec::with_capacity(candidates.len());
    for c in candidates {
        let v = vectors.get(&c.doc_id).ok_or_else(|| {
            Error::Incompatible(format!(
                "candidate document '{}' has no stored score vector",
                c.doc_id
            ))
        })?;
        rescored.push(ScoredDoc {
            doc_id: c.doc_id.clone(),
            score: score_pair_sparse(qf, v),
        });
    }
    rescored.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(rescored)
}

/// Scores the whole corpus through the impact index: traverses each query
/// token's postings accumulating per-document sums. Every document with at
/// least one matching posting is ranked (score descending, ordinal
/// ascending), truncated to `top_n`.
pub fn retrieve_exhaustive(
    qf: &QueryFeature,
    index: &ImpactIndex,
    top_n: usize,
) -> Vec<ScoredDoc> {
    let mut acc = vec![0.0f64; index.num_docs() as usize];
    let mut matched = vec![false; index.num_docs() as usize];
    for &(t, w) in qf.entries() {
        debug_assert!(t.0 < index.vocab_size(), "query token out of range");
        let Ok(list) = index.postings_for(t) else {
            continue;
        };
        for &(ord, s) in list {
            acc[ord as usize] += w * f64::from(s);
            matched[ord as usize] = true;
        }
    }
    let scores: HashMap<u32, f64> = acc
        .into_iter()
        .zip(&matched)
        .enumerate()
        .filter(|&(_, (_, &m))| m)
        .map(|(ord, (s, _))| (ord as u32, s))
        .collect();
    rank_and_truncate(scores, index.doc_ids(), top_n)
}

fn rank_and_truncate(
    scores: HashMap<u32, f64>,
    doc_ids: &[String],
    top_n: usize,
) -> Vec<ScoredDoc> {
    let mut ranked: Vec<(u32, f64)> = scores.into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(top_n);
    ranked
        .into_iter()
        .map(|(ord, score)| ScoredDoc {
            doc_id: doc_ids[ord as usize].clone(),
            score,
        })
        .collect()
}

/// Cost model for lexical scoring: one multiply-accumulate per (query
/// token, candidate document) pair.
pub fn estimate_flops(query_len: u64, num_docs: u64) -> u64 {
    query_len.saturating_mul(num_docs)
}

/// Converts one query's ranked results into run entries (ranks 1..n).
pub fn to_run_entries(query_id: &str, ranked: &[ScoredDoc], tag: &str) -> Vec<RunEntry> {
    ranked
        .iter()
        .enumerate()
        .map(|(i, d)| RunEntry {
            query_id: query_id.to_string(),
            doc_id: d.doc_id.clone(),
            rank: i as u32 + 1,
            score: d.score,
            tag: tag.to_string(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::{build_index, sparsify};
    use crate::vocab::{featurize_query, tokenize, Vocabulary};

    fn vocab(tokens: &[&str]) -> Vocabulary {
        let mut all = vec!["<unk>".to_string()];
        all.extend(tokens.iter().map(|s| s.to_string()));
        Vocabulary::from_tokens(all).unwrap()
    }

    fn qf(entries: &[(u32, f64)]) -> QueryFeature {
        QueryFeature::from_entries(entries.iter().map(|&(t, w)| (TokenId(t), w)).collect())
            .unwrap()
    }

    fn sv(scores: &[f32]) -> ScoreVector {
        ScoreVector::new(scores.to_vec()).unwrap()
    }

    fn doc(id: &str, text: &str) -> Document {
        Document {
            doc_id: id.into(),
            text: text.into(),
        }
    }

    #[test]
    fn score_pair_hand_values() {
        assert_eq!(score_pair(&qf(&[(1, 1.0), (3, 1.0)]), &sv(&[0.0, 2.5, 9.0, 0.5])), 3.0);
        assert_eq!(score_pair(&qf(&[]), &sv(&[1.0, 2.0])), 0.0);
        assert_eq!(score_pair(&qf(&[(2, 2.0)]), &sv(&[0.0, 0.0, 1.5, 0.0])), 3.0);
    }

    #[test]
    fn score_pair_scales_linearly_in_weights() {
        let dense = sv(&[0.25, -1.5, 3.0, 0.125]);
        let base = score_pair(&qf(&[(0, 1.0), (2, 2.0)]), &dense);
        let scaled = score_pair(&qf(&[(0, 3.0), (2, 6.0)]), &dense);
        assert!((scaled - 3.0 * base).abs() < 1e-12);
    }

    #[test]
    fn sparse_scoring_matches_dense() {
        let dense = sv(&[0.5, 0.0, -2.0, 0.0, 1.25]);
        let sparse = sparsify(&dense, 5).unwrap();
        let q = qf(&[(0, 1.0), (1, 2.0), (2, 1.0), (4, 3.0)]);
        assert_eq!(score_pair(&q, &dense), score_pair_sparse(&q, &sparse));
    }

    #[test]
    fn bm25_single_doc_hand_value() {
        // One document ["a"], query "a": tf=1, df=1, N=1, dl=avgdl=1.
        // idf = ln(1 + 0.5/1.5) = ln(4/3); the tf factor cancels to 1 at
        // k1=0.9, b=0.4.
        let v = vocab(&["a"]);
        let index = Bm25Index::build(
            vec![Ok(doc("d1", "a"))],
            &v,
            Bm25Params::default(),
        )
        .unwrap();
        let q = featurize_query("a", &v);
        let got = bm25_score(&q, &tokenize("a", &v), index.stats());
        let want = (4.0f64 / 3.0).ln();
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
        assert!((want - 0.2877).abs() < 5e-5);

        let ranked = retrieve_bm25(&q, &index, 10);
        assert_eq!(ranked.len(), 1);
        assert!((ranked[0].score - want).abs() < 1e-12);
    }

    #[test]
    fn bm25_ignores_absent_terms_and_zero_tf() {
        let v = vocab(&["a", "b", "c"]);
        let index = Bm25Index::build(
            vec![Ok(doc("d1", "a a b")), Ok(doc("d2", "b"))],
            &v,
            Bm25Params::default(),
        )
        .unwrap();
        // "c" appears in no document.
        let q = featurize_query("c", &v);
        assert!(retrieve_bm25(&q, &index, 10).is_empty());
        assert_eq!(bm25_score(&q, &tokenize("a a b", &v), index.stats()), 0.0);
    }

    #[test]
    fn bm25_retrieval_matches_per_doc_scoring_exactly() {
        let v = vocab(&["a", "b", "c", "d"]);
        let texts = ["a b c", "a a a d", "b d", "c", ""];
        let docs: Vec<Document> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| doc(&format!("d{i}"), t))
            .collect();
        let index =
            Bm25Index::build(docs.iter().cloned().map(Ok), &v, Bm25Params::default()).unwrap();
        let q = featurize_query("a b d", &v);
        let ranked = retrieve_bm25(&q, &index, 10);
        for sd in &ranked {
            let i: usize = sd.doc_id[1..].parse().unwrap();
            let brute = bm25_score(&q, &tokenize(texts[i], &v), index.stats());
            assert_eq!(sd.score, brute, "doc {}", sd.doc_id);
        }
        // Matching docs only: d3 ("c") and d4 ("") share no query term.
        assert_eq!(ranked.len(), 3);
    }

    #[test]
    fn bm25_only_unk_query_is_empty() {
        let v = vocab(&["a"]);
        let index =
            Bm25Index::build(vec![Ok(doc("d1", "a"))], &v, Bm25Params::default()).unwrap();
        let q = featurize_query("zzz", &v);
        assert!(q.is_empty());
        assert!(retrieve_bm25(&q, &index, 5).is_empty());
    }

    #[test]
    fn rerank_reorders_by_vector_score() {
        let mut vectors = DocVectorStore::new();
        vectors
            .insert("low".into(), sparsify(&sv(&[1.0, 0.0]), 2).unwrap())
            .unwrap();
        vectors
            .insert("high".into(), sparsify(&sv(&[2.0, 0.0]), 2).unwrap())
            .unwrap();
        let candidates = vec![
            ScoredDoc { doc_id: "low".into(), score: 9.0 },
            ScoredDoc { doc_id: "high".into(), score: 8.0 },
        ];
        let out = rerank(&candidates, &qf(&[(0, 1.0)]), &vectors).unwrap();
        assert_eq!(out[0].doc_id, "high");
        assert_eq!(out[1].doc_id, "low");
        assert_eq!(out[0].score, 2.0);
    }

    #[test]
    fn rerank_is_stable_on_ties_and_preserves_set() {
        let mut vectors = DocVectorStore::new();
        for id in ["x", "y", "z"] {
            vectors
                .insert(id.into(), sparsify(&sv(&[1.0]), 1).unwrap())
                .unwrap();
        }
        let candidates: Vec<ScoredDoc> = ["z", "x", "y"]
            .iter()
            .map(|id| ScoredDoc { doc_id: (*id).into(), score: 0.0 })
            .collect();
        let out = rerank(&candidates, &qf(&[(0, 1.0)]), &vectors).unwrap();
        let order: Vec<&str> = out.iter().map(|d| d.doc_id.as_str()).collect();
        assert_eq!(order, vec!["z", "x", "y"]);
    }

    #[test]
    fn rerank_missing_vector_names_doc() {
        let vectors = DocVectorStore::new();
        let candidates = vec![ScoredDoc { doc_id: "ghost".into(), score: 1.0 }];
        let err = rerank(&candidates, &qf(&[(0, 1.0)]), &vectors).unwrap_err();
        assert!(err.to_string().contains("ghost"));
    }

    #[test]
    fn rerank_empty_is_empty() {
        let vectors = DocVectorStore::new();
        assert!(rerank(&[], &qf(&[]), &vectors).unwrap().is_empty());
    }

    #[test]
    fn exhaustive_matches_dense_brute_force() {
        let v = vocab(&["a", "b", "c", "d"]);
        let dense = [
            sv(&[0.0, 1.0, 0.0, 2.0, 0.0]),
            sv(&[0.5, 0.0, 0.0, 1.0, 0.0]),
            sv(&[0.0, 0.0, 3.0, 0.0, 0.0]),
        ];
        let docs: Vec<Document> = (0..3).map(|i| doc(&format!("d{i}"), "")).collect();
        let index = build_index(
            docs.iter().cloned().map(Ok),
            |d: &Document| {
                let i: usize = d.doc_id[1..].parse().unwrap();
                Ok(dense[i].clone())
            },
            None,
            &v,
            "t",
        )
        .unwrap();
        let q = qf(&[(1, 1.0), (3, 2.0)]);
        let ranked = retrieve_exhaustive(&q, &index, 10);
        // Doc 2 has no matching posting and is absent.
        assert_eq!(ranked.len(), 2);
        for sd in &ranked {
            let i: usize = sd.doc_id[1..].parse().unwrap();
            assert_eq!(sd.score, score_pair(&q, &dense[i]));
        }
        assert_eq!(ranked[0].doc_id, "d0"); // 1 + 4 = 5 > 0 + 2 = 2
        let top1 = retrieve_exhaustive(&q, &index, 1);
        assert_eq!(top1.len(), 1);
        assert_eq!(top1[0].doc_id, "d0");
    }

    #[test]
    fn exhaustive_ties_break_by_ordinal() {
        let v = vocab(&["a"]);
        let docs: Vec<Document> = (0..3).map(|i| doc(&format!("d{i}"), "")).collect();
        let index = build_index(
            docs.into_iter().map(Ok),
            |_| Ok(sv(&[0.0, 1.0])),
            None,
            &v,
            "t",
        )
        .unwrap();
        let ranked = retrieve_exhaustive(&qf(&[(1, 1.0)]), &index, 10);
        let order: Vec<&str> = ranked.iter().map(|d| d.doc_id.as_str()).collect();
        assert_eq!(order, vec!["d0", "d1", "d2"]);
    }

    #[test]
    fn flops_is_query_len_times_docs() {
        assert_eq!(estimate_flops(16, 1), 16);
        assert_eq!(estimate_flops(16, 100), 1600);
        assert_eq!(estimate_flops(0, 1_000_000), 0);
    }

    #[test]
    fn run_entries_number_ranks_from_one() {
        let ranked = vec![
            ScoredDoc { doc_id: "a".into(), score: 2.0 },
            ScoredDoc { doc_id: "b".into(), score: 1.0 },
        ];
        let entries = to_run_entries("q1", &ranked, "tag");
        assert_eq!(entries[0].rank, 1);
        assert_eq!(entries[1].rank, 2);
        assert_eq!(entries[1].doc_id, "b");
        assert_eq!(entries[0].tag, "tag");
    }
}
