//! Ranking metrics and evaluation protocols.
//!
//! Metrics use graded judgments: nDCG with exponential gain (2^rel − 1),
//! recall over grade>0 documents, and MRR. Queries judged but missing from
//! a run score 0; queries with no relevant documents also score 0 rather
//! than being excluded.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::corpus::{Qrels, RunEntry};
use crate::error::{Error, Result};
use crate::index::{build_index, ScoreVector};
use crate::scoring::{retrieve_exhaustive, score_pair};
use crate::vocab::{QueryFeature, Vocabulary};

/// A metric family at a cutoff, e.g. `ndcg@10`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Ndcg(usize),
    Recall(usize),
    Mrr(usize),
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Ndcg(k) => write!(f, "ndcg@{k}"),
            Metric::Recall(k) => write!(f, "recall@{k}"),
            Metric::Mrr(k) => write!(f, "mrr@{k}"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, k) = s
            .split_once('@')
            .ok_or_else(|| Error::InvalidArgument(format!("metric '{s}': expected name@k")))?;
        let k: usize = k
            .parse()
            .ok()
            .filter(|&k| k >= 1)
            .ok_or_else(|| Error::InvalidArgument(format!("metric '{s}': k must be >= 1")))?;
        match name {
            "ndcg" => Ok(Metric::Ndcg(k)),
            "recall" => Ok(Metric::Recall(k)),
            "mrr" => Ok(Metric::Mrr(k)),
            other => Err(Error::InvalidArgument(format!("unknown metric '{other}'"))),
        }
    }
}

fn gain(grade: u32) -> f64 {
    2f64.powi(grade as i32) - 1.0
}

fn discount(position: usize) -> f64 {
    // position is 0-based; discount is log2(rank + 1).
    ((position + 2) as f64).log2()
}

/// nDCG@k with exponential gain. The ideal DCG sorts ALL judged grades for
/// the query descending (truncated at k); returns 0 when no judged document
/// has a positive grade.
pub fn ndcg_at_k(ranked: &[String], judged: &HashMap<String, u32>, k: usize) -> f64 {
    let mut dcg = 0.0;
    for (i, doc_id) in ranked.iter().take(k).enumerate() {
        let grade = judged.get(doc_id).copied().unwrap_or(0);
        if grade > 0 {
            dcg += gain(grade) / discount(i);
        }
    }
    let mut grades: Vec<u32> = judged.values().copied().filter(|&g| g > 0).collect();
    grades.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = grades
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain(g) / discount(i))
        .sum();
    if idcg > 0.0 {
        dcg / idcg
    } else {
        0.0
    }
}

/// Fraction of judged-relevant (grade > 0) documents present in the top k;
/// 0 when nothing is relevant.
pub fn recall_at_k(ranked: &[String], judged: &HashMap<String, u32>, k: usize) -> f64 {
    let relevant = judged.values().filter(|&&g| g > 0).count();
    if relevant == 0 {
        return 0.0;
    }
    let hits = ranked
        .iter()
        .take(k)
        .filter(|d| judged.get(*d).copied().unwrap_or(0) > 0)
        .count();
    hits as f64 / relevant as f64
}

/// Reciprocal rank of the first relevant document within the top k, else 0.
pub fn mrr_at_k(ranked: &[String], judged: &HashMap<String, u32>, k: usize) -> f64 {
    for (i, doc_id) in ranked.iter().take(k).enumerate() {
        if judged.get(doc_id).copied().unwrap_or(0) > 0 {
            return 1.0 / (i + 1) as f64;
        }
    }
    0.0
}

fn compute(metric: Metric, ranked: &[String], judged: &HashMap<String, u32>) -> f64 {
    match metric {
        Metric::Ndcg(k) => ndcg_at_k(ranked, judged, k),
        Metric::Recall(k) => recall_at_k(ranked, judged, k),
        Metric::Mrr(k) => mrr_at_k(ranked, judged, k),
    }
}

/// Per-query and mean metric values for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// query_id → metric → value, queries in sorted order.
    pub per_query: BTreeMap<String, BTreeMap<Metric, f64>>,
    /// Arithmetic mean over judged queries.
    pub aggregate: BTreeMap<Metric, f64>,
    pub num_queries: usize,
}

impl MetricReport {
    /// CSV rows `query_id,metric,value` followed by `all,...` aggregate
    /// rows. Values use enough digits to round-trip f64.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("query_id,metric,value\n");
        for (qid, metrics) in &self.per_query {
            for (metric, value) in metrics {
                out.push_str(&format!("{qid},{metric},{value}\n"));
            }
        }
        for (metric, value) in &self.aggregate {
            out.push_str(&format!("all,{metric},{value}\n"));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Scores a run against judgments. Every judged query contributes (0 when
/// absent from the run); run entries for unjudged queries are ignored with
/// a warning.
pub fn evaluate_run(run: &[RunEntry], qrels: &Qrels, metrics: &[Metric]) -> MetricReport {
    let mut by_query: HashMap<&str, Vec<(u32, &str)>> = HashMap::new();
    for e in run {
        if !qrels.contains_query(&e.query_id) {
            log::warn!(
                "run entry for query '{}' has no judgments; ignored",
                e.query_id
            );
            continue;
        }
        by_query
            .entry(&e.query_id)
            .or_default()
            .push((e.rank, &e.doc_id));
    }
    let empty: Vec<(u32, &str)> = Vec::new();
    let mut per_query = BTreeMap::new();
    let mut sums: BTreeMap<Metric, f64> = metrics.iter().map(|&m| (m, 0.0)).collect();
    for qid in qrels.query_ids() {
        let judged = qrels.for_query(qid).expect("qid comes from qrels");
        let mut entries: Vec<(u32, &str)> =
            by_query.get(qid).unwrap_or(&empty).clone();
        entries.sort_by_key(|&(rank, _)| rank);
        let ranked: Vec<String> = entries.iter().map(|&(_, d)| d.to_string()).collect();
        let mut row = BTreeMap::new();
        for &metric in metrics {
            let value = compute(metric, &ranked, judged);
            row.insert(metric, value);
            *sums.get_mut(&metric).unwrap() += value;
        }
        per_query.insert(qid.to_string(), row);
    }
    let n = qrels.num_queries();
    let aggregate = sums
        .into_iter()
        .map(|(m, s)| (m, if n > 0 { s / n as f64 } else { 0.0 }))
        .collect();
    MetricReport {
        per_query,
        aggregate,
        num_queries: n,
    }
}

/// Mean recall@100 as a function of the sparsification budget k.
///
/// For each k the document vectors are truncated to their top-k tokens, an
/// index is built, and all queries are run exhaustively. `k_values` must be
/// positive and ascending; the dense reference k = V is appended when not
/// already present.
pub fn sparsification_sweep(
    vectors: &[(String, ScoreVector)],
    qrels: &Qrels,
    queries: &[(String, QueryFeature)],
    k_values: &[usize],
    vocab: &Vocabulary,
) -> Result<Vec<(usize, f64)>> {
    if k_values.windows(2).any(|w| w[0] >= w[1]) || k_values.first() == Some(&0) {
        return Err(Error::InvalidArgument(
            "sweep k values must be positive and strictly ascending".into(),
        ));
    }
    let mut ks: Vec<usize> = k_values
        .iter()
        .copied()
        .filter(|&k| k < vocab.size())
        .collect();
    ks.push(vocab.size());
    let mut results = Vec::with_capacity(ks.len());
    for &k in &ks {
        let index = build_index(
            vectors.iter().map(|(id, _)| {
                Ok(crate::corpus::Document {
                    doc_id: id.clone(),
                    text: String::new(),
                })
            }),
            |d: &crate::corpus::Document| {
                let (_, sv) = vectors
                    .iter()
                    .find(|(id, _)| id == &d.doc_id)
                    .expect("scorer called only on listed docs");
                Ok(sv.clone())
            },
            Some(k),
            vocab,
            "sweep",
        )?;
        let mut sum = 0.0;
        for (qid, qf) in queries {
            let ranked = retrieve_exhaustive(qf, &index, 100);
            let ids: Vec<String> = ranked.into_iter().map(|d| d.doc_id).collect();
            let value = match qrels.for_query(qid) {
                Some(judged) => recall_at_k(&ids, judged, 100),
                None => 0.0,
            };
            sum += value;
        }
        let mean = if queries.is_empty() {
            0.0
        } else {
            sum / queries.len() as f64
        };
        results.push((k, mean));
    }
    Ok(results)
}

/// CSV for sweep results: `k,recall_at_100` rows.
pub fn sweep_to_csv(results: &[(usize, f64)]) -> String {
    let mut out = String::from("k,recall_at_100\n");
    for (k, recall) in results {
        out.push_str(&format!("{k},{recall}\n"));
    }
    out
}

/// Brute-force dense retrieval used as the sweep's reference and by tests:
/// scores every document with [`score_pair`], ranks score-descending with
/// ties by position in `vectors`.
pub fn dense_rank_all(
    vectors: &[(String, ScoreVector)],
    qf: &QueryFeature,
    top_n: usize,
) -> Vec<(String, f64)> {
    let mut scored: Vec<(usize, f64)> = vectors
        .iter()
        .enumerate()
        .map(|(i, (_, sv))| (i, score_pair(qf, sv)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(top_n);
    scored
        .into_iter()
        .map(|(i, s)| (vectors[i].0.clone(), s))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn judged(pairs: &[(&str, u32)]) -> HashMap<String, u32> {
        pairs.iter().map(|&(d, g)| (d.to_string(), g)).collect()
    }

    fn ranked(ids: &[&str]) -> Vec<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn ndcg_perfect_single_relevant_is_one() {
        let j = judged(&[("d1", 1)]);
        assert_eq!(ndcg_at_k(&ranked(&["d1", "d2"]), &j, 10), 1.0);
    }

    #[test]
    fn ndcg_relevant_at_rank_two() {
        let j = judged(&[("d1", 1)]);
        let got = ndcg_at_k(&ranked(&["d2", "d1"]), &j, 10);
        let want = 1.0 / 3f64.log2();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.6309).abs() < 5e-5);
    }

    #[test]
    fn ndcg_no_relevant_is_zero() {
        let j = judged(&[("d1", 0)]);
        assert_eq!(ndcg_at_k(&ranked(&["d1", "d2"]), &j, 10), 0.0);
        assert_eq!(ndcg_at_k(&ranked(&["d1"]), &HashMap::new(), 10), 0.0);
    }

    #[test]
    fn ndcg_uses_graded_gains_and_full_ideal() {
        // Judged: d1 grade 2, d2 grade 1. Ranking [d2, d1] at k=2:
        // DCG = 1/1 + 3/log2(3); IDCG = 3/1 + 1/log2(3).
        let j = judged(&[("d1", 2), ("d2", 1)]);
        let got = ndcg_at_k(&ranked(&["d2", "d1"]), &j, 2);
        let want = (1.0 + 3.0 / 3f64.log2()) / (3.0 + 1.0 / 3f64.log2());
        assert!((got - want).abs() < 1e-12);
        // Ideal ranking scores 1 even when k covers only part of the list.
        assert_eq!(ndcg_at_k(&ranked(&["d1", "d2"]), &j, 1), 1.0);
    }

    #[test]
    fn recall_counts_relevant_fraction() {
        let j = judged(&[("d1", 1), ("d2", 2), ("d3", 0)]);
        assert_eq!(recall_at_k(&ranked(&["d1", "d2"]), &j, 10), 1.0);
        assert_eq!(recall_at_k(&ranked(&["d1", "d3"]), &j, 10), 0.5);
        assert_eq!(recall_at_k(&ranked(&["d1", "d2"]), &j, 1), 0.5);
        assert_eq!(recall_at_k(&ranked(&["d3"]), &judged(&[]), 10), 0.0);
    }

    #[test]
    fn mrr_takes_first_relevant_within_k() {
        let j = judged(&[("d4", 1)]);
        assert_eq!(mrr_at_k(&ranked(&["d4", "d1"]), &j, 10), 1.0);
        assert_eq!(mrr_at_k(&ranked(&["d1", "d2", "d3", "d4"]), &j, 10), 0.25);
        assert_eq!(mrr_at_k(&ranked(&["d1", "d2", "d3", "d4"]), &j, 3), 0.0);
    }

    #[test]
    fn metric_parsing_round_trips() {
        for s in ["ndcg@10", "recall@100", "mrr@10"] {
            let m: Metric = s.parse().unwrap();
            assert_eq!(m.to_string(), s);
        }
        assert!("ndcg".parse::<Metric>().is_err());
        assert!("ndcg@0".parse::<Metric>().is_err());
        assert!("precision@5".parse::<Metric>().is_err());
    }

    fn entry(qid: &str, did: &str, rank: u32) -> RunEntry {
        RunEntry {
            query_id: qid.into(),
            doc_id: did.into(),
            rank,
            score: 1.0 / rank as f64,
            tag: "t".into(),
        }
    }

    #[test]
    fn evaluate_run_averages_judged_queries() {
        let mut qrels = Qrels::new();
        qrels.insert("q1", "d1", 1);
        qrels.insert("q2", "d2", 1);
        let run = vec![entry("q1", "d1", 1), entry("q2", "d9", 1)];
        let report = evaluate_run(&run, &qrels, &[Metric::Mrr(10)]);
        assert_eq!(report.num_queries, 2);
        assert_eq!(report.per_query["q1"][&Metric::Mrr(10)], 1.0);
        assert_eq!(report.per_query["q2"][&Metric::Mrr(10)], 0.0);
        assert_eq!(report.aggregate[&Metric::Mrr(10)], 0.5);
    }

    #[test]
    fn evaluate_run_scores_missing_queries_zero_and_ignores_unjudged() {
        let mut qrels = Qrels::new();
        qrels.insert("q1", "d1", 1);
        qrels.insert("q2", "d1", 1);
        // q2 absent from run; q9 not judged.
        let run = vec![entry("q1", "d1", 1), entry("q9", "d1", 1)];
        let report = evaluate_run(&run, &qrels, &[Metric::Recall(10)]);
        assert_eq!(report.per_query.len(), 2);
        assert_eq!(report.per_query["q2"][&Metric::Recall(10)], 0.0);
        assert!(!report.per_query.contains_key("q9"));
        assert_eq!(report.aggregate[&Metric::Recall(10)], 0.5);
    }

    #[test]
    fn aggregate_is_mean_of_per_query_rows() {
        let mut qrels = Qrels::new();
        qrels.insert("q1", "d1", 1);
        qrels.insert("q2", "d2", 2);
        qrels.insert("q3", "d3", 1);
        let run = vec![
            entry("q1", "d1", 1),
            entry("q2", "d0", 1),
            entry("q2", "d2", 2),
            entry("q3", "d3", 1),
        ];
        let metrics = [Metric::Ndcg(10), Metric::Mrr(10), Metric::Recall(5)];
        let report = evaluate_run(&run, &qrels, &metrics);
        for &m in &metrics {
            let mean: f64 = report.per_query.values().map(|row| row[&m]).sum::<f64>()
                / report.per_query.len() as f64;
            assert_eq!(report.aggregate[&m], mean);
        }
    }

    #[test]
    fn single_query_aggregate_equals_per_query() {
        let mut qrels = Qrels::new();
        qrels.insert("q1", "d2", 1);
        let run = vec![entry("q1", "d1", 1), entry("q1", "d2", 2)];
        let report = evaluate_run(&run, &qrels, &[Metric::Ndcg(10)]);
        assert_eq!(
            report.aggregate[&Metric::Ndcg(10)],
            report.per_query["q1"][&Metric::Ndcg(10)]
        );
    }

    #[test]
    fn empty_run_scores_zero_everywhere() {
        let mut qrels = Qrels::new();
        qrels.insert("q1", "d1", 1);
        let report = evaluate_run(&[], &qrels, &[Metric::Ndcg(10), Metric::Recall(10)]);
        assert_eq!(report.aggregate[&Metric::Ndcg(10)], 0.0);
        assert_eq!(report.aggregate[&Metric::Recall(10)], 0.0);
    }

    #[test]
    fn csv_has_per_query_then_aggregate_rows() {
        let mut qrels = Qrels::new();
        qrels.insert("q1", "d1", 1);
        let run = vec![entry("q1", "d1", 1)];
        let report = evaluate_run(&run, &qrels, &[Metric::Mrr(10)]);
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "query_id,metric,value");
        assert_eq!(lines[1], "q1,mrr@10,1");
        assert_eq!(lines[2], "all,mrr@10,1");
    }

    #[test]
    fn sweep_rejects_unsorted_k() {
        let vocab = Vocabulary::from_tokens(vec!["<unk>".into(), "a".into()]).unwrap();
        let err = sparsification_sweep(&[], &Qrels::new(), &[], &[3, 2], &vocab).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }
}
