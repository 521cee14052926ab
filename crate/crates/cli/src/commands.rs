//! Command bodies. Each one loads its inputs, delegates to nail-core, and
//! writes artifacts; stdout carries human-readable summaries only, so two
//! runs with the same flags and seed produce byte-identical files.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use nail_core::corpus::{
    load_corpus, load_corpus_vec, load_qrels, load_queries, load_run, write_run, Document,
};
use nail_core::eval::{sparsification_sweep, sweep_to_csv, Metric};
use nail_core::index::{
    build_index_reported, load_index_for, save_index, sparsify, DocVectorStore, ScoreVector,
};
use nail_core::model::{
    encode_document, load_model, load_triples, save_model, trace_to_csv, train, CheckpointMeta,
    ModelParams, Stage, TrainConfig, TrainData,
};
use nail_core::scoring::{
    bm25_term_score, estimate_flops, rerank, retrieve_bm25, retrieve_exhaustive, to_run_entries,
    Bm25Index, Bm25Params, Bm25Stats, ScoredDoc,
};
use nail_core::vocab::{featurize_query, load_vocabulary, tokenize, Vocabulary, UNK_ID};
use nail_core::{Error, Result};

use crate::args::{
    pick, BuildIndexArgs, EvaluateArgs, FileDefaults, FlopsArgs, RerankArgs, RetrieveArgs, Scorer,
    SweepArgs, TopTermsArgs, TrainArgs,
};

const DEFAULT_TOP_N: usize = 100;
const DEFAULT_TOP_TERMS: usize = 20;

/// Document scorer shared by `build-index` and `sweep`. Holding the
/// resolved state (statistics, checkpoint, vector table) keeps the scoring
/// closure `Sync` for the parallel build.
enum VectorScorer {
    Bm25(Bm25Stats),
    Model(ModelParams),
    File(DocVectorStore),
}

impl VectorScorer {
    fn resolve(
        choice: Scorer,
        docs: &[Document],
        model: Option<&Path>,
        vectors_file: Option<&Path>,
        params: Bm25Params,
        vocab: &Vocabulary,
    ) -> Result<VectorScorer> {
        match choice {
            Scorer::Bm25 => {
                let index = Bm25Index::build(docs.iter().cloned().map(Ok), vocab, params)?;
                Ok(VectorScorer::Bm25(index.stats().clone()))
            }
            Scorer::Model => {
                let path = model.ok_or_else(|| {
                    Error::InvalidArgument("--scorer model requires --model".into())
                })?;
                let (params, _) = load_model(path)?;
                if params.hyper.vocab_size != vocab.size() {
                    return Err(Error::Incompatible(format!(
                        "checkpoint covers {} terms but the vocabulary has {}",
                        params.hyper.vocab_size,
                        vocab.size()
                    )));
                }
                Ok(VectorScorer::Model(params))
            }
            Scorer::VectorsFile => {
                let path = vectors_file.ok_or_else(|| {
                    Error::InvalidArgument("--scorer vectors-file requires --vectors-file".into())
                })?;
                Ok(VectorScorer::File(DocVectorStore::load_ndjson(path)?))
            }
        }
    }

    fn score(&self, doc: &Document, vocab: &Vocabulary) -> Result<ScoreVector> {
        match self {
            VectorScorer::Bm25(stats) => {
                let seq = tokenize(&doc.text, vocab);
                let dl = seq.len() as u32;
                let mut counts: HashMap<u32, u32> = HashMap::new();
                for &t in &seq.ids {
                    if t != UNK_ID {
                        *counts.entry(t.0).or_insert(0) += 1;
                    }
                }
                let mut values = vec![0.0f32; vocab.size()];
                for (t, tf) in counts {
                    let s = bm25_term_score(tf, stats.df.get(&t).copied().unwrap_or(0), dl, stats);
                    values[t as usize] = s as f32;
                }
                ScoreVector::new(values)
            }
            VectorScorer::Model(params) => {
                let seq = tokenize(&doc.text, vocab);
                Ok(encode_document(&seq, params))
            }
            VectorScorer::File(store) => store
                .get(&doc.doc_id)
                .ok_or_else(|| {
                    Error::Incompatible(format!(
                        "document '{}' has no vector in the vectors file",
                        doc.doc_id
                    ))
                })?
                .to_dense(vocab.size()),
        }
    }
}

fn bm25_params(k1: Option<f64>, b: Option<f64>, file: &FileDefaults) -> Bm25Params {
    let dflt = Bm25Params::default();
    Bm25Params {
        k1: pick(k1, file.k1, dflt.k1),
        b: pick(b, file.b, dflt.b),
    }
}

pub fn build_index(args: BuildIndexArgs, file: &FileDefaults) -> Result<()> {
    let vocab = load_vocabulary(&args.vocab)?;
    let docs = load_corpus_vec(&args.corpus)?;
    let scorer = VectorScorer::resolve(
        args.scorer,
        &docs,
        args.model.as_deref(),
        args.vectors_file.as_deref(),
        bm25_params(args.k1, args.b, file),
        &vocab,
    )?;
    let tag = match args.scorer {
        Scorer::Bm25 => "bm25-vectors",
        Scorer::Model => "model",
        Scorer::VectorsFile => "vectors-file",
    };
    let (index, report) = build_index_reported(
        &docs,
        |d| scorer.score(d, &vocab),
        args.sparsify_k.or(file.sparsify_k),
        &vocab,
        tag,
        args.threads.or(file.threads),
    )?;
    save_index(&index, &args.output)?;
    println!(
        "indexed {} documents ({} postings) in {:.2?} -> {}",
        report.num_docs,
        report.nnz,
        report.elapsed,
        args.output.display()
    );
    Ok(())
}

pub fn retrieve(args: RetrieveArgs, file: &FileDefaults) -> Result<()> {
    let vocab = load_vocabulary(&args.vocab)?;
    let queries = load_queries(&args.queries)?;
    let top_n = pick(args.top_n, file.top_n, DEFAULT_TOP_N);
    let mut entries = Vec::new();
    let tag = match args.mode {
        crate::args::RetrieveMode::Bm25 => {
            let corpus = args.corpus.as_ref().ok_or_else(|| {
                Error::InvalidArgument("--mode bm25 requires --corpus".into())
            })?;
            let index = Bm25Index::build(
                load_corpus(corpus)?,
                &vocab,
                bm25_params(args.k1, args.b, file),
            )?;
            for q in &queries {
                let qf = featurize_query(&q.text, &vocab);
                let ranked = retrieve_bm25(&qf, &index, top_n);
                entries.extend(to_run_entries(&q.query_id, &ranked, "bm25"));
            }
            "bm25"
        }
        crate::args::RetrieveMode::NailExh => {
            let path = args.index.as_ref().ok_or_else(|| {
                Error::InvalidArgument("--mode nail-exh requires --index".into())
            })?;
            let index = load_index_for(path, &vocab)?;
            for q in &queries {
                let qf = featurize_query(&q.text, &vocab);
                let ranked = retrieve_exhaustive(&qf, &index, top_n);
                entries.extend(to_run_entries(&q.query_id, &ranked, "nail-exh"));
            }
            "nail-exh"
        }
    };
    write_run(&entries, &args.output, tag)?;
    println!(
        "wrote {} results for {} queries -> {}",
        entries.len(),
        queries.len(),
        args.output.display()
    );
    Ok(())
}

pub fn rerank_run(args: RerankArgs, file: &FileDefaults) -> Result<()> {
    let vocab = load_vocabulary(&args.vocab)?;
    let vectors = match (&args.index, &args.vectors_file) {
        (Some(index), None) => DocVectorStore::from_index(&load_index_for(index, &vocab)?),
        (None, Some(path)) => DocVectorStore::load_ndjson(path)?,
        _ => {
            return Err(Error::InvalidArgument(
                "rerank needs exactly one vector source: --index or --vectors-file".into(),
            ))
        }
    };
    let query_text: HashMap<String, String> = load_queries(&args.queries)?
        .into_iter()
        .map(|q| (q.query_id, q.text))
        .collect();
    let top_n = pick(args.top_n, file.top_n, DEFAULT_TOP_N);

    // Group candidates per query, keeping first-appearance query order so
    // the output is deterministic in the input run's order.
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<(u32, ScoredDoc)>> = HashMap::new();
    for e in load_run(&args.run)? {
        let slot = groups.entry(e.query_id.clone()).or_default();
        if slot.is_empty() {
            order.push(e.query_id.clone());
        }
        slot.push((
            e.rank,
            ScoredDoc {
                doc_id: e.doc_id,
                score: e.score,
            },
        ));
    }

    let mut entries = Vec::new();
    for qid in &order {
        let text = query_text.get(qid).ok_or_else(|| {
            Error::Incompatible(format!("run file query '{qid}' is not in the queries file"))
        })?;
        let qf = featurize_query(text, &vocab);
        let mut candidates = groups.remove(qid).expect("grouped above");
        candidates.sort_by_key(|&(rank, _)| rank);
        candidates.truncate(top_n);
        let candidates: Vec<ScoredDoc> = candidates.into_iter().map(|(_, d)| d).collect();
        let rescored = rerank(&candidates, &qf, &vectors)?;
        entries.extend(to_run_entries(qid, &rescored, "nail-rerank"));
    }
    write_run(&entries, &args.output, "nail-rerank")?;
    println!(
        "reranked {} queries -> {}",
        order.len(),
        args.output.display()
    );
    Ok(())
}

pub fn train_model(args: TrainArgs, file: &FileDefaults, seed: u64) -> Result<()> {
    let stage: Stage = args.stage.parse()?;
    let vocab = load_vocabulary(&args.vocab)?;
    let dflt = TrainConfig::default();
    let config = TrainConfig {
        stage,
        steps: pick(args.steps, file.steps, dflt.steps),
        lr: pick(args.lr, file.lr, dflt.lr),
        hidden_dim: pick(args.hidden, file.hidden, dflt.hidden_dim),
        positions: pick(args.positions, file.positions, dflt.positions),
        negatives_per_example: pick(args.negatives, file.negatives, dflt.negatives_per_example),
        total_passages: pick(args.total_passages, file.total_passages, dflt.total_passages),
        seed,
        eval_every: pick(args.eval_every, file.eval_every, dflt.eval_every),
        holdout_fraction: pick(args.holdout_fraction, file.holdout_fraction, dflt.holdout_fraction),
    };

    let corpus;
    let triples;
    let data = match (stage, &args.corpus, &args.triples) {
        (Stage::Pretrain, Some(path), None) => {
            corpus = load_corpus_vec(path)?;
            TrainData::Corpus(&corpus)
        }
        (Stage::Finetune, None, Some(path)) => {
            triples = load_triples(path)?;
            TrainData::Triples(&triples)
        }
        (Stage::Pretrain, _, _) => {
            return Err(Error::InvalidArgument(
                "--stage pretrain takes --corpus (and no --triples)".into(),
            ))
        }
        (Stage::Finetune, _, _) => {
            return Err(Error::InvalidArgument(
                "--stage finetune takes --triples (and no --corpus)".into(),
            ))
        }
    };

    let outcome = train(&config, data, &vocab)?;
    let meta = CheckpointMeta {
        seed,
        stage: stage.as_str().to_string(),
    };
    save_model(&outcome.params, &meta, &args.output)?;
    let loss_csv = args
        .loss_csv
        .unwrap_or_else(|| PathBuf::from(format!("{}.loss.csv", args.output.display())));
    std::fs::write(&loss_csv, trace_to_csv(&outcome.trace))
        .map_err(|e| Error::io(&loss_csv, e))?;

    match outcome.best_holdout_loss {
        Some(loss) => println!(
            "trained {} steps; kept step {} (held-out loss {loss:.4}) -> {}",
            config.steps,
            outcome.best_step,
            args.output.display()
        ),
        None => println!(
            "trained {} steps (no holdout) -> {}",
            config.steps,
            args.output.display()
        ),
    }
    Ok(())
}

fn parse_metrics(list: &str) -> Result<Vec<Metric>> {
    let metrics: Vec<Metric> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if metrics.is_empty() {
        return Err(Error::InvalidArgument("--metrics lists no metrics".into()));
    }
    Ok(metrics)
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let run = load_run(&args.run)?;
    let qrels = load_qrels(&args.qrels)?;
    let metrics = parse_metrics(&args.metrics)?;
    let report = nail_core::eval::evaluate_run(&run, &qrels, &metrics);
    print!("{}", report.to_csv());
    if let Some(path) = &args.output {
        report.write_csv(path)?;
    }
    Ok(())
}

pub fn sweep(args: SweepArgs, file: &FileDefaults) -> Result<()> {
    let vocab = load_vocabulary(&args.vocab)?;
    let docs = load_corpus_vec(&args.corpus)?;
    let scorer = VectorScorer::resolve(
        args.scorer,
        &docs,
        args.model.as_deref(),
        args.vectors_file.as_deref(),
        bm25_params(args.k1, args.b, file),
        &vocab,
    )?;
    let vectors: Vec<(String, ScoreVector)> = docs
        .iter()
        .map(|d| Ok((d.doc_id.clone(), scorer.score(d, &vocab)?)))
        .collect::<Result<_>>()?;
    let queries: Vec<(String, nail_core::vocab::QueryFeature)> = load_queries(&args.queries)?
        .into_iter()
        .map(|q| {
            let qf = featurize_query(&q.text, &vocab);
            (q.query_id, qf)
        })
        .collect();
    let qrels = load_qrels(&args.qrels)?;
    let ks: Vec<usize> = args
        .ks
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::InvalidArgument(format!("bad sweep budget '{s}'")))
        })
        .collect::<Result<_>>()?;
    let results = sparsification_sweep(&vectors, &qrels, &queries, &ks, &vocab)?;
    let csv = sweep_to_csv(&results);
    print!("{csv}");
    if let Some(path) = &args.output {
        std::fs::write(path, csv).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn flops(args: FlopsArgs) -> Result<()> {
    let n = estimate_flops(args.query_len, args.num_docs);
    // Smallest power of ten at or above n, matching how scoring costs are
    // usually quoted.
    let mut order = 0u32;
    let mut bound = 1u128;
    while bound < u128::from(n) {
        bound *= 10;
        order += 1;
    }
    println!(
        "{n} multiply-accumulates (~10^{order}) to score {} candidates with a {}-token query",
        args.num_docs, args.query_len
    );
    Ok(())
}

pub fn top_terms(args: TopTermsArgs, file: &FileDefaults) -> Result<()> {
    let vocab = load_vocabulary(&args.vocab)?;
    let (params, _) = load_model(&args.model)?;
    if params.hyper.vocab_size != vocab.size() {
        return Err(Error::Incompatible(format!(
            "checkpoint covers {} terms but the vocabulary has {}",
            params.hyper.vocab_size,
            vocab.size()
        )));
    }
    let k = pick(args.terms, file.terms, DEFAULT_TOP_TERMS);
    let mut found = args.doc_id.is_none();
    for doc in load_corpus(&args.corpus)? {
        let doc = doc?;
        if let Some(want) = &args.doc_id {
            if want != &doc.doc_id {
                continue;
            }
            found = true;
        }
        let sv = encode_document(&tokenize(&doc.text, &vocab), &params);
        let mut top = sparsify(&sv, k)?.entries().to_vec();
        top.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let rendered: Vec<String> = top
            .iter()
            .map(|&(t, s)| format!("{}:{s:.4}", vocab.token(t)))
            .collect();
        println!("{}: {}", doc.doc_id, rendered.join(" "));
    }
    if !found {
        return Err(Error::InvalidArgument(format!(
            "document '{}' is not in the corpus",
            args.doc_id.unwrap_or_default()
        )));
    }
    Ok(())
}
