//! Training-pair construction: span pseudo-tasks for pre-training,
//! score-weighted hard-negative sampling, and batch assembly.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::vocab::{tokenize, TokenId, Vocabulary, UNK_ID};

use super::train::{TrainingBatch, TrainingExample};

/// Inverse cloze: a random contiguous span becomes the pseudo-query and
/// the remainder (prefix + suffix) the pseudo-passage. Returns `None` for
/// documents shorter than two tokens, which carry no usable split.
pub fn make_inverse_cloze<R: Rng>(
    tokens: &[TokenId],
    rng: &mut R,
) -> Option<(Vec<TokenId>, Vec<TokenId>)> {
    let len = tokens.len();
    if len < 2 {
        return None;
    }
    let span_len = rng.gen_range(1..=len / 2);
    let start = rng.gen_range(0..=len - span_len);
    let query = tokens[start..start + span_len].to_vec();
    let mut passage = tokens[..start].to_vec();
    passage.extend_from_slice(&tokens[start + span_len..]);
    Some((query, passage))
}

/// Independent cropping: two spans drawn independently (possibly
/// overlapping), the first as pseudo-query, the second as pseudo-passage.
/// An empty document yields an empty pair.
pub fn make_independent_crop<R: Rng>(
    tokens: &[TokenId],
    rng: &mut R,
) -> (Vec<TokenId>, Vec<TokenId>) {
    let len = tokens.len();
    if len == 0 {
        return (Vec::new(), Vec::new());
    }
    let span = |rng: &mut R| {
        let span_len = rng.gen_range(1..=len);
        let start = rng.gen_range(0..=len - span_len);
        tokens[start..start + span_len].to_vec()
    };
    let query = span(rng);
    let passage = span(rng);
    (query, passage)
}

/// Draws `count` candidates without replacement, each pick proportional to
/// `exp(score / temperature)` over the remaining pool.
pub fn sample_hard_negatives<R: Rng>(
    candidates: &[(Document, f64)],
    count: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<Document>> {
    if count > candidates.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {count} negatives from a pool of {}",
            candidates.len()
        )));
    }
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature must be finite and positive, got {temperature}"
        )));
    }
    // Shift by the max before exponentiating so weights never overflow.
    let max_score = candidates
        .iter()
        .map(|&(_, s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut alive: Vec<usize> = (0..candidates.len()).collect();
    let mut weights: Vec<f64> = candidates
        .iter()
        .map(|&(_, s)| ((s - max_score) / temperature).exp())
        .collect();
    let mut picked = Vec::with_capacity(count);
    for _ in 0..count {
        let total: f64 = alive.iter().map(|&i| weights[i]).sum();
        let mut u = rng.gen::<f64>() * total;
        let mut pick = alive.len() - 1;
        for (slot, &i) in alive.iter().enumerate() {
            u -= weights[i];
            if u <= 0.0 {
                pick = slot;
                break;
            }
        }
        let idx = alive.swap_remove(pick);
        weights[idx] = 0.0;
        picked.push(candidates[idx].0.clone());
    }
    Ok(picked)
}

/// A fine-tuning example on disk: a query, its positive passage, and a
/// scored pool of candidate negatives to sample from at batch time.
#[derive(Debug, Clone)]
pub struct Triple {
    pub query: String,
    pub positive: Document,
    pub negative_pool: Vec<(Document, f64)>,
}

#[derive(Serialize, Deserialize)]
struct DocRecord {
    id: String,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct NegRecord {
    id: String,
    text: String,
    score: f64,
}

#[derive(Serialize, Deserialize)]
struct TripleRecord {
    query: String,
    positive: DocRecord,
    negatives: Vec<NegRecord>,
}

impl From<&Triple> for TripleRecord {
    fn from(t: &Triple) -> Self {
        TripleRecord {
            query: t.query.clone(),
            positive: DocRecord {
                id: t.positive.doc_id.clone(),
                text: t.positive.text.clone(),
            },
            negatives: t
                .negative_pool
                .iter()
                .map(|(d, s)| NegRecord {
                    id: d.doc_id.clone(),
                    text: d.text.clone(),
                    score: *s,
                })
                .collect(),
        }
    }
}

impl From<TripleRecord> for Triple {
    fn from(r: TripleRecord) -> Self {
        Triple {
            query: r.query,
            positive: Document {
                doc_id: r.positive.id,
                text: r.positive.text,
            },
            negative_pool: r
                .negatives
                .into_iter()
                .map(|n| {
                    (
                        Document {
                            doc_id: n.id,
                            text: n.text,
                        },
                        n.score,
                    )
                })
                .collect(),
        }
    }
}

/// Writes triples as NDJSON, one object per line.
pub fn save_triples(triples: &[Triple], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for t in triples {
        let record = TripleRecord::from(t);
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::InvalidArgument(format!("unserializable triple: {e}")))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads NDJSON triples; malformed lines are reported with their number.
pub fn load_triples(path: &Path) -> Result<Vec<Triple>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut triples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TripleRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, i + 1, format!("invalid triple record: {e}")))?;
        triples.push(record.into());
    }
    Ok(triples)
}

/// Groups triples into batches of `total_passages / (negatives + 1)`
/// examples each, sampling hard negatives per example while keeping every
/// passage doc_id in a batch distinct. Examples whose pool is too small or
/// that cannot yield distinct negatives after 100 draws are skipped with a
/// warning; a short final batch is kept.
pub fn assemble_batches<'a, I, R>(
    triples: I,
    negatives_per_example: usize,
    total_passages: usize,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<Vec<TrainingBatch>>
where
    I: IntoIterator<Item = &'a Triple>,
    R: Rng,
{
    if total_passages < negatives_per_example + 1 {
        return Err(Error::InvalidArgument(format!(
            "total_passages ({total_passages}) must cover one example ({} passages)",
            negatives_per_example + 1
        )));
    }
    let per_batch = total_passages / (negatives_per_example + 1);
    let mut batches = Vec::new();
    let mut current: Vec<TrainingExample> = Vec::new();
    let mut used: HashSet<String> = HashSet::new();
    for triple in triples {
        if triple.negative_pool.len() < negatives_per_example {
            warn!(
                "skipping example for query '{}': pool has {} candidates, need {}",
                triple.query,
                triple.negative_pool.len(),
                negatives_per_example
            );
            continue;
        }
        if used.contains(&triple.positive.doc_id) {
            warn!(
                "skipping example for query '{}': positive '{}' already in batch",
                triple.query, triple.positive.doc_id
            );
            continue;
        }
        let mut chosen = None;
        for _ in 0..100 {
            let negs = sample_hard_negatives(
                &triple.negative_pool,
                negatives_per_example,
                1.0,
                rng,
            )?;
            let mut distinct = HashSet::new();
            let ok = negs.iter().all(|d| {
                d.doc_id != triple.positive.doc_id
                    && !used.contains(&d.doc_id)
                    && distinct.insert(d.doc_id.clone())
            });
            if ok {
                chosen = Some(negs);
                break;
            }
        }
        let Some(negatives) = chosen else {
            warn!(
                "skipping example for query '{}': no distinct negatives after 100 draws",
                triple.query
            );
            continue;
        };
        used.insert(triple.positive.doc_id.clone());
        for d in &negatives {
            used.insert(d.doc_id.clone());
        }
        current.push(TrainingExample {
            query: tokenize(&triple.query, vocab),
            positive: triple.positive.clone(),
            negatives,
        });
        if current.len() == per_batch {
            batches.push(TrainingBatch::new(std::mem::take(&mut current))?);
            used.clear();
        }
    }
    if !current.is_empty() {
        batches.push(TrainingBatch::new(current)?);
    }
    Ok(batches)
}

/// Rejoins token ids into text, dropping unknowns (they have no surface
/// form). Single-token words re-tokenize to themselves, so the round trip
/// is exact for the kept tokens.
pub(crate) fn tokens_to_text(ids: &[TokenId], vocab: &Vocabulary) -> String {
    ids.iter()
        .filter(|&&t| t != UNK_ID)
        .map(|&t| vocab.token(t))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Builds one pre-training batch of span pseudo-examples: the first half of
/// the slots use inverse cloze, the rest independent crops. Documents are
/// consumed round-robin via `cursor`; `counter` makes pseudo-passage ids
/// unique. Fails if the corpus has no document usable for a slot's task.
pub(crate) fn pretrain_batch<R: Rng>(
    docs: &[&Document],
    tokenized: &[Vec<TokenId>],
    cursor: &mut usize,
    counter: &mut u64,
    total_passages: usize,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<TrainingBatch> {
    let cloze_slots = total_passages / 2;
    let mut examples = Vec::with_capacity(total_passages);
    for slot in 0..total_passages {
        let is_cloze = slot < cloze_slots;
        let mut scanned = 0usize;
        let (doc, query_ids, passage_ids) = loop {
            if scanned >= docs.len() {
                return Err(Error::InvalidArgument(format!(
                    "no document long enough for {} task (need {} tokens)",
                    if is_cloze { "inverse-cloze" } else { "crop" },
                    if is_cloze { 2 } else { 1 }
                )));
            }
            let idx = *cursor % docs.len();
            *cursor += 1;
            scanned += 1;
            let tokens = &tokenized[idx];
            if is_cloze {
                if let Some((q, p)) = make_inverse_cloze(tokens, rng) {
                    break (docs[idx], q, p);
                }
            } else if !tokens.is_empty() {
                let (q, p) = make_independent_crop(tokens, rng);
                break (docs[idx], q, p);
            }
        };
        *counter += 1;
        let pseudo_id = format!("{}::s{}", doc.doc_id, *counter);
        examples.push(TrainingExample {
            query: tokenize(&tokens_to_text(&query_ids, vocab), vocab),
            positive: Document {
                doc_id: pseudo_id,
                text: tokens_to_text(&passage_ids, vocab),
            },
            negatives: Vec::new(),
        });
    }
    TrainingBatch::new(examples)
}
