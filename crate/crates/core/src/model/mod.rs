//! Document-to-score-vector indexer model.
//!
//! The model maps a document to one score per vocabulary token in a single
//! parallel step: the document is pooled into a fixed-width encoding, each
//! of P decode positions fuses that encoding with its own position
//! embedding through a tanh layer, projects to vocabulary logits, and the
//! final score for a token is the maximum logit across positions.
//!
//! Inference (`encode_document`) exposes f32 vectors to match the index
//! format; all internal arithmetic is f64 so training gradients can be
//! validated against finite differences.

mod data;
mod train;

pub use data::{
    assemble_batches, load_triples, make_independent_crop, make_inverse_cloze,
    sample_hard_negatives, save_triples, Triple,
};
pub use train::{
    batch_scores, contrastive_loss, loss_gradient, sgd_step, trace_to_csv, train, ModelGrads,
    Stage, TraceEntry, TrainConfig, TrainData, TrainOutcome, TrainingBatch, TrainingExample,
};

use std::path::Path;

use rand::Rng;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::index::ScoreVector;
use crate::vocab::{TokenId, TokenSequence};

/// Row-major f64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Entries i.i.d. uniform in (−limit, limit), drawn row-major.
    pub fn uniform(rows: usize, cols: usize, limit: f64, rng: &mut impl Rng) -> Mat {
        Mat {
            rows,
            cols,
            data: (0..rows * cols)
                .map(|_| rng.gen_range(-limit..limit))
                .collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Shape hyperparameters: vocabulary size, hidden width, decode positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelHyper {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub positions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hyper: ModelHyper,
    /// V×h token embeddings (mean-pooled into the document encoding).
    pub token_emb: Mat,
    /// P×h position embeddings, one per decode position.
    pub pos_emb: Mat,
    /// h×2h fusion of [encoding ; position embedding].
    pub fuse: Mat,
    /// h fusion bias.
    pub fuse_bias: Vec<f64>,
    /// V×h output projection.
    pub out_proj: Mat,
    /// V output bias.
    pub out_bias: Vec<f64>,
}

pub const INIT_LIMIT: f64 = 0.05;

impl ModelParams {
    /// Embeddings and projections uniform(−0.05, 0.05); biases zero. The
    /// draw order (token_emb, pos_emb, fuse, out_proj) is part of seed
    /// reproducibility.
    pub fn init(hyper: ModelHyper, rng: &mut impl Rng) -> ModelParams {
        let ModelHyper {
            vocab_size: v,
            hidden_dim: h,
            positions: p,
        } = hyper;
        ModelParams {
            hyper,
            token_emb: Mat::uniform(v, h, INIT_LIMIT, rng),
            pos_emb: Mat::uniform(p, h, INIT_LIMIT, rng),
            fuse: Mat::uniform(h, 2 * h, INIT_LIMIT, rng),
            fuse_bias: vec![0.0; h],
            out_proj: Mat::uniform(v, h, INIT_LIMIT, rng),
            out_bias: vec![0.0; v],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.token_emb.data().iter().all(|x| x.is_finite())
            && self.pos_emb.data().iter().all(|x| x.is_finite())
            && self.fuse.data().iter().all(|x| x.is_finite())
            && self.fuse_bias.iter().all(|x| x.is_finite())
            && self.out_proj.data().iter().all(|x| x.is_finite())
            && self.out_bias.iter().all(|x| x.is_finite())
    }
}

/// Forward-pass cache for one document: everything the backward pass needs.
pub(crate) struct DocForward {
    /// Mean of token embeddings (zeros for an empty document).
    pub enc: Vec<f64>,
    /// P×h tanh activations.
    pub hidden: Mat,
    /// Per-token max over positions.
    pub pooled: Vec<f64>,
    /// First position attaining each token's max.
    pub argmax: Vec<u32>,
}

pub(crate) fn forward_document(ids: &[TokenId], params: &ModelParams) -> DocForward {
    let ModelHyper {
        vocab_size: v,
        hidden_dim: h,
        positions: p,
    } = params.hyper;

    let mut enc = vec![0.0f64; h];
    if !ids.is_empty() {
        for &tok in ids {
            let row = params.token_emb.row(tok.index());
            for (e, &x) in enc.iter_mut().zip(row) {
                *e += x;
            }
        }
        let scale = 1.0 / ids.len() as f64;
        for e in &mut enc {
            *e *= scale;
        }
    }

    let mut hidden = Mat::zeros(p, h);
    let mut pooled = vec![f64::NEG_INFINITY; v];
    let mut argmax = vec![0u32; v];
    for k in 0..p {
        let pos = params.pos_emb.row(k);
        {
            let hk = hidden.row_mut(k);
            for (i, hi) in hk.iter_mut().enumerate() {
                let w = params.fuse.row(i);
                // z = W·[enc ; pos] + bias, fused without materializing the
                // concatenation.
                let z = dot(&w[..h], &enc) + dot(&w[h..], pos) + params.fuse_bias[i];
                *hi = z.tanh();
            }
        }
        let hk = hidden.row(k);
        for t in 0..v {
            let logit = dot(params.out_proj.row(t), hk) + params.out_bias[t];
            // Strict inequality keeps the first position on ties.
            if logit > pooled[t] {
                pooled[t] = logit;
                argmax[t] = k as u32;
            }
        }
    }
    if p == 0 {
        // Degenerate but total: no positions means all-zero scores.
        pooled.iter_mut().for_each(|x| *x = 0.0);
    }
    DocForward {
        enc,
        hidden,
        pooled,
        argmax,
    }
}

/// Scores every vocabulary token for one document (f32, for indexing).
pub fn encode_document(tokens: &TokenSequence, params: &ModelParams) -> ScoreVector {
    let fwd = forward_document(&tokens.ids, params);
    ScoreVector::new(fwd.pooled.iter().map(|&x| x as f32).collect())
        .expect("finite params produce finite scores")
}

pub const MODEL_MAGIC: &[u8; 8] = b"NAILMDL1";
pub const MODEL_VERSION: u32 = 1;

/// Provenance metadata carried by a checkpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub seed: u64,
    /// "pretrain", "finetune", or "init".
    pub stage: String,
}

fn write_f32s(w: &mut Writer, values: &[f64]) {
    for &x in values {
        w.f32(x as f32);
    }
}

/// Persists a checkpoint: header (shapes, seed, stage) then the parameter
/// arrays as little-endian f32 in a fixed order.
pub fn save_model(
    params: &ModelParams,
    meta: &CheckpointMeta,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let mut w = Writer::new(MODEL_MAGIC);
    w.u32(MODEL_VERSION);
    w.u32(params.hyper.vocab_size as u32);
    w.u32(params.hyper.hidden_dim as u32);
    w.u32(params.hyper.positions as u32);
    w.u64(meta.seed);
    w.string(&meta.stage);
    write_f32s(&mut w, params.token_emb.data());
    write_f32s(&mut w, params.pos_emb.data());
    write_f32s(&mut w, params.fuse.data());
    write_f32s(&mut w, &params.fuse_bias);
    write_f32s(&mut w, params.out_proj.data());
    write_f32s(&mut w, &params.out_bias);
    w.finish(path)
}

fn read_mat(r: &mut Reader, rows: usize, cols: usize) -> Result<Mat> {
    let mut m = Mat::zeros(rows, cols);
    for x in m.data_mut() {
        *x = f64::from(r.f32()?);
    }
    Ok(m)
}

fn read_vec(r: &mut Reader, len: usize) -> Result<Vec<f64>> {
    (0..len).map(|_| r.f32().map(f64::from)).collect()
}

/// Loads a checkpoint. Parameters are promoted to f64; saving them again
/// reproduces the file byte-for-byte.
pub fn load_model(path: impl AsRef<Path>) -> Result<(ModelParams, CheckpointMeta)> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(&buf, path, MODEL_MAGIC)?;
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::Incompatible(format!(
            "model format version {version} (supported: {MODEL_VERSION})"
        )));
    }
    let v = r.u32()? as usize;
    let h = r.u32()? as usize;
    let p = r.u32()? as usize;
    let seed = r.u64()?;
    let stage = r.string()?;
    let params = ModelParams {
        hyper: ModelHyper {
            vocab_size: v,
            hidden_dim: h,
            positions: p,
        },
        token_emb: read_mat(&mut r, v, h)?,
        pos_emb: read_mat(&mut r, p, h)?,
        fuse: read_mat(&mut r, h, 2 * h)?,
        fuse_bias: read_vec(&mut r, h)?,
        out_proj: read_mat(&mut r, v, h)?,
        out_bias: read_vec(&mut r, v)?,
    };
    r.finish()?;
    Ok((params, CheckpointMeta { seed, stage }))
}
