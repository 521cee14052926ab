//! Retrieval vocabulary and deterministic tokenization.
//!
//! The vocabulary is a fixed list of token strings, one per line, where the
//! first line is the designated unknown token. Tokenization lowercases,
//! splits on whitespace, then segments each word by greedy longest-prefix
//! match against the vocabulary; any character that starts no vocabulary
//! token becomes a single UNK emission.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Index of a token string within a [`Vocabulary`], contiguous in `[0, V)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Immutable token list; ids are line numbers, line 1 (id 0) is UNK.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    id_of: HashMap<String, u32>,
    /// Longest token length in chars; bounds the greedy matcher's lookahead.
    max_token_chars: usize,
}

pub const UNK_ID: TokenId = TokenId(0);

impl Vocabulary {
    /// Builds a vocabulary from token strings in id order. The first entry
    /// is the UNK token.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument(
                "vocabulary must contain at least the unknown token".into(),
            ));
        }
        let mut id_of = HashMap::with_capacity(tokens.len());
        let mut max_token_chars = 0;
        for (i, tok) in tokens.iter().enumerate() {
            if id_of.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate vocabulary token '{tok}'"
                )));
            }
            max_token_chars = max_token_chars.max(tok.chars().count());
        }
        Ok(Vocabulary {
            tokens,
            id_of,
            max_token_chars,
        })
    }

    /// Number of tokens, including UNK.
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn unk_id(&self) -> TokenId {
        UNK_ID
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id.index()]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.id_of.get(token).copied().map(TokenId)
    }

    /// Lookup used during segmentation: the UNK string itself is reserved
    /// and never matched, so it can only be produced as a fallback.
    fn match_id(&self, candidate: &str) -> Option<TokenId> {
        match self.id_of.get(candidate).copied() {
            Some(0) => None,
            Some(id) => Some(TokenId(id)),
            None => None,
        }
    }

    /// SHA-256 over the token list (one token per line, LF-terminated);
    /// identifies the vocabulary in persisted artifacts.
    pub fn checksum(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for tok in &self.tokens {
            hasher.update(tok.as_bytes());
            hasher.update(b"\n");
        }
        hasher.finalize().into()
    }
}

/// Loads a vocabulary file: UTF-8, one token per line, first line UNK.
pub fn load_vocabulary(path: impl AsRef<Path>) -> Result<Vocabulary> {
    let path = path.as_ref();
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut tokens = Vec::new();
    let mut id_of: HashMap<String, u32> = HashMap::new();
    for (lineno, line) in raw.lines().enumerate() {
        if line.is_empty() {
            return Err(Error::format(path, lineno + 1, "empty vocabulary token"));
        }
        if id_of.insert(line.to_string(), tokens.len() as u32).is_some() {
            return Err(Error::format(
                path,
                lineno + 1,
                format!("duplicate token '{line}'"),
            ));
        }
        tokens.push(line.to_string());
    }
    if tokens.is_empty() {
        return Err(Error::format(path, 1, "empty vocabulary file"));
    }
    let max_token_chars = tokens.iter().map(|t| t.chars().count()).max().unwrap_or(0);
    Ok(Vocabulary {
        tokens,
        id_of,
        max_token_chars,
    })
}

/// Token ids produced from one input text, with the original character count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub source_len: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lowercase, split on whitespace, then greedily match the longest
/// vocabulary token at each position of each word. A character starting no
/// token emits UNK and advances by one char.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> TokenSequence {
    let source_len = text.chars().count();
    let lowered = text.to_lowercase();
    let mut ids = Vec::new();
    for word in lowered.split_whitespace() {
        // Char-boundary byte offsets; bounds[i]..bounds[j] is chars i..j.
        let bounds: Vec<usize> = word
            .char_indices()
            .map(|(i, _)| i)
            .chain(std::iter::once(word.len()))
            .collect();
        let nchars = bounds.len() - 1;
        let mut pos = 0;
        while pos < nchars {
            let longest = (nchars - pos).min(vocab.max_token_chars);
            let mut matched = None;
            for len in (1..=longest).rev() {
                if let Some(id) = vocab.match_id(&word[bounds[pos]..bounds[pos + len]]) {
                    matched = Some((id, len));
                    break;
                }
            }
            match matched {
                Some((id, len)) => {
                    ids.push(id);
                    pos += len;
                }
                None => {
                    ids.push(vocab.unk_id());
                    pos += 1;
                }
            }
        }
    }
    TokenSequence { ids, source_len }
}

/// Weighted query tokens: by default the weight of a token is its occurrence
/// count in the tokenized query. UNK emissions are dropped — an unknown term
/// can never match a posting.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryFeature {
    /// (token id, weight), strictly ascending by token id.
    entries: Vec<(TokenId, f64)>,
}

impl QueryFeature {
    /// Builds a feature from explicit entries; ids must be strictly
    /// ascending and weights positive.
    pub fn from_entries(entries: Vec<(TokenId, f64)>) -> Result<Self> {
        for window in entries.windows(2) {
            if window[0].0 >= window[1].0 {
                return Err(Error::InvalidArgument(
                    "query feature token ids must be strictly ascending".into(),
                ));
            }
        }
        if entries.iter().any(|&(_, w)| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(
                "query feature weights must be positive and finite".into(),
            ));
        }
        Ok(QueryFeature { entries })
    }

    /// Entries sorted ascending by token id.
    pub fn entries(&self) -> &[(TokenId, f64)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of distinct tokens.
    pub fn num_tokens(&self) -> usize {
        self.entries.len()
    }

    /// Total weight; equals the count of non-UNK emissions for count
    /// features.
    pub fn weight_sum(&self) -> f64 {
        self.entries.iter().map(|&(_, w)| w).sum()
    }

    /// Same token set with every weight forced to 1 (multi-hot instead of
    /// counts).
    pub fn clamped(&self) -> QueryFeature {
        QueryFeature {
            entries: self.entries.iter().map(|&(t, _)| (t, 1.0)).collect(),
        }
    }
}

/// Tokenizes a query and counts non-UNK occurrences per token id.
pub fn featurize_query(query: &str, vocab: &Vocabulary) -> QueryFeature {
    featurize_tokens(&tokenize(query, vocab))
}

/// Count feature over an existing token sequence (UNK dropped).
pub fn featurize_tokens(tokens: &TokenSequence) -> QueryFeature {
    let mut counts: std::collections::BTreeMap<TokenId, f64> = std::collections::BTreeMap::new();
    for &id in &tokens.ids {
        if id != UNK_ID {
            *counts.entry(id).or_insert(0.0) += 1.0;
        }
    }
    QueryFeature {
        entries: counts.into_iter().collect(),
    }
}
