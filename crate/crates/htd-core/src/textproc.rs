//! Text cleaning, tokenization, vocabulary construction, sequence encoding,
//! and TF-IDF weighting.
//!
//! The cleaning and tokenization rules are versioned (see [`RULE_VERSION`])
//! because encoded sequences are only meaningful alongside the exact rules
//! that produced them; the tag travels with the persisted tokenizer.

use std::collections::{BTreeMap, HashMap, HashSet};

/// Bumped whenever `clean` or `tokenize` semantics change.
pub const RULE_VERSION: &str = "r1";

/// Reserved id for padding positions.
pub const PAD_ID: usize = 0;
/// Reserved id for out-of-vocabulary tokens.
pub const OOV_ID: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TextProcError {
    #[error("cannot fit on an empty corpus")]
    EmptyCorpus,
}

/// Lowercases, drops non-whitespace control characters, collapses whitespace
/// runs to single spaces, and trims the ends.
pub fn clean(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.chars() {
        if c.is_whitespace() {
            pending_space = true;
        } else if c.is_control() {
            // dropped entirely; does not act as a separator
        } else {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            for lc in c.to_lowercase() {
                out.push(lc);
            }
        }
    }
    out
}

/// Splits cleaned text into maximal runs of Unicode alphanumerics. Digits
/// are kept; every other character is a separator.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Token/id mapping with two reserved ids: PAD = 0 and OOV = 1. Real tokens
/// occupy contiguous ids from 2 up, assigned by descending document
/// frequency with lexicographic tie-break.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    max_size: usize,
    min_df: usize,
}

impl Vocabulary {
    /// Total number of ids, reserved ones included.
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn max_size(&self) -> usize {
        self.max_size
    }

    pub fn min_df(&self) -> usize {
        self.min_df
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Non-reserved entries in id order, for persistence.
    pub fn entries(&self) -> impl Iterator<Item = (usize, &str)> {
        self.id_to_token
            .iter()
            .enumerate()
            .skip(2)
            .map(|(id, tok)| (id, tok.as_str()))
    }

    /// Rebuilds a vocabulary from non-reserved tokens in id order (the
    /// persisted form). `max_size` is set to the resulting size and `min_df`
    /// to 1: those fitting knobs are not part of the mapping identity.
    pub fn from_token_list(tokens: Vec<String>) -> Self {
        let mut id_to_token = vec!["<pad>".to_string(), "<oov>".to_string()];
        id_to_token.extend(tokens);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .skip(2)
            .map(|(id, tok)| (tok.clone(), id))
            .collect();
        let max_size = id_to_token.len();
        Self {
            token_to_id,
            id_to_token,
            max_size,
            min_df: 1,
        }
    }
}

/// Builds a vocabulary over tokenized documents. Tokens with document
/// frequency below `min_df` are dropped; the rest are ranked by descending
/// DF (ties lexicographic) and truncated so the total id count, reserved
/// ids included, does not exceed `max_size`.
pub fn fit_vocab(
    docs: &[Vec<String>],
    max_size: usize,
    min_df: usize,
) -> Result<Vocabulary, TextProcError> {
    if docs.is_empty() {
        return Err(TextProcError::EmptyCorpus);
    }
    let df = doc_frequencies(docs);
    let mut ranked: Vec<(&String, usize)> = df
        .iter()
        .filter(|(_, &count)| count >= min_df.max(1))
        .map(|(tok, &count)| (tok, count))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let keep = max_size.saturating_sub(2).min(ranked.len());
    let tokens: Vec<String> = ranked[..keep].iter().map(|(t, _)| (*t).clone()).collect();
    let mut vocab = Vocabulary::from_token_list(tokens);
    vocab.max_size = max_size;
    vocab.min_df = min_df;
    Ok(vocab)
}

/// Fixed-length id sequence for the neural path. Positions at and beyond
/// `true_length` are PAD; none before it are.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSequence {
    pub ids: Vec<usize>,
    pub true_length: usize,
}

/// Maps the first `len` tokens to ids (unknown tokens become OOV) and
/// right-pads with PAD up to `len`.
pub fn encode(tokens: &[String], vocab: &Vocabulary, len: usize) -> EncodedSequence {
    assert!(len >= 1, "encode needs a positive sequence length");
    let true_length = tokens.len().min(len);
    let mut ids = Vec::with_capacity(len);
    for tok in &tokens[..true_length] {
        ids.push(vocab.id_of(tok).unwrap_or(OOV_ID));
    }
    ids.resize(len, PAD_ID);
    EncodedSequence { ids, true_length }
}

/// Document-frequency statistics: `N` documents, and for each term the
/// number of documents containing it at least once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TfIdfModel {
    n_documents: usize,
    doc_freq: HashMap<String, usize>,
}

impl TfIdfModel {
    pub fn n_documents(&self) -> usize {
        self.n_documents
    }

    pub fn doc_freq(&self, token: &str) -> Option<usize> {
        self.doc_freq.get(token).copied()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&str, usize)> {
        self.doc_freq.iter().map(|(t, &df)| (t.as_str(), df))
    }

    /// Rebuilds a fitted model from persisted statistics.
    pub fn from_parts(n_documents: usize, doc_freq: HashMap<String, usize>) -> Self {
        Self {
            n_documents,
            doc_freq,
        }
    }
}

fn doc_frequencies(docs: &[Vec<String>]) -> HashMap<String, usize> {
    let mut df: HashMap<String, usize> = HashMap::new();
    for doc in docs {
        let unique: HashSet<&String> = doc.iter().collect();
        for tok in unique {
            *df.entry(tok.clone()).or_insert(0) += 1;
        }
    }
    df
}

/// Fits document frequencies over tokenized documents.
pub fn tfidf_fit(docs: &[Vec<String>]) -> Result<TfIdfModel, TextProcError> {
    if docs.is_empty() {
        return Err(TextProcError::EmptyCorpus);
    }
    Ok(TfIdfModel {
        n_documents: docs.len(),
        doc_freq: doc_frequencies(docs),
    })
}

/// Weighs one document's terms: `TF(t,d) * ln(N / DF(t))` with raw counts
/// and no smoothing. Terms absent from the document are absent from the
/// output; terms unseen at fit time contribute nothing; a term present in
/// every document weighs exactly 0.
pub fn tfidf_transform(model: &TfIdfModel, tokens: &[String]) -> BTreeMap<String, f64> {
    let mut tf: BTreeMap<&String, usize> = BTreeMap::new();
    for tok in tokens {
        *tf.entry(tok).or_insert(0) += 1;
    }
    let n = model.n_documents as f64;
    let mut out = BTreeMap::new();
    for (tok, count) in tf {
        if let Some(&df) = model.doc_freq.get(tok) {
            let weight = count as f64 * (n / df as f64).ln();
            out.insert(tok.clone(), weight);
        }
    }
    out
}
