//! Corpus ingestion and deterministic partitioning.
//!
//! The dataset is a strict four-column CSV (`id`, `human_text`, `ai_text`,
//! `instructions`, any order, RFC-4180 quoting, UTF-8). Each record expands
//! into two labeled examples, one per class, so expanded corpora are always
//! class-balanced. Splits and folds are stratified and reproducible from a
//! single seed.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::rng::DetRng;
use crate::textproc::clean;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read corpus: {0}")]
    Io(#[from] std::io::Error),
    #[error("missing column `{0}` in header")]
    MissingColumn(String),
    #[error("unexpected column `{0}` in header")]
    UnexpectedColumn(String),
    #[error("duplicate id `{id}` at row {row}")]
    DuplicateId { id: String, row: u64 },
    #[error("row {row}: `{column}` is empty after cleaning")]
    EmptyTextField { row: u64, column: &'static str },
    #[error("malformed CSV at row {row}: {message}")]
    MalformedCsv { row: u64, message: String },
    #[error("insufficient data: {detail}")]
    InsufficientData { detail: String },
    #[error("fold count {k} out of range for {n} examples (need 2 <= k <= n)")]
    BadFoldCount { k: usize, n: usize },
    #[error("split ratio {0} out of range (need 0 < ratio < 1)")]
    BadRatio(f64),
}

/// One CSV row. `instructions` is prompt metadata: carried through, never
/// fed to the classifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusRecord {
    pub id: String,
    pub human_text: String,
    pub ai_text: String,
    pub instructions: String,
}

/// Binary class: AI-generated text is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Human,
    Ai,
}

impl Label {
    pub fn is_ai(self) -> bool {
        matches!(self, Label::Ai)
    }

    /// 0 for human, 1 for AI: the order classes are processed in.
    pub fn class_index(self) -> usize {
        match self {
            Label::Human => 0,
            Label::Ai => 1,
        }
    }

    /// Training target for the sigmoid head.
    pub fn target(self) -> f64 {
        match self {
            Label::Human => 0.0,
            Label::Ai => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub source_id: String,
    pub text: String,
    pub label: Label,
}

const COLUMNS: [&str; 4] = ["id", "human_text", "ai_text", "instructions"];

/// Loads and validates a corpus file. Any schema or content violation
/// aborts the load with row context.
pub fn load_corpus(path: &Path) -> Result<Vec<CorpusRecord>, CorpusError> {
    let file = std::fs::File::open(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(file);

    let headers = reader
        .headers()
        .map_err(|e| csv_error_to_malformed(&e))?
        .clone();
    let mut col_index = [0usize; 4];
    let mut seen: HashSet<&str> = HashSet::new();
    for (pos, name) in headers.iter().enumerate() {
        match COLUMNS.iter().position(|&c| c == name) {
            Some(c) if seen.insert(name) => col_index[c] = pos,
            _ => return Err(CorpusError::UnexpectedColumn(name.to_string())),
        }
    }
    for &col in &COLUMNS {
        if !seen.contains(col) {
            return Err(CorpusError::MissingColumn(col.to_string()));
        }
    }

    let mut records = Vec::new();
    let mut ids: HashSet<String> = HashSet::new();
    for (i, result) in reader.records().enumerate() {
        let record = result.map_err(|e| csv_error_to_malformed(&e))?;
        let row = record
            .position()
            .map(|p| p.line())
            .unwrap_or(i as u64 + 2);
        let field = |c: usize| record.get(col_index[c]).unwrap_or("").to_string();
        let (id, human_text, ai_text, instructions) = (field(0), field(1), field(2), field(3));
        if id.is_empty() {
            return Err(CorpusError::MalformedCsv {
                row,
                message: "empty id".to_string(),
            });
        }
        if !ids.insert(id.clone()) {
            return Err(CorpusError::DuplicateId { id, row });
        }
        if clean(&human_text).is_empty() {
            return Err(CorpusError::EmptyTextField {
                row,
                column: "human_text",
            });
        }
        if clean(&ai_text).is_empty() {
            return Err(CorpusError::EmptyTextField {
                row,
                column: "ai_text",
            });
        }
        records.push(CorpusRecord {
            id,
            human_text,
            ai_text,
            instructions,
        });
    }
    Ok(records)
}

fn csv_error_to_malformed(err: &csv::Error) -> CorpusError {
    let row = err.position().map(|p| p.line()).unwrap_or(0);
    CorpusError::MalformedCsv {
        row,
        message: err.to_string(),
    }
}

/// Expands each record into its two labeled examples, human first, in
/// record order. The result is exactly class-balanced.
pub fn expand_examples(corpus: &[CorpusRecord]) -> Vec<LabeledExample> {
    let mut out = Vec::with_capacity(corpus.len() * 2);
    for rec in corpus {
        out.push(LabeledExample {
            source_id: rec.id.clone(),
            text: rec.human_text.clone(),
            label: Label::Human,
        });
        out.push(LabeledExample {
            source_id: rec.id.clone(),
            text: rec.ai_text.clone(),
            label: Label::Ai,
        });
    }
    out
}

/// A stratified train/test partition of example indices.
///
/// Serializes to `{"seed":…,"ratio":…,"train":[…],"test":[…]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub ratio: f64,
    #[serde(rename = "train")]
    pub train_indices: Vec<usize>,
    #[serde(rename = "test")]
    pub test_indices: Vec<usize>,
}

/// A stratified k-fold partition of example indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub k: usize,
    pub folds: Vec<Vec<usize>>,
}

fn indices_by_class(examples: &[LabeledExample]) -> [Vec<usize>; 2] {
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, ex) in examples.iter().enumerate() {
        by_class[ex.label.class_index()].push(i);
    }
    by_class
}

/// Deterministic stratified split.
///
/// Per class, the train side receives `floor(ratio * n_c)` examples after a
/// seeded shuffle; the shortfall against `floor(ratio * n)` overall is made
/// up one example per class in ascending class order. Both sides of both
/// classes must end up non-empty.
pub fn split_train_test(
    examples: &[LabeledExample],
    ratio: f64,
    seed: u64,
) -> Result<SplitPlan, CorpusError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CorpusError::BadRatio(ratio));
    }
    let n = examples.len();
    let mut by_class = indices_by_class(examples);
    if by_class.iter().any(Vec::is_empty) {
        return Err(CorpusError::InsufficientData {
            detail: "both classes must be present".to_string(),
        });
    }

    let mut rng = DetRng::new(seed);
    for class in by_class.iter_mut() {
        rng.shuffle(class);
    }

    let total_train = (ratio * n as f64).floor() as usize;
    let mut train_counts: Vec<usize> = by_class
        .iter()
        .map(|c| (ratio * c.len() as f64).floor() as usize)
        .collect();
    let mut deficit = total_train.saturating_sub(train_counts.iter().sum());
    for count in train_counts.iter_mut() {
        if deficit == 0 {
            break;
        }
        *count += 1;
        deficit -= 1;
    }

    for (c, (&count, class)) in train_counts.iter().zip(&by_class).enumerate() {
        if count == 0 || count >= class.len() {
            return Err(CorpusError::InsufficientData {
                detail: format!("class {c} would have an empty train or test side"),
            });
        }
    }

    let mut train_indices = Vec::new();
    let mut test_indices = Vec::new();
    for (&count, class) in train_counts.iter().zip(&by_class) {
        train_indices.extend_from_slice(&class[..count]);
        test_indices.extend_from_slice(&class[count..]);
    }
    Ok(SplitPlan {
        seed,
        ratio,
        train_indices,
        test_indices,
    })
}

/// Deterministic stratified k-fold partition.
///
/// Each class deals `n_c / k` examples to every fold; the `n_c mod k`
/// leftovers go to consecutive folds in a rotation that carries across
/// classes, keeping overall fold sizes within 1 of each other.
pub fn kfold(examples: &[LabeledExample], k: usize, seed: u64) -> Result<FoldPlan, CorpusError> {
    let n = examples.len();
    if k < 2 || k > n {
        return Err(CorpusError::BadFoldCount { k, n });
    }
    let mut by_class = indices_by_class(examples);
    let mut rng = DetRng::new(seed);
    for class in by_class.iter_mut() {
        rng.shuffle(class);
    }

    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut extra_start = 0usize;
    for class in &by_class {
        let base = class.len() / k;
        let extras = class.len() % k;
        let mut cursor = 0;
        for (f, fold) in folds.iter_mut().enumerate() {
            let rel = (f + k - extra_start) % k;
            let take = base + usize::from(rel < extras);
            fold.extend_from_slice(&class[cursor..cursor + take]);
            cursor += take;
        }
        extra_start = (extra_start + extras) % k;
    }
    Ok(FoldPlan { seed, k, folds })
}
