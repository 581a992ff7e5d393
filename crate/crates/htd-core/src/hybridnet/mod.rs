//! The hybrid classifier: embedding, parallel convolutional and recurrent
//! branches, concatenation, dense head, sigmoid output. AI-generated text
//! is the positive class (label 1); the decision threshold is fixed at 0.5
//! with ties going positive.

mod model;
mod params;

pub use model::{
    prepare_example, prepare_examples, predict, score_examples, train, Hyperparams,
    PreparedExample, SparseFeatures, TrainReport,
};
pub use params::{init_params, GruParams, HybridModelParams};

use crate::numgrad::NumGradError;

/// Classification threshold on the sigmoid output. Scores at or above it
/// are labeled AI.
pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum HybridNetError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("parameter set mismatch: {0}")]
    BadParams(String),
    #[error(transparent)]
    Grad(#[from] NumGradError),
    #[error("degenerate training data: train needs both classes and a non-empty validation set")]
    DegenerateTrainingSet,
    #[error("training diverged: non-finite loss")]
    NonFinite,
    #[error("{context}: no tokens survive cleaning and tokenization")]
    EmptyAfterTokenize { context: String },
}

/// Architecture and preprocessing dimensions. `seed` drives parameter
/// initialization, batch order, and dropout; one seed reproduces a whole
/// run.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub seq_len: usize,
    pub kernel_widths: Vec<usize>,
    pub filters_per_width: usize,
    pub gru_hidden: usize,
    pub dense_hidden: usize,
    pub use_tfidf_aux: bool,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 64,
            seq_len: 256,
            kernel_widths: vec![3, 4, 5],
            filters_per_width: 32,
            gru_hidden: 64,
            dense_hidden: 64,
            use_tfidf_aux: false,
            dropout_rate: 0.2,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<(), HybridNetError> {
        let bad = |field: &str| Err(HybridNetError::BadConfig(field.to_string()));
        if self.vocab_size < 2 {
            return bad("vocab_size (needs room for PAD and OOV)");
        }
        if self.embed_dim == 0 {
            return bad("embed_dim");
        }
        if self.seq_len == 0 {
            return bad("seq_len");
        }
        if self.kernel_widths.is_empty() {
            return bad("kernel_widths (empty)");
        }
        let mut seen = std::collections::HashSet::new();
        for &w in &self.kernel_widths {
            if w == 0 || w > self.seq_len {
                return bad("kernel width (must be positive and at most seq_len)");
            }
            if !seen.insert(w) {
                return bad("kernel width (duplicate)");
            }
        }
        if self.filters_per_width == 0 {
            return bad("filters_per_width");
        }
        if self.gru_hidden == 0 {
            return bad("gru_hidden");
        }
        if self.dense_hidden == 0 {
            return bad("dense_hidden");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate (must be in [0,1))");
        }
        Ok(())
    }

    /// Dimension of the auxiliary TF-IDF projection when enabled.
    pub fn aux_dim(&self) -> usize {
        self.embed_dim
    }

    /// Dimension of the concatenated hybrid vector feeding the dense head.
    pub fn hybrid_dim(&self) -> usize {
        let conv = self.kernel_widths.len() * self.filters_per_width;
        let aux = if self.use_tfidf_aux { self.aux_dim() } else { 0 };
        conv + self.gru_hidden + aux
    }
}
